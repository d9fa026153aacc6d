//! Row-major f64 matrix with the three GEMM variants the layer
//! backward passes need. All products use a fixed loop order so results
//! are bit-identical regardless of caller threading; no BLAS.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C += A (m x k) * B (k x n). ikj loop order: the inner axpy streams
/// rows of B and C.
pub fn gemm_acc(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = &mut c.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// C += A^T (k x m)^T * B (k x n), i.e. C is m x n. Streams paired rows
/// of A and B; used for weight gradients.
pub fn gemm_tn_acc(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let crow = &mut c.data[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += ari * brow[j];
            }
        }
    }
}

/// C += A (m x k) * B^T (n x k)^T, i.e. C is m x n. Used for input
/// gradients (grad = grad_out * W^T).
pub fn gemm_nt_acc(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            c.data[i * c.cols + j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn naive_mul(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for k in 0..a.cols {
                    acc += a.at(i, k) * b.at(k, j);
                }
                *c.at_mut(i, j) = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.random_range(1..12),
                rng.random_range(1..12),
                rng.random_range(1..12),
            );
            let a = random_mat(&mut rng, m, k);
            let b = random_mat(&mut rng, k, n);
            let expect = naive_mul(&a, &b);

            let mut c = Mat::zeros(m, n);
            gemm_acc(&mut c, &a, &b);
            for (x, y) in c.data.iter().zip(&expect.data) {
                assert_relative_eq!(x, y, max_relative = 1e-12);
            }

            // A^T path: feed A transposed as a k x m matrix.
            let mut at = Mat::zeros(k, m);
            for i in 0..m {
                for j in 0..k {
                    *at.at_mut(j, i) = a.at(i, j);
                }
            }
            let mut c2 = Mat::zeros(m, n);
            gemm_tn_acc(&mut c2, &at, &b);
            for (x, y) in c2.data.iter().zip(&expect.data) {
                assert_relative_eq!(x, y, max_relative = 1e-12);
            }

            // B^T path: feed B transposed as an n x k matrix.
            let mut bt = Mat::zeros(n, k);
            for i in 0..k {
                for j in 0..n {
                    *bt.at_mut(j, i) = b.at(i, j);
                }
            }
            let mut c3 = Mat::zeros(m, n);
            gemm_nt_acc(&mut c3, &a, &bt);
            for (x, y) in c3.data.iter().zip(&expect.data) {
                assert_relative_eq!(x, y, max_relative = 1e-12);
            }
        }
    }
}
