//! Central finite-difference gradient checks over every layer and loss,
//! reported as max relative error per check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::evidential::frame_loss;
use crate::nn::layers::{
    batchnorm_bwd, batchnorm_train_fwd, dense_bwd, dense_fwd, global_avg_pool_bwd,
    global_avg_pool_fwd, relu_bwd, relu_fwd,
};
use crate::nn::{conv_backward, conv_forward, BatchNormParams, ConvParams, DenseParams, Mat};
use crate::sparse::build_kernel_map;

pub const GRADCHECK_TOL: f64 = 1e-4;
const FD_H: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Parameters probed.
    pub points: usize,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (1.0 + fd.abs())
}

/// Accumulates max relative error between analytic gradients and
/// central differences of a scalar objective.
struct Acc {
    max: f64,
    points: usize,
}

impl Acc {
    fn new() -> Self {
        Self {
            max: 0.0,
            points: 0,
        }
    }

    fn push(&mut self, analytic: f64, fd: f64) {
        self.max = self.max.max(rel_err(analytic, fd));
        self.points += 1;
    }

    fn result(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            max_rel_err: self.max,
            points: self.points,
            tol: GRADCHECK_TOL,
        }
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    m
}

/// Scalar objective: random linear functional of the layer output.
fn dot(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn conv_checks(rng: &mut ChaCha8Rng, instances: usize) -> Vec<CheckResult> {
    let (c_in, c_out) = (3, 4);
    let mut acc_w = Acc::new();
    let mut acc_b = Acc::new();
    let mut acc_x = Acc::new();
    for _ in 0..instances {
        let mut coords = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while coords.len() < 50 {
            let c = [
                rng.random_range(0..8),
                rng.random_range(0..8),
                rng.random_range(0..8),
            ];
            if seen.insert(c) {
                coords.push(c);
            }
        }
        let km = build_kernel_map(&coords, 3, 1).unwrap();
        let n_out = km.out_coords.len();
        let x = rand_mat(rng, coords.len(), c_in);
        let mut params = ConvParams::zeros(km.offsets.len(), c_in, c_out);
        for w in params.weights.iter_mut() {
            *w = rand_mat(rng, c_in, c_out);
        }
        for b in params.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let w_obj = rand_mat(rng, n_out, c_out);
        let loss = |x: &Mat, p: &ConvParams| {
            dot(&conv_forward(x, &km.offsets, p, n_out).unwrap(), &w_obj)
        };
        let (grad_x, grads) = conv_backward(&w_obj, &x, &km.offsets, &params).unwrap();
        for oi in (0..params.weights.len()).step_by(5) {
            for e in 0..c_in * c_out {
                let mut up = params.clone();
                up.weights[oi].data[e] += FD_H;
                let mut dn = params.clone();
                dn.weights[oi].data[e] -= FD_H;
                let fd = (loss(&x, &up) - loss(&x, &dn)) / (2.0 * FD_H);
                acc_w.push(grads.weights[oi].data[e], fd);
            }
        }
        for j in 0..c_out {
            let mut up = params.clone();
            up.bias[j] += FD_H;
            let mut dn = params.clone();
            dn.bias[j] -= FD_H;
            let fd = (loss(&x, &up) - loss(&x, &dn)) / (2.0 * FD_H);
            acc_b.push(grads.bias[j], fd);
        }
        for e in (0..x.data.len()).step_by(2) {
            let mut up = x.clone();
            up.data[e] += FD_H;
            let mut dn = x.clone();
            dn.data[e] -= FD_H;
            let fd = (loss(&up, &params) - loss(&dn, &params)) / (2.0 * FD_H);
            acc_x.push(grad_x.data[e], fd);
        }
    }
    vec![
        acc_w.result("sparse_conv/weights"),
        acc_b.result("sparse_conv/bias"),
        acc_x.result("sparse_conv/input"),
    ]
}

fn dense_checks(rng: &mut ChaCha8Rng, instances: usize) -> Vec<CheckResult> {
    let (c_in, c_out) = (7, 5);
    let mut acc_w = Acc::new();
    let mut acc_b = Acc::new();
    let mut acc_x = Acc::new();
    for _ in 0..instances {
        let x = rand_mat(rng, 6, c_in);
        let params = DenseParams {
            weight: rand_mat(rng, c_in, c_out),
            bias: (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let w_obj = rand_mat(rng, 6, c_out);
        let loss = |x: &Mat, p: &DenseParams| dot(&dense_fwd(x, p), &w_obj);
        let (grad_x, grads) = dense_bwd(&w_obj, &x, &params);
        for e in 0..params.weight.data.len() {
            let mut up = params.weight.clone();
            up.data[e] += FD_H;
            let mut dn = params.weight.clone();
            dn.data[e] -= FD_H;
            let up_p = DenseParams {
                weight: up,
                bias: params.bias.clone(),
            };
            let dn_p = DenseParams {
                weight: dn,
                bias: params.bias.clone(),
            };
            let fd = (loss(&x, &up_p) - loss(&x, &dn_p)) / (2.0 * FD_H);
            acc_w.push(grads.weight.data[e], fd);
        }
        for j in 0..c_out {
            let mut up = params.bias.clone();
            up[j] += FD_H;
            let mut dn = params.bias.clone();
            dn[j] -= FD_H;
            let up_p = DenseParams {
                weight: params.weight.clone(),
                bias: up,
            };
            let dn_p = DenseParams {
                weight: params.weight.clone(),
                bias: dn,
            };
            let fd = (loss(&x, &up_p) - loss(&x, &dn_p)) / (2.0 * FD_H);
            acc_b.push(grads.bias[j], fd);
        }
        for e in 0..x.data.len() {
            let mut up = x.clone();
            up.data[e] += FD_H;
            let mut dn = x.clone();
            dn.data[e] -= FD_H;
            let fd = (loss(&up, &params) - loss(&dn, &params)) / (2.0 * FD_H);
            acc_x.push(grad_x.data[e], fd);
        }
    }
    vec![
        acc_w.result("dense/weight"),
        acc_b.result("dense/bias"),
        acc_x.result("dense/input"),
    ]
}

fn batchnorm_checks(rng: &mut ChaCha8Rng, instances: usize) -> Vec<CheckResult> {
    let c = 5;
    let mut acc_g = Acc::new();
    let mut acc_b = Acc::new();
    let mut acc_x = Acc::new();
    for _ in 0..instances {
        let x = rand_mat(rng, 9, c);
        let mut params = BatchNormParams::zeros(c);
        for g in params.gamma.iter_mut() {
            *g = rng.random_range(0.5..1.5);
        }
        for b in params.beta.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let w_obj = rand_mat(rng, 9, c);
        let loss = |x: &Mat, p: &BatchNormParams| {
            dot(&batchnorm_train_fwd(x, p).unwrap().0, &w_obj)
        };
        let (_, cache) = batchnorm_train_fwd(&x, &params).unwrap();
        let (grad_x, grads) = batchnorm_bwd(&w_obj, &cache, &params);
        for j in 0..c {
            let mut up = params.clone();
            up.gamma[j] += FD_H;
            let mut dn = params.clone();
            dn.gamma[j] -= FD_H;
            acc_g.push(grads.gamma[j], (loss(&x, &up) - loss(&x, &dn)) / (2.0 * FD_H));
            let mut up = params.clone();
            up.beta[j] += FD_H;
            let mut dn = params.clone();
            dn.beta[j] -= FD_H;
            acc_b.push(grads.beta[j], (loss(&x, &up) - loss(&x, &dn)) / (2.0 * FD_H));
        }
        for e in 0..x.data.len() {
            let mut up = x.clone();
            up.data[e] += FD_H;
            let mut dn = x.clone();
            dn.data[e] -= FD_H;
            let fd = (loss(&up, &params) - loss(&dn, &params)) / (2.0 * FD_H);
            acc_x.push(grad_x.data[e], fd);
        }
    }
    vec![
        acc_g.result("batchnorm/gamma"),
        acc_b.result("batchnorm/beta"),
        acc_x.result("batchnorm/input"),
    ]
}

fn pointwise_checks(rng: &mut ChaCha8Rng, instances: usize) -> Vec<CheckResult> {
    let mut acc_relu = Acc::new();
    let mut acc_pool = Acc::new();
    for _ in 0..instances {
        let mut x = rand_mat(rng, 8, 4);
        // Keep probes away from the ReLU kink.
        for v in x.data.iter_mut() {
            if v.abs() < 0.05 {
                *v += 0.1_f64.copysign(*v + 1e-12);
            }
        }
        let w_obj = rand_mat(rng, 8, 4);
        let grad_x = relu_bwd(&x, &w_obj);
        for e in 0..x.data.len() {
            let mut up = x.clone();
            up.data[e] += FD_H;
            let mut dn = x.clone();
            dn.data[e] -= FD_H;
            let fd = (dot(&relu_fwd(&up), &w_obj) - dot(&relu_fwd(&dn), &w_obj)) / (2.0 * FD_H);
            acc_relu.push(grad_x.data[e], fd);
        }
        let w_pool = rand_mat(rng, 1, 4);
        let grad_pool = global_avg_pool_bwd(&w_pool, x.rows);
        for e in 0..x.data.len() {
            let mut up = x.clone();
            up.data[e] += FD_H;
            let mut dn = x.clone();
            dn.data[e] -= FD_H;
            let fd = (dot(&global_avg_pool_fwd(&up), &w_pool)
                - dot(&global_avg_pool_fwd(&dn), &w_pool))
                / (2.0 * FD_H);
            acc_pool.push(grad_pool.data[e], fd);
        }
    }
    vec![
        acc_relu.result("relu/input"),
        acc_pool.result("global_avg_pool/input"),
    ]
}

fn loss_checks(rng: &mut ChaCha8Rng, instances: usize) -> Vec<CheckResult> {
    let k = 5;
    let mut acc_x = Acc::new();
    let mut acc_e = Acc::new();
    for _ in 0..instances {
        let labels: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
        let mut x: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
        // |y - x| is non-differentiable at zero residual.
        for (xi, y) in x.iter_mut().zip(&labels) {
            if (*y - *xi).abs() < 1e-3 {
                *xi += 0.01;
            }
        }
        let e_raw: Vec<f64> = (0..4 * k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (_, grad_x, grad_e) = frame_loss(&x, &e_raw, &labels).unwrap();
        let total =
            |x: &[f64], e: &[f64]| frame_loss(x, e, &labels).unwrap().0.total;
        for i in 0..k {
            let mut up = x.clone();
            up[i] += FD_H;
            let mut dn = x.clone();
            dn[i] -= FD_H;
            acc_x.push(grad_x[i], (total(&up, &e_raw) - total(&dn, &e_raw)) / (2.0 * FD_H));
        }
        for i in 0..4 * k {
            let mut up = e_raw.clone();
            up[i] += FD_H;
            let mut dn = e_raw.clone();
            dn[i] -= FD_H;
            acc_e.push(grad_e[i], (total(&x, &up) - total(&x, &dn)) / (2.0 * FD_H));
        }
    }
    vec![
        acc_x.result("loss/mae_control"),
        acc_e.result("loss/evidential_raw"),
    ]
}

/// Run every gradient check; `instances` scales the number of probed
/// points per check.
pub fn gradcheck_all(seed: u64, instances: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.extend(conv_checks(&mut rng, instances));
    out.extend(dense_checks(&mut rng, instances));
    out.extend(batchnorm_checks(&mut rng, instances));
    out.extend(pointwise_checks(&mut rng, instances));
    out.extend(loss_checks(&mut rng, instances.max(8)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_stock_build() {
        let results = gradcheck_all(11, 2);
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.passed(), "{}: max rel err {:e}", r.name, r.max_rel_err);
            assert!(r.points > 0);
        }
    }

    #[test]
    fn injected_sign_bug_is_caught() {
        // A flipped analytic gradient must fail the comparison.
        let mut acc = Acc::new();
        acc.push(1.0, -1.0);
        let r = acc.result("mutant");
        assert!(!r.passed());
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(rel_err(2.0, 2.0), 0.0);
        assert!(rel_err(2.0, 2.1) > 0.03);
    }
}
