//! Sparse convolution executed as per-offset gather -> GEMM ->
//! scatter-add, the naive per-pair reference it is checked against, and
//! the hand-derived backward pass. The pair-list core is shared with the
//! dense 2D map-branch convolution, which uses the same structure over
//! grid pixels.

use thiserror::Error;

use crate::sparse::{KernelMap, OffsetPairs};

use super::mat::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Mat};

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("feature channels {got} do not match layer input channels {expected}")]
    Channels { got: usize, expected: usize },
    #[error("kernel map offset count {got} does not match weight count {expected}")]
    Offsets { got: usize, expected: usize },
}

/// Set of active voxel sites with per-site feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub coords: Vec<[i32; 3]>,
    pub features: Mat,
}

impl SparseTensor {
    pub fn new(coords: Vec<[i32; 3]>, features: Mat) -> Self {
        assert_eq!(coords.len(), features.rows, "row count must match sites");
        Self { coords, features }
    }

    pub fn num_sites(&self) -> usize {
        self.coords.len()
    }
}

/// Per-offset weight blocks (each C_in x C_out) plus a shared bias.
/// Also used as the gradient container for its own backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Vec<Mat>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(num_offsets: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            weights: (0..num_offsets).map(|_| Mat::zeros(c_in, c_out)).collect(),
            bias: vec![0.0; c_out],
        }
    }

    pub fn c_in(&self) -> usize {
        self.weights[0].rows
    }

    pub fn c_out(&self) -> usize {
        self.weights[0].cols
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() * self.c_in() * self.c_out() + self.bias.len()
    }
}

/// Copy the rows selected by `pairs` (input side) into a contiguous
/// matrix, one row per pair in canonical pair order.
pub fn gather_inputs(features: &Mat, pairs: &[(u32, u32)]) -> Mat {
    let mut out = Mat::zeros(pairs.len(), features.cols);
    for (j, &(i, _)) in pairs.iter().enumerate() {
        out.row_mut(j).copy_from_slice(features.row(i as usize));
    }
    out
}

fn gather_outputs(features: &Mat, pairs: &[(u32, u32)]) -> Mat {
    let mut out = Mat::zeros(pairs.len(), features.cols);
    for (j, &(_, o)) in pairs.iter().enumerate() {
        out.row_mut(j).copy_from_slice(features.row(o as usize));
    }
    out
}

fn scatter_add_outputs(acc: &mut Mat, rows: &Mat, pairs: &[(u32, u32)]) {
    for (j, &(_, o)) in pairs.iter().enumerate() {
        let dst = acc.row_mut(o as usize);
        for (d, s) in dst.iter_mut().zip(rows.row(j)) {
            *d += s;
        }
    }
}

fn scatter_add_inputs(acc: &mut Mat, rows: &Mat, pairs: &[(u32, u32)]) {
    for (j, &(i, _)) in pairs.iter().enumerate() {
        let dst = acc.row_mut(i as usize);
        for (d, s) in dst.iter_mut().zip(rows.row(j)) {
            *d += s;
        }
    }
}

fn check_shapes(
    features: &Mat,
    offsets: &[OffsetPairs],
    params: &ConvParams,
) -> Result<(), ShapeError> {
    if features.cols != params.c_in() {
        return Err(ShapeError::Channels {
            got: features.cols,
            expected: params.c_in(),
        });
    }
    if offsets.len() != params.weights.len() {
        return Err(ShapeError::Offsets {
            got: offsets.len(),
            expected: params.weights.len(),
        });
    }
    Ok(())
}

/// out[o] = bias + sum over offsets and pairs of features[i] * W[delta].
/// Offsets are processed in canonical order so accumulation is
/// deterministic.
pub fn conv_forward(
    features: &Mat,
    offsets: &[OffsetPairs],
    params: &ConvParams,
    n_out: usize,
) -> Result<Mat, ShapeError> {
    check_shapes(features, offsets, params)?;
    let c_out = params.c_out();
    let mut out = Mat::zeros(n_out, c_out);
    for o in 0..n_out {
        out.row_mut(o).copy_from_slice(&params.bias);
    }
    for (off, w) in offsets.iter().zip(&params.weights) {
        if off.pairs.is_empty() {
            continue;
        }
        let gathered = gather_inputs(features, &off.pairs);
        let mut product = Mat::zeros(gathered.rows, c_out);
        gemm_acc(&mut product, &gathered, w);
        scatter_add_outputs(&mut out, &product, &off.pairs);
    }
    Ok(out)
}

/// Same contract as [`conv_forward`], computed pair-by-pair with no
/// gather or GEMM. Kept as the mutual correctness oracle and the
/// baseline side of the kernel benchmark.
pub fn conv_naive(
    features: &Mat,
    offsets: &[OffsetPairs],
    params: &ConvParams,
    n_out: usize,
) -> Result<Mat, ShapeError> {
    check_shapes(features, offsets, params)?;
    let (c_in, c_out) = (params.c_in(), params.c_out());
    let mut out = Mat::zeros(n_out, c_out);
    for o in 0..n_out {
        out.row_mut(o).copy_from_slice(&params.bias);
    }
    for (off, w) in offsets.iter().zip(&params.weights) {
        for &(i, o) in &off.pairs {
            for ci in 0..c_in {
                let x = features.at(i as usize, ci);
                for co in 0..c_out {
                    *out.at_mut(o as usize, co) += x * w.at(ci, co);
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv_forward`]: feature gradients flow through
/// the transposed pair map, weight gradients through gathered
/// input/output row products.
pub fn conv_backward(
    grad_out: &Mat,
    input: &Mat,
    offsets: &[OffsetPairs],
    params: &ConvParams,
) -> Result<(Mat, ConvParams), ShapeError> {
    check_shapes(input, offsets, params)?;
    let mut grad_in = Mat::zeros(input.rows, input.cols);
    let mut grads = ConvParams::zeros(params.weights.len(), params.c_in(), params.c_out());
    for o in 0..grad_out.rows {
        for (gb, g) in grads.bias.iter_mut().zip(grad_out.row(o)) {
            *gb += g;
        }
    }
    for ((off, w), gw) in offsets.iter().zip(&params.weights).zip(&mut grads.weights) {
        if off.pairs.is_empty() {
            continue;
        }
        let gathered_in = gather_inputs(input, &off.pairs);
        let gathered_grad = gather_outputs(grad_out, &off.pairs);
        gemm_tn_acc(gw, &gathered_in, &gathered_grad);
        let mut grad_rows = Mat::zeros(off.pairs.len(), input.cols);
        gemm_nt_acc(&mut grad_rows, &gathered_grad, w);
        scatter_add_inputs(&mut grad_in, &grad_rows, &off.pairs);
    }
    Ok((grad_in, grads))
}

/// Convenience wrapper applying [`conv_forward`] to a [`SparseTensor`]
/// through a [`KernelMap`].
pub fn sparse_conv_forward(
    t: &SparseTensor,
    km: &KernelMap,
    params: &ConvParams,
) -> Result<SparseTensor, ShapeError> {
    let features = conv_forward(&t.features, &km.offsets, params, km.out_coords.len())?;
    Ok(SparseTensor::new(km.out_coords.clone(), features))
}

/// Pair lists for a dense 2D grid convolution (kernel 3, padding 1),
/// reusing the sparse execution path. Pixels are indexed row-major.
pub fn grid_pairs_2d(h: usize, w: usize, stride: usize) -> Vec<OffsetPairs> {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut offsets = Vec::with_capacity(9);
    for dr in -1i32..=1 {
        for dc in -1i32..=1 {
            let mut pairs = Vec::new();
            for orow in 0..oh {
                for ocol in 0..ow {
                    let ir = orow as i32 * stride as i32 + dr;
                    let ic = ocol as i32 * stride as i32 + dc;
                    if ir >= 0 && ir < h as i32 && ic >= 0 && ic < w as i32 {
                        pairs.push((
                            (ir as usize * w + ic as usize) as u32,
                            (orow * ow + ocol) as u32,
                        ));
                    }
                }
            }
            offsets.push(OffsetPairs {
                delta: [dr, dc, 0],
                pairs,
            });
        }
    }
    offsets
}
