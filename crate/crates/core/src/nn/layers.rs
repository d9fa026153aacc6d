//! Standard layers with hand-derived backward passes: batch norm, ReLU,
//! dense, global average pooling. All operate on row matrices
//! (rows = sites or pixels, cols = channels).

use thiserror::Error;

use super::mat::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Mat};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("batch norm on an empty tensor")]
    EmptyBatch,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Gradient container: running stats unused.
    pub fn zeros(channels: usize) -> Self {
        Self {
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![0.0; channels],
        }
    }
}

pub struct BnCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode forward using batch statistics. Pure: running stats
/// are updated separately via [`update_running_stats`] so gradient
/// computation can run in parallel against an immutable model.
pub fn batchnorm_train_fwd(x: &Mat, p: &BatchNormParams) -> Result<(Mat, BnCache), LayerError> {
    if x.rows == 0 {
        return Err(LayerError::EmptyBatch);
    }
    let (n, c) = (x.rows, x.cols);
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            let d = x.at(i, j) - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Mat::zeros(n, c);
    let mut y = Mat::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let xh = (x.at(i, j) - mean[j]) * inv_std[j];
            *xhat.at_mut(i, j) = xh;
            *y.at_mut(i, j) = p.gamma[j] * xh + p.beta[j];
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Fold one batch's statistics into the running estimates with momentum
/// 0.9.
pub fn update_running_stats(p: &mut BatchNormParams, mean: &[f64], var: &[f64]) {
    for j in 0..p.running_mean.len() {
        p.running_mean[j] = BN_MOMENTUM * p.running_mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
        p.running_var[j] = BN_MOMENTUM * p.running_var[j] + (1.0 - BN_MOMENTUM) * var[j];
    }
}

/// Inference-mode forward using running statistics.
pub fn batchnorm_infer_fwd(x: &Mat, p: &BatchNormParams) -> Result<Mat, LayerError> {
    if x.rows == 0 {
        return Err(LayerError::EmptyBatch);
    }
    let mut y = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        for j in 0..x.cols {
            let inv = 1.0 / (p.running_var[j] + BN_EPS).sqrt();
            *y.at_mut(i, j) = p.gamma[j] * (x.at(i, j) - p.running_mean[j]) * inv + p.beta[j];
        }
    }
    Ok(y)
}

/// Backward through the batch-statistics normalization.
pub fn batchnorm_bwd(
    grad_y: &Mat,
    cache: &BnCache,
    p: &BatchNormParams,
) -> (Mat, BatchNormParams) {
    let (n, c) = (grad_y.rows, grad_y.cols);
    let nf = n as f64;
    let mut grads = BatchNormParams::zeros(c);
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            let dy = grad_y.at(i, j);
            grads.beta[j] += dy;
            grads.gamma[j] += dy * cache.xhat.at(i, j);
            let dxhat = dy * p.gamma[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * cache.xhat.at(i, j);
        }
    }
    let mut grad_x = Mat::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let dxhat = grad_y.at(i, j) * p.gamma[j];
            *grad_x.at_mut(i, j) = cache.inv_std[j] / nf
                * (nf * dxhat - sum_dxhat[j] - cache.xhat.at(i, j) * sum_dxhat_xhat[j]);
        }
    }
    (grad_x, grads)
}

pub fn relu_fwd(x: &Mat) -> Mat {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn relu_bwd(x: &Mat, grad_y: &Mat) -> Mat {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&grad_y.data)
            .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// C_in x C_out.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Mat::zeros(c_in, c_out),
            bias: vec![0.0; c_out],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

pub fn dense_fwd(x: &Mat, p: &DenseParams) -> Mat {
    let mut y = Mat::zeros(x.rows, p.weight.cols);
    for i in 0..x.rows {
        y.row_mut(i).copy_from_slice(&p.bias);
    }
    gemm_acc(&mut y, x, &p.weight);
    y
}

pub fn dense_bwd(grad_y: &Mat, x: &Mat, p: &DenseParams) -> (Mat, DenseParams) {
    let mut grads = DenseParams::zeros(p.weight.rows, p.weight.cols);
    gemm_tn_acc(&mut grads.weight, x, grad_y);
    for i in 0..grad_y.rows {
        for (gb, g) in grads.bias.iter_mut().zip(grad_y.row(i)) {
            *gb += g;
        }
    }
    let mut grad_x = Mat::zeros(x.rows, x.cols);
    gemm_nt_acc(&mut grad_x, grad_y, &p.weight);
    (grad_x, grads)
}

/// Mean over rows; output is 1 x C.
pub fn global_avg_pool_fwd(x: &Mat) -> Mat {
    let mut y = Mat::zeros(1, x.cols);
    for i in 0..x.rows {
        for (acc, v) in y.data.iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    if x.rows > 0 {
        for v in &mut y.data {
            *v /= x.rows as f64;
        }
    }
    y
}

pub fn global_avg_pool_bwd(grad_y: &Mat, n_rows: usize) -> Mat {
    let mut grad_x = Mat::zeros(n_rows, grad_y.cols);
    let scale = 1.0 / n_rows as f64;
    for i in 0..n_rows {
        for (g, d) in grad_x.row_mut(i).iter_mut().zip(&grad_y.data) {
            *g = d * scale;
        }
    }
    grad_x
}
