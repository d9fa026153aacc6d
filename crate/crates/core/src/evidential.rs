//! Evidential regression head: Normal-Inverse-Gamma parameterization,
//! its negative log-likelihood and evidence regularizer, the combined
//! training loss, and hand-derived gradients back to the raw head
//! outputs.

use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvidentialError {
    #[error("evidential output length {got} is not 4 x label count {labels}")]
    EvidentialLength { got: usize, labels: usize },
    #[error("control output length {got} does not match label count {labels}")]
    ControlLength { got: usize, labels: usize },
}

/// Weight on the deterministic-head absolute error inside the combined
/// loss.
pub const MAE_WEIGHT: f64 = 1000.0;
/// Scale-factor width: small-magnitude labels (straight driving) count
/// nearly double.
pub const SCALE_SIGMA: f64 = 1.0 / 15.0;
const CONSTRAIN_EPS: f64 = 1e-6;

/// Constrained NIG parameters for one lookahead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nig {
    pub gamma: f64,
    pub upsilon: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map raw head outputs (gamma, upsilon, alpha, beta order) onto the
/// valid NIG domain: upsilon > 0, alpha > 1, beta > 0.
pub fn constrain(raw: [f64; 4]) -> Nig {
    Nig {
        gamma: raw[0],
        upsilon: softplus(raw[1]) + CONSTRAIN_EPS,
        alpha: softplus(raw[2]) + 1.0 + CONSTRAIN_EPS,
        beta: softplus(raw[3]) + CONSTRAIN_EPS,
    }
}

/// NIG negative log-likelihood of label `y` (the Student-t marginal).
pub fn nll_loss(y: f64, p: &Nig) -> f64 {
    let omega = 2.0 * p.beta * (1.0 + p.upsilon);
    let r = y - p.gamma;
    let s = r * r * p.upsilon + omega;
    0.5 * (std::f64::consts::PI / p.upsilon).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * s.ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5)
}

/// Evidence regularizer: absolute error scaled by total evidence.
pub fn reg_loss(y: f64, p: &Nig) -> f64 {
    (y - p.gamma).abs() * (2.0 * p.alpha + p.upsilon)
}

/// Per-label weight emphasizing near-zero curvature labels; ranges over
/// (1, 2].
pub fn scale_factor(y: f64) -> f64 {
    1.0 + (-y * y / (2.0 * SCALE_SIGMA * SCALE_SIGMA)).exp()
}

/// Epistemic variance of the NIG prediction, beta / (upsilon (alpha-1)).
pub fn epistemic_variance(p: &Nig) -> f64 {
    debug_assert!(p.alpha > 1.0 && p.upsilon > 0.0);
    p.beta / (p.upsilon * (p.alpha - 1.0))
}

/// d(NLL)/d(gamma, upsilon, alpha, beta) at constrained parameters.
pub fn nll_grad(y: f64, p: &Nig) -> [f64; 4] {
    let omega = 2.0 * p.beta * (1.0 + p.upsilon);
    let r = y - p.gamma;
    let s = r * r * p.upsilon + omega;
    let a_half = p.alpha + 0.5;
    [
        a_half * (-2.0 * r * p.upsilon) / s,
        -0.5 / p.upsilon - p.alpha * 2.0 * p.beta / omega + a_half * (r * r + 2.0 * p.beta) / s,
        -omega.ln() + s.ln() + digamma(p.alpha) - digamma(a_half),
        -p.alpha / p.beta + a_half * 2.0 * (1.0 + p.upsilon) / s,
    ]
}

/// d(reg)/d(gamma, upsilon, alpha, beta).
pub fn reg_grad(y: f64, p: &Nig) -> [f64; 4] {
    let r = y - p.gamma;
    [
        -r.signum() * (2.0 * p.alpha + p.upsilon),
        r.abs(),
        2.0 * r.abs(),
        0.0,
    ]
}

/// Loss breakdown for one frame, each term already scale-weighted and
/// summed over the K lookaheads.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mae: f64,
    pub nll: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn add_assign(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.mae += o.mae;
        self.nll += o.nll;
        self.reg += o.reg;
    }

    pub fn scale(&mut self, f: f64) {
        self.total *= f;
        self.mae *= f;
        self.nll *= f;
        self.reg *= f;
    }
}

/// Combined loss over a frame's outputs, with gradients w.r.t. the raw
/// deterministic controls `x` and raw evidential outputs `e_raw`
/// (k-major gamma/upsilon/alpha/beta groups; pass an empty slice for
/// deterministic-only models).
pub fn frame_loss(
    x: &[f64],
    e_raw: &[f64],
    labels: &[f64],
) -> Result<(LossTerms, Vec<f64>, Vec<f64>), EvidentialError> {
    let k = labels.len();
    if x.len() != k {
        return Err(EvidentialError::ControlLength {
            got: x.len(),
            labels: k,
        });
    }
    let hybrid = !e_raw.is_empty();
    if hybrid && e_raw.len() != 4 * k {
        return Err(EvidentialError::EvidentialLength {
            got: e_raw.len(),
            labels: k,
        });
    }
    let mut terms = LossTerms::default();
    let mut grad_x = vec![0.0; k];
    let mut grad_e = vec![0.0; e_raw.len()];
    for j in 0..k {
        let y = labels[j];
        let scale = scale_factor(y);
        let err = y - x[j];
        terms.mae += scale * MAE_WEIGHT * err.abs();
        grad_x[j] = scale * MAE_WEIGHT * -err.signum();
        if hybrid {
            let raw: [f64; 4] = e_raw[4 * j..4 * j + 4].try_into().unwrap();
            let p = constrain(raw);
            terms.nll += scale * nll_loss(y, &p);
            terms.reg += scale * reg_loss(y, &p);
            let gn = nll_grad(y, &p);
            let gr = reg_grad(y, &p);
            // Chain rule through the constraint transforms.
            let jac = [1.0, sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])];
            for i in 0..4 {
                grad_e[4 * j + i] = scale * (gn[i] + gr[i]) * jac[i];
            }
        }
    }
    terms.total = terms.mae + terms.nll + terms.reg;
    Ok((terms, grad_x, grad_e))
}
