//! Retrieval and combined training losses.

use crate::error::{domain, shape_err, Result};
use crate::numerics::{dot, l2_norm, lse_unchecked};

/// Multi-similarity loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Similarity margin λ.
    pub margin: f64,
    /// Hard-pair mining with a 0.1 slack. Off by default: every in-batch pair is used.
    pub mining: bool,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 20.0,
            margin: 0.0,
            mining: false,
        }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return domain("ms loss alpha and beta must be positive");
        }
        if !self.margin.is_finite() {
            return domain("ms loss margin must be finite");
        }
        Ok(())
    }
}

const MINING_SLACK: f64 = 0.1;
const UNIT_TOL: f64 = 1e-9;

pub fn ms_loss(descriptors: &[Vec<f64>], labels: &[usize], cfg: &MsLossConfig) -> Result<f64> {
    ms_loss_grad(descriptors, labels, cfg).map(|(l, _)| l)
}

/// Loss and its gradient with respect to each descriptor.
///
/// `(1/B) Σ_i [ (1/α)·log(1 + Σ_{p∈P_i} e^{−α(s_ip−λ)}) + (1/β)·log(1 + Σ_{n∈N_i} e^{β(s_in−λ)}) ]`
/// with `s` the cosine similarity, positives sharing the anchor's label.
pub fn ms_loss_grad(
    descriptors: &[Vec<f64>],
    labels: &[usize],
    cfg: &MsLossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let b = descriptors.len();
    if b == 0 {
        return domain("ms loss needs at least one anchor");
    }
    if labels.len() != b {
        return shape_err("ms_loss", b, labels.len());
    }
    let d = descriptors[0].len();
    for g in descriptors {
        if g.len() != d {
            return shape_err("ms_loss", d, g.len());
        }
        if (l2_norm(g) - 1.0).abs() > UNIT_TOL {
            return domain("ms loss expects unit-norm descriptors");
        }
    }
    let sim: Vec<Vec<f64>> = descriptors
        .iter()
        .map(|a| descriptors.iter().map(|c| dot(a, c)).collect())
        .collect();
    let (alpha, beta, lambda) = (cfg.alpha, cfg.beta, cfg.margin);
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut coef = vec![vec![0.0; b]; b];
    for i in 0..b {
        let mut pos: Vec<usize> = (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
        let mut neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
        if cfg.mining {
            let min_pos = pos.iter().map(|&k| sim[i][k]).fold(f64::INFINITY, f64::min);
            let max_neg = neg.iter().map(|&k| sim[i][k]).fold(f64::NEG_INFINITY, f64::max);
            neg.retain(|&k| sim[i][k] + MINING_SLACK > min_pos);
            pos.retain(|&k| sim[i][k] - MINING_SLACK < max_neg);
        }
        if !pos.is_empty() {
            let mut xs = vec![0.0];
            xs.extend(pos.iter().map(|&k| -alpha * (sim[i][k] - lambda)));
            let lse = lse_unchecked(&xs);
            loss += lse / alpha;
            for (&k, x) in pos.iter().zip(&xs[1..]) {
                coef[i][k] -= inv_b * (x - lse).exp();
            }
        }
        if !neg.is_empty() {
            let mut xs = vec![0.0];
            xs.extend(neg.iter().map(|&k| beta * (sim[i][k] - lambda)));
            let lse = lse_unchecked(&xs);
            loss += lse / beta;
            for (&k, x) in neg.iter().zip(&xs[1..]) {
                coef[i][k] += inv_b * (x - lse).exp();
            }
        }
    }
    let mut grads = vec![vec![0.0; d]; b];
    for i in 0..b {
        for k in 0..b {
            let c = coef[i][k];
            if c == 0.0 {
                continue;
            }
            for t in 0..d {
                grads[i][t] += c * descriptors[k][t];
                grads[k][t] += c * descriptors[i][t];
            }
        }
    }
    Ok((loss * inv_b, grads))
}

/// `retr + γ·distill`.
pub fn total_loss(retr: f64, distill: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return domain(format!("gamma must be non-negative, got {gamma}"));
    }
    Ok(retr + gamma * distill)
}
