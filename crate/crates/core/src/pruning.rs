//! Token importance: the aggregation-derived teacher, the student head distilled from it,
//! and the inference-time score and top-ρ selection.

use crate::aggregation::Mlp;
use crate::error::{domain, shape_err, Result};
use crate::numerics::{l2_norm, lse_unchecked, min_max_normalize, Matrix, SeededRng};
use crate::sinkhorn::TransportPlan;
use crate::tape::{Tape, Var};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_SCORE_EPS: f64 = 1e-8;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Student importance predictor: token width → 1 logit.
pub type StudentParams<T = Matrix> = Mlp<T>;

pub fn init_student(width: usize, hidden: usize, rng: &mut SeededRng) -> StudentParams {
    Mlp::init(width, hidden, 1, rng)
}

/// `I_i = Σ_j w_{τ(j)} P_ij` over real clusters.
pub fn teacher_importance(plan: &TransportPlan, weights: &[f64], tau: &[usize]) -> Result<Vec<f64>> {
    if tau.len() != plan.clusters() {
        return shape_err("teacher_importance", plan.clusters(), tau.len());
    }
    let cw: Vec<f64> = tau.iter().map(|&t| weights[t]).collect();
    crate::sinkhorn::absorbed_token_mass(plan, &cw)
}

fn log_softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    let lse = lse_unchecked(&scaled);
    scaled.into_iter().map(|x| x - lse).collect()
}

/// `T² · (1/N) · KL(softmax(I/T) ‖ softmax(z/T))`.
pub fn distill_loss(teacher: &[f64], student: &[f64], temperature: f64) -> Result<f64> {
    if teacher.len() != student.len() {
        return shape_err("distill_loss", teacher.len(), student.len());
    }
    if teacher.is_empty() {
        return domain("distill_loss on zero tokens");
    }
    if !(temperature > 0.0) {
        return domain(format!("temperature must be positive, got {temperature}"));
    }
    Ok(distill_value_and_grad(teacher, student, temperature).0)
}

fn distill_value_and_grad(teacher: &[f64], student: &[f64], t: f64) -> (f64, Vec<f64>) {
    let n = teacher.len() as f64;
    let lt = log_softmax(teacher, t);
    let ls = log_softmax(student, t);
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(teacher.len());
    for (a, b) in lt.iter().zip(&ls) {
        let pt = a.exp();
        if pt > 0.0 {
            kl += pt * (a - b);
        }
        grad.push(t / n * (b.exp() - pt));
    }
    // Rounding can leave a tiny negative for identical distributions.
    (t * t / n * kl.max(0.0), grad)
}

/// Distillation loss on the tape; the teacher is a constant, so gradient reaches only `student`.
pub fn distill_tape(tape: &mut Tape<'_>, student: Var, teacher: &[f64], temperature: f64) -> Var {
    let z = tape.value(student).data().to_vec();
    let (loss, grad) = distill_value_and_grad(teacher, &z, temperature);
    tape.custom(&[(student, Matrix::row_vector(grad))], Matrix::filled(1, 1, loss))
}

/// `ẑ_i = κ·minmax(z)_i + (1−κ)·‖x_i‖₂`. With `normalize_norms` the norm term is min-max
/// scaled as well.
pub fn prune_scores(
    logits: &[f64],
    tokens: &Matrix,
    kappa: f64,
    eps: f64,
    normalize_norms: bool,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&kappa) {
        return domain(format!("kappa must lie in [0, 1], got {kappa}"));
    }
    if logits.len() != tokens.rows() {
        return shape_err("prune_scores", tokens.rows(), logits.len());
    }
    let learned = min_max_normalize(logits, eps);
    let mut norms: Vec<f64> = (0..tokens.rows()).map(|i| l2_norm(tokens.row(i))).collect();
    if normalize_norms {
        norms = min_max_normalize(&norms, eps);
    }
    Ok(learned
        .iter()
        .zip(&norms)
        .map(|(l, n)| kappa * l + (1.0 - kappa) * n)
        .collect())
}

pub fn kept_count(rho: f64, n0: usize) -> usize {
    ((rho * n0 as f64).ceil() as usize).clamp(1, n0)
}

pub fn validate_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        domain(format!("retention ratio must lie in (0, 1], got {rho}"))
    }
}

/// Indices of the `⌈ρ·n0⌉` highest scores, ties to the lower index, returned ascending.
pub fn select_topk(scores: &[f64], rho: f64, n0: usize) -> Result<Vec<usize>> {
    validate_rho(rho)?;
    if scores.len() != n0 {
        return shape_err("select_topk", n0, scores.len());
    }
    let k = kept_count(rho, n0);
    let mut order: Vec<usize> = (0..n0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    pub scores: Vec<f64>,
    pub rho: f64,
    /// Ascending positions among the patch tokens that entered the hook.
    pub kept: Vec<usize>,
    pub kappa: f64,
}

/// How the hook chooses which tokens survive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selector {
    /// Student logits mixed with token norms.
    Learned,
    /// Uniformly random subset of the same size; the seed is mixed with the image index.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSettings {
    pub rho: f64,
    pub kappa: f64,
    pub eps: f64,
    /// Encoder block after which the hook fires (1-based).
    pub layer: usize,
    pub normalize_norms: bool,
    pub selector: Selector,
}

impl PruneSettings {
    pub fn new(rho: f64, layer: usize) -> Self {
        Self {
            rho,
            kappa: DEFAULT_KAPPA,
            eps: DEFAULT_SCORE_EPS,
            layer,
            normalize_norms: false,
            selector: Selector::Learned,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        validate_rho(self.rho)?;
        if !(0.0..=1.0).contains(&self.kappa) {
            return domain(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if self.layer == 0 || self.layer >= depth {
            return domain(format!(
                "prune layer must lie in [1, {}), got {}",
                depth, self.layer
            ));
        }
        Ok(())
    }

    /// Decision for one image given the student logits and the hook-layer patch tokens.
    pub fn decide(&self, logits: &[f64], tokens: &Matrix, image_key: u64) -> Result<PruneDecision> {
        let n0 = tokens.rows();
        let scores = prune_scores(logits, tokens, self.kappa, self.eps, self.normalize_norms)?;
        let kept = match self.selector {
            Selector::Learned => select_topk(&scores, self.rho, n0)?,
            Selector::Random { seed } => {
                validate_rho(self.rho)?;
                let mut rng = SeededRng::new(seed).split(image_key);
                let mut kept = rng.sample_indices(n0, kept_count(self.rho, n0));
                kept.sort_unstable();
                kept
            }
        };
        Ok(PruneDecision {
            scores,
            rho: self.rho,
            kept,
            kappa: self.kappa,
        })
    }
}
