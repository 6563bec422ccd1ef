//! Weighted optimal-transport aggregation.
//!
//! Tokens are reduced by `f1`, the CLS token by `f2`, and `f_s` scores reduced tokens
//! against the clusters. After the transport plan is solved, clusters are ranked by the mass
//! they receive from real tokens (minus a ghost penalty), split into fixed-size tiers, and
//! each cluster's aggregate is scaled by its tier's weight. Tier weights are parameterized
//! so that they can never increase from one tier to the next.

use crate::encoder::TokenSet;
use crate::error::{domain, shape_err, Result};
use crate::numerics::{l2_norm, sigmoid, softplus, Matrix, SeededRng};
use crate::sinkhorn::TransportPlan;
use crate::tape::{Tape, Var};

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-3;
pub const DEFAULT_GHOST_PENALTY: f64 = 0.5;
pub const PAPER_TIER_SIZES: [usize; 4] = [24, 20, 16, 4];

/// Two-layer perceptron `x ↦ relu(x·W1 + b1)·W2 + b2`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl Mlp<Matrix> {
    /// He-initialized weights, zero biases.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut SeededRng) -> Self {
        Self {
            w1: Matrix::randn(input, hidden, (2.0 / input as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(hidden, output, (1.0 / hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return shape_err("Mlp::forward", self.input_dim(), x.cols());
        }
        let mut h = x.matmul_unchecked(&self.w1);
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(self.b1.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut out = h.matmul_unchecked(&self.w2);
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(self.b2.data()) {
                *v += b;
            }
        }
        Ok(out)
    }
}

impl<T> Mlp<T> {
    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> Mlp<U> {
        Mlp {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(&str, &'s mut T)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

impl Mlp<Var> {
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = tape.matmul(x, self.w1);
        let h = tape.add_row(h, self.b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, self.w2);
        tape.add_row(o, self.b2)
    }
}

/// Learnable state of the aggregation head.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams<T = Matrix> {
    /// Token reduction, `d_enc → d_low`.
    pub f1: Mlp<T>,
    /// CLS reduction, `d_enc → d_cls`.
    pub f2: Mlp<T>,
    /// Score head, `d_low → M`.
    pub fs: Mlp<T>,
    /// Shared dustbin/ghost score, 1×1.
    pub dustbin: T,
    /// 1×1.
    pub theta0: T,
    /// 1×(T−1).
    pub theta_delta: T,
}

impl<T> AggregatorParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> AggregatorParams<U> {
        AggregatorParams {
            f1: self.f1.map(&format!("{prefix}.f1"), f),
            f2: self.f2.map(&format!("{prefix}.f2"), f),
            fs: self.fs.map(&format!("{prefix}.fs"), f),
            dustbin: f(&format!("{prefix}.dustbin"), &self.dustbin),
            theta0: f(&format!("{prefix}.theta0"), &self.theta0),
            theta_delta: f(&format!("{prefix}.theta_delta"), &self.theta_delta),
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(&str, &'s mut T)) {
        self.f1.visit_mut(&format!("{prefix}.f1"), f);
        self.f2.visit_mut(&format!("{prefix}.f2"), f);
        self.fs.visit_mut(&format!("{prefix}.fs"), f);
        f(&format!("{prefix}.dustbin"), &mut self.dustbin);
        f(&format!("{prefix}.theta0"), &mut self.theta0);
        f(&format!("{prefix}.theta_delta"), &mut self.theta_delta);
    }
}

/// Shapes of the aggregation head.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorConfig {
    pub clusters: usize,
    pub d_low: usize,
    pub d_cls: usize,
    pub hidden: usize,
    pub tiers: TierConfig,
}

impl AggregatorConfig {
    /// 64 clusters, 128-dim cluster descriptors, 256-dim CLS projection.
    pub fn paper() -> Self {
        Self {
            clusters: 64,
            d_low: 128,
            d_cls: 256,
            hidden: DEFAULT_HIDDEN,
            tiers: TierConfig::uniform(&PAPER_TIER_SIZES),
        }
    }

    pub fn descriptor_len(&self) -> usize {
        self.clusters * self.d_low + self.d_cls
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.d_low == 0 || self.d_cls == 0 || self.hidden == 0 {
            return domain("aggregator dimensions must be positive");
        }
        self.tiers.validate(self.clusters)
    }
}

impl AggregatorParams<Matrix> {
    pub fn init(d_enc: usize, cfg: &AggregatorConfig, rng: &mut SeededRng) -> Self {
        Self {
            f1: Mlp::init(d_enc, cfg.hidden, cfg.d_low, rng),
            f2: Mlp::init(d_enc, cfg.hidden, cfg.d_cls, rng),
            fs: Mlp::init(cfg.d_low, cfg.hidden, cfg.clusters, rng),
            dustbin: Matrix::filled(1, 1, 1.0),
            theta0: Matrix::filled(1, 1, cfg.tiers.theta0),
            theta_delta: Matrix::row_vector(cfg.tiers.theta_delta.clone()),
        }
    }
}

/// Tier sizes, raw weight parameters, floor and ghost penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct TierConfig {
    pub sizes: Vec<usize>,
    pub theta0: f64,
    pub theta_delta: Vec<f64>,
    pub floor: f64,
    pub ghost_penalty: f64,
}

impl TierConfig {
    /// `exp(θ₀) = 1` with equal decrements of `1/T`, so the initial weights are
    /// `1, 1 − 1/T, …, 1/T`.
    pub fn uniform(sizes: &[usize]) -> Self {
        let t = sizes.len();
        let step = 1.0 / t as f64;
        let delta = inverse_softplus(step);
        Self {
            sizes: sizes.to_vec(),
            theta0: 0.0,
            theta_delta: vec![delta; t.saturating_sub(1)],
            floor: DEFAULT_WEIGHT_FLOOR,
            ghost_penalty: DEFAULT_GHOST_PENALTY,
        }
    }

    pub fn num_tiers(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self, clusters: usize) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.iter().any(|&s| s == 0) {
            return domain("tier sizes must be nonempty and positive");
        }
        let total: usize = self.sizes.iter().sum();
        if total != clusters {
            return domain(format!("tier sizes sum to {total}, expected {clusters} clusters"));
        }
        if self.theta_delta.len() + 1 != self.sizes.len() {
            return domain("need exactly one weight delta per tier after the first");
        }
        if !(self.floor > 0.0) {
            return domain("tier weight floor must be positive");
        }
        if !(self.ghost_penalty >= 0.0) {
            return domain("ghost penalty must be non-negative");
        }
        Ok(())
    }
}

/// `softplus⁻¹(y) = ln(eʸ − 1)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// `w_t = max(exp(θ₀) − Σ_{k≤t} softplus(θ_{Δ,k}), δ)`.
pub fn tier_weights(cfg: &TierConfig) -> Vec<f64> {
    tier_weights_raw(cfg.theta0, &cfg.theta_delta, cfg.floor).0
}

/// Weights plus the per-tier clamp flags.
pub(crate) fn tier_weights_raw(theta0: f64, theta_delta: &[f64], floor: f64) -> (Vec<f64>, Vec<bool>) {
    let mut acc = theta0.exp();
    let mut w = Vec::with_capacity(theta_delta.len() + 1);
    let mut clamped = Vec::with_capacity(theta_delta.len() + 1);
    let mut push = |v: f64| {
        clamped.push(v < floor);
        w.push(v.max(floor));
    };
    push(acc);
    for d in theta_delta {
        acc -= softplus(*d);
        push(acc);
    }
    (w, clamped)
}

/// Tier weights on the tape, 1×T. The clamp passes zero gradient where it is active.
pub fn tier_weights_tape(tape: &mut Tape<'_>, theta0: Var, theta_delta: Var, floor: f64) -> Var {
    let t0 = tape.value(theta0).data()[0];
    let deltas = tape.value(theta_delta).data().to_vec();
    let (w, clamped) = tier_weights_raw(t0, &deltas, floor);
    let tiers = w.len();
    let mut j0 = Matrix::zeros(tiers, 1);
    let mut jd = Matrix::zeros(tiers, deltas.len());
    for t in 0..tiers {
        if clamped[t] {
            continue;
        }
        j0.set(t, 0, t0.exp());
        for k in 0..t {
            jd.set(t, k, -sigmoid(deltas[k]));
        }
    }
    tape.record_discrete(clamped.iter().map(|&c| c as u64));
    tape.custom(&[(theta0, j0), (theta_delta, jd)], Matrix::row_vector(w))
}

/// `α_j = Σ_{i<N} P_ij − λ·P_{ghost, j}` over the real clusters.
pub fn cluster_importance(plan: &TransportPlan, ghost_penalty: f64) -> Vec<f64> {
    cluster_importance_from(&plan.plan, ghost_penalty)
}

pub(crate) fn cluster_importance_from(plan: &Matrix, ghost_penalty: f64) -> Vec<f64> {
    let n = plan.rows() - 1;
    let m = plan.cols() - 1;
    (0..m)
        .map(|j| {
            let real: f64 = (0..n).map(|i| plan.get(i, j)).sum();
            real - ghost_penalty * plan.get(n, j)
        })
        .collect()
}

/// Cluster → tier map: clusters ranked by `α` descending, ties to the lower index.
pub fn assign_tiers(alpha: &[f64], sizes: &[usize]) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if total != alpha.len() {
        return domain(format!(
            "tier sizes sum to {total} but there are {} clusters",
            alpha.len()
        ));
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]));
    let mut tau = vec![0; alpha.len()];
    let mut rank = 0;
    for (tier, &size) in sizes.iter().enumerate() {
        for &cluster in &order[rank..rank + size] {
            tau[cluster] = tier;
        }
        rank += size;
    }
    Ok(tau)
}

/// Per-cluster weights `w_{τ(j)}`.
pub fn cluster_weights(weights: &[f64], tau: &[usize]) -> Vec<f64> {
    tau.iter().map(|&t| weights[t]).collect()
}

/// Concatenated weighted cluster aggregates followed by the CLS projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl GlobalDescriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scales to unit L2 norm. A zero vector is left as is and stays flagged unnormalized.
    pub fn normalize(mut self) -> Self {
        let n = l2_norm(&self.values);
        if n > 0.0 {
            for v in &mut self.values {
                *v /= n;
            }
            self.normalized = true;
        }
        self
    }
}

/// `(f1(x_i))_i` and `f2(x_CLS)`.
pub fn project_tokens(tokens: &TokenSet, params: &AggregatorParams) -> Result<(Matrix, Vec<f64>)> {
    let reduced = params.f1.forward(&tokens.patch)?;
    let cls = params
        .f2
        .forward(&Matrix::row_vector(tokens.cls.clone()))?
        .into_data();
    Ok((reduced, cls))
}

/// `v_j = Σ_i w_{τ(j)} P_ij x̃_i`, concatenated with `x̃_CLS` and L2-normalized.
pub fn assemble_descriptor(
    plan: &TransportPlan,
    reduced: &Matrix,
    cls: &[f64],
    weights: &[f64],
    tau: &[usize],
) -> Result<GlobalDescriptor> {
    assemble_unnormalized(plan, reduced, cls, weights, tau).map(GlobalDescriptor::normalize)
}

/// As [`assemble_descriptor`], without the final normalization.
pub fn assemble_unnormalized(
    plan: &TransportPlan,
    reduced: &Matrix,
    cls: &[f64],
    weights: &[f64],
    tau: &[usize],
) -> Result<GlobalDescriptor> {
    let (n, m) = (plan.tokens(), plan.clusters());
    if reduced.rows() != n {
        return shape_err("assemble_descriptor", format!("{n} reduced tokens"), reduced.rows());
    }
    if tau.len() != m {
        return shape_err("assemble_descriptor", format!("{m} tier assignments"), tau.len());
    }
    if let Some(&bad) = tau.iter().find(|&&t| t >= weights.len()) {
        return domain(format!("tier index {bad} out of range for {} weights", weights.len()));
    }
    let d = reduced.cols();
    let mut values = vec![0.0; m * d + cls.len()];
    for j in 0..m {
        let block = &mut values[j * d..(j + 1) * d];
        for i in 0..n {
            let p = plan.plan.get(i, j);
            for (b, x) in block.iter_mut().zip(reduced.row(i)) {
                *b += p * x;
            }
        }
        let w = weights[tau[j]];
        for b in block.iter_mut() {
            *b *= w;
        }
    }
    values[m * d..].copy_from_slice(cls);
    Ok(GlobalDescriptor {
        values,
        normalized: false,
    })
}

/// Differentiable counterpart of [`assemble_descriptor`]; returns a normalized 1×D row.
pub fn assemble_tape(
    tape: &mut Tape<'_>,
    plan: Var,
    reduced: Var,
    cls: Var,
    cluster_w: Var,
) -> Var {
    let (rows, cols) = tape.value(plan).shape();
    let (n, m) = (rows - 1, cols - 1);
    let d = tape.value(reduced).cols();
    let interior = tape.slice_rows(plan, 0, n);
    let interior = tape.slice_cols(interior, 0, m);
    let pt = tape.transpose(interior);
    let agg = tape.matmul(pt, reduced);
    let wcol = tape.transpose(cluster_w);
    let weighted = tape.mul_col(agg, wcol);
    let flat = tape.reshape(weighted, 1, m * d);
    let g = tape.concat_cols(&[flat, cls]);
    tape.l2_normalize_rows(g)
}
