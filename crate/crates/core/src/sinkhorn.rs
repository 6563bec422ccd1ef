//! Dustbin/ghost-augmented score matrices and a log-domain Sinkhorn solver.
//!
//! Layout convention: rows are sources (N real tokens, then the ghost token at index N),
//! columns are targets (M real clusters, then the dustbin cluster at index M).

use crate::error::{domain, shape_err, Result};
use crate::numerics::{lse_unchecked, Matrix};
use crate::tape::{Tape, Var};

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// `(N+1)×(M+1)` scores: raw `S` in the interior, the shared dustbin score on the border.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedScores {
    matrix: Matrix,
    dustbin_score: f64,
}

impl ExtendedScores {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dustbin_score(&self) -> f64 {
        self.dustbin_score
    }

    /// Number of real tokens.
    pub fn tokens(&self) -> usize {
        self.matrix.rows() - 1
    }

    /// Number of real clusters.
    pub fn clusters(&self) -> usize {
        self.matrix.cols() - 1
    }
}

pub fn build_extended_scores(scores: &Matrix, dustbin_score: f64) -> Result<ExtendedScores> {
    let (n, m) = scores.shape();
    if n == 0 || m == 0 {
        return domain("score matrix must have at least one token and one cluster");
    }
    if !scores.is_finite() || !dustbin_score.is_finite() {
        return domain("scores must be finite");
    }
    let mut ext = Matrix::filled(n + 1, m + 1, dustbin_score);
    for i in 0..n {
        ext.row_mut(i)[..m].copy_from_slice(scores.row(i));
    }
    Ok(ExtendedScores {
        matrix: ext,
        dustbin_score,
    })
}

/// Source masses `a` (tokens then ghost) and target masses `b` (clusters then dustbin).
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Marginals {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.iter().chain(&b).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return domain("marginal masses must be positive and finite");
        }
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        if (sa - sb).abs() > 1e-12 * sa.max(sb) {
            return domain(format!("marginal totals differ: {sa} vs {sb}"));
        }
        Ok(Self { a, b })
    }
}

/// Unit mass per real token and cluster; the ghost carries M, the dustbin N; normalized to 1.
pub fn default_marginals(tokens: usize, clusters: usize) -> Result<Marginals> {
    if tokens == 0 || clusters == 0 {
        return domain("default_marginals needs N, M ≥ 1");
    }
    let total = (tokens + clusters) as f64;
    let mut a = vec![1.0 / total; tokens + 1];
    a[tokens] = clusters as f64 / total;
    let mut b = vec![1.0 / total; clusters + 1];
    b[clusters] = tokens as f64 / total;
    Ok(Marginals { a, b })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub max_marginal_violation: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// Number of real tokens (ghost row excluded).
    pub fn tokens(&self) -> usize {
        self.plan.rows() - 1
    }

    /// Number of real clusters (dustbin column excluded).
    pub fn clusters(&self) -> usize {
        self.plan.cols() - 1
    }

    /// Real-token × real-cluster block.
    pub fn interior(&self) -> Matrix {
        self.plan.block(0, self.tokens(), 0, self.clusters())
    }
}

pub fn sinkhorn_solve(
    scores: &ExtendedScores,
    marginals: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    solve_inner(scores, marginals, cfg, None)
}

/// As [`sinkhorn_solve`], also returning the L1 marginal residual
/// `‖P1 − a‖₁ + ‖Pᵀ1 − b‖₁` after every iteration. Unlike the ∞-norm, this residual is
/// non-increasing along Sinkhorn iterations.
pub fn sinkhorn_solve_traced(
    scores: &ExtendedScores,
    marginals: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan, Vec<f64>)> {
    let mut trace = Vec::new();
    let plan = solve_inner(scores, marginals, cfg, Some(&mut trace))?;
    Ok((plan, trace))
}

fn solve_inner(
    scores: &ExtendedScores,
    marginals: &Marginals,
    cfg: &SinkhornConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<TransportPlan> {
    if !(cfg.epsilon > 0.0) || !(cfg.tol > 0.0) {
        return domain("epsilon and tol must be positive");
    }
    let s = scores.matrix();
    if !s.is_finite() {
        return domain("non-finite scores");
    }
    let (rows, cols) = s.shape();
    if marginals.a.len() != rows || marginals.b.len() != cols {
        return shape_err(
            "sinkhorn_solve",
            format!("marginals of length {rows} and {cols}"),
            format!("{} and {}", marginals.a.len(), marginals.b.len()),
        );
    }
    let inv_eps = 1.0 / cfg.epsilon;
    let kernel = s.map(|x| x * inv_eps);
    let log_a: Vec<f64> = marginals.a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = marginals.b.iter().map(|x| x.ln()).collect();
    let mut log_u = vec![0.0; rows];
    let mut log_v = vec![0.0; cols];
    let mut buf = vec![0.0; cols.max(rows)];
    let mut plan = Matrix::zeros(rows, cols);
    let mut violation = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        for i in 0..rows {
            for (j, b) in buf[..cols].iter_mut().enumerate() {
                *b = kernel.get(i, j) + log_v[j];
            }
            log_u[i] = log_a[i] + -lse_unchecked(&buf[..cols]);
        }
        for j in 0..cols {
            for (i, b) in buf[..rows].iter_mut().enumerate() {
                *b = kernel.get(i, j) + log_u[i];
            }
            log_v[j] = log_b[j] + -lse_unchecked(&buf[..rows]);
        }
        fill_plan(&kernel, &log_u, &log_v, &mut plan);
        violation = marginal_violation(&plan, marginals);
        if let Some(t) = trace.as_deref_mut() {
            t.push(marginal_residual_l1(&plan, marginals));
        }
        if violation <= cfg.tol {
            break;
        }
    }
    if iterations == 0 {
        fill_plan(&kernel, &log_u, &log_v, &mut plan);
        violation = marginal_violation(&plan, marginals);
    }
    Ok(TransportPlan {
        plan,
        log_u,
        log_v,
        epsilon: cfg.epsilon,
        iterations_used: iterations,
        max_marginal_violation: violation,
        converged: violation <= cfg.tol,
    })
}

fn fill_plan(kernel: &Matrix, log_u: &[f64], log_v: &[f64], plan: &mut Matrix) {
    for i in 0..kernel.rows() {
        for (j, p) in plan.row_mut(i).iter_mut().enumerate() {
            *p = (kernel.get(i, j) + log_u[i] + log_v[j]).exp();
        }
    }
}

/// `max(‖P1 − a‖∞, ‖Pᵀ1 − b‖∞)`.
pub fn marginal_violation(plan: &Matrix, marginals: &Marginals) -> f64 {
    let rows = plan
        .row_sums()
        .iter()
        .zip(&marginals.a)
        .map(|(s, a)| (s - a).abs())
        .fold(0.0, f64::max);
    let cols = plan
        .col_sums()
        .iter()
        .zip(&marginals.b)
        .map(|(s, b)| (s - b).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// `‖P1 − a‖₁ + ‖Pᵀ1 − b‖₁`.
pub fn marginal_residual_l1(plan: &Matrix, marginals: &Marginals) -> f64 {
    let rows: f64 = plan.row_sums().iter().zip(&marginals.a).map(|(s, a)| (s - a).abs()).sum();
    let cols: f64 = plan.col_sums().iter().zip(&marginals.b).map(|(s, b)| (s - b).abs()).sum();
    rows + cols
}

/// Differentiable Sinkhorn with a fixed iteration count, recorded on `tape`.
///
/// Performs the same updates, in the same floating-point order, as [`sinkhorn_solve`] with
/// the tolerance disabled, so both agree bitwise for equal iteration counts.
pub fn sinkhorn_unrolled(
    tape: &mut Tape<'_>,
    extended: Var,
    marginals: &Marginals,
    epsilon: f64,
    iterations: usize,
) -> Var {
    let (rows, cols) = tape.value(extended).shape();
    let kernel = tape.scale(extended, 1.0 / epsilon);
    let log_a = Matrix::col_vector(marginals.a.iter().map(|x| x.ln()).collect());
    let log_b = Matrix::row_vector(marginals.b.iter().map(|x| x.ln()).collect());
    let mut log_u = tape.constant(Matrix::zeros(rows, 1));
    let mut log_v = tape.constant(Matrix::zeros(1, cols));
    for _ in 0..iterations {
        let shifted = tape.add_row(kernel, log_v);
        let lse = tape.lse_rows(shifted);
        let neg = tape.scale(lse, -1.0);
        log_u = tape.add_const(neg, &log_a);
        let shifted = tape.add_col(kernel, log_u);
        let lse = tape.lse_cols(shifted);
        let neg = tape.scale(lse, -1.0);
        log_v = tape.add_const(neg, &log_b);
    }
    let with_u = tape.add_col(kernel, log_u);
    let logits = tape.add_row(with_u, log_v);
    tape.exp(logits)
}

/// `Σ_j weights_j · P_ij` for each real token `i`; ghost row and dustbin column excluded.
pub fn absorbed_token_mass(plan: &TransportPlan, cluster_weights: &[f64]) -> Result<Vec<f64>> {
    let m = plan.clusters();
    if cluster_weights.len() != m {
        return shape_err("absorbed_token_mass", m, cluster_weights.len());
    }
    Ok((0..plan.tokens())
        .map(|i| {
            plan.plan.row(i)[..m]
                .iter()
                .zip(cluster_weights)
                .map(|(p, w)| p * w)
                .sum()
        })
        .collect())
}
