//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the report is printed even when every check passes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use twofloat::TwoFloat;

use weitop::aggregation::{assemble_descriptor, project_tokens, AggregatorConfig, TierConfig};
use weitop::data::{make_synth_dataset, Dataset, BENCH_DISTRACTOR_FRAC, BENCH_NOISE, HELD_OUT_FRACTION};
use weitop::encoder::{self, patchify, Image};
use weitop::io::{Checkpoint, TokenFile};
use weitop::model::{aggregate_tokens, describe, student_logits, ModelConfig, ModelParams};
use weitop::pruning::{PruneSettings, Selector};
use weitop::retrieval::{knn_search, recall_at_k, rho_sweep, DescriptorDb, SweepConfig, SweepResult};
use weitop::sinkhorn::{
    build_extended_scores, default_marginals, sinkhorn_solve, Marginals, SinkhornConfig,
};
use weitop::training::{grad_check, train, GradCheckConfig, LossConfig, TrainConfig, TOY_LR};
use weitop::{Matrix, SeededRng};

// Pinned tolerances and budgets.
const FEASIBILITY_TOL: f64 = 1e-6;
const FEASIBILITY_BUDGET: Duration = Duration::from_secs(5);
const ORACLE_TOL: f64 = 1e-8;
const WEIGHT_FLOOR: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const UNWEIGHTED_TOL: f64 = 1e-12;
const RECALL_AT_RHO1_MIN: f64 = 0.90;
const RECALL_BAND: f64 = 0.02;
/// Slack for representing recall means in binary floating point.
const FLOAT_SLACK: f64 = 1e-9;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const RHOS: [f64; 5] = [1.0, 0.95, 0.7, 0.5, 0.4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("Sinkhorn feasibility", sinkhorn_feasibility),
        ("Oracle equivalence", oracle_equivalence),
        ("Descriptor dimensionality", descriptor_dimensionality),
        ("Tier-weight law", tier_weight_law),
        ("rho=1 identity", rho_one_identity),
        ("Gradient correctness", gradient_correctness),
        ("Weighting-off equivalence", weighting_off_equivalence),
        ("Desk-scale learning", desk_scale_learning),
        ("Trade-off trend", tradeoff_trend),
        ("Retrieval exactness", retrieval_exactness),
        ("Placement sweep", placement_sweep),
        ("Format round-trips", format_round_trips),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                verdict(false, format!("panicked: {msg}"))
            });
        if !v.pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2} {name}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            k + 1,
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Row/column residual computed from scratch.
fn violation(plan: &Matrix, marg: &Marginals) -> f64 {
    let (n, m) = plan.shape();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let s: f64 = (0..m).map(|j| plan.get(i, j)).sum();
        worst = worst.max((s - marg.a[i]).abs());
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| plan.get(i, j)).sum();
        worst = worst.max((s - marg.b[j]).abs());
    }
    worst
}

fn sinkhorn_feasibility() -> Verdict {
    let cfg = SinkhornConfig {
        epsilon: 0.1,
        max_iters: 100,
        tol: FEASIBILITY_TOL,
    };
    let marg = default_marginals(50, 20).unwrap();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    let mut max_iters = 0;
    for seed in 0..100 {
        let mut rng = SeededRng::new(1000 + seed);
        let s = Matrix::rand_uniform(50, 20, -1.0, 1.0, &mut rng);
        let p = sinkhorn_solve(&build_extended_scores(&s, 0.0).unwrap(), &marg, &cfg).unwrap();
        worst = worst.max(violation(&p.plan, &marg));
        negative += p.plan.data().iter().filter(|&&x| !(x >= 0.0)).count();
        max_iters = max_iters.max(p.iterations_used);
    }
    let elapsed = t.elapsed();
    verdict(
        worst <= FEASIBILITY_TOL && negative == 0 && elapsed < FEASIBILITY_BUDGET,
        format!(
            "100 problems 50x20, max violation {worst:.2e} (tol {FEASIBILITY_TOL:.0e}), \
             max iterations {max_iters}, negative entries {negative}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Exact fixed point for S = [[s],[0]], z = 0, marginals (2, 1), in double-double.
///
/// Rows 1 and 2 have equal scores and mass, so the plan is
/// [[p, 1/3−p], [q, 1/3−q], [q, 1/3−q]]. Column 0 carries 1/3, so p + 2q = 1/3, and any
/// entropic plan has cross-ratio P₀₀P₁₁ / (P₀₁P₁₀) = K = e^{s/ε}. With x = 1/3 − p and
/// q = x/2 this gives (K − 1)x² + x − 2/9 = 0.
fn two_token_oracle(s: f64, eps: f64) -> Vec<f64> {
    let third = TwoFloat::from(1.0) / TwoFloat::from(3.0);
    let k = (TwoFloat::from(s) / TwoFloat::from(eps)).exp();
    let a = k - TwoFloat::from(1.0);
    let c = TwoFloat::from(2.0) / TwoFloat::from(9.0);
    let disc = TwoFloat::from(1.0) + TwoFloat::from(4.0) * a * c;
    // Stable root: 2c / (1 + √disc).
    let x = TwoFloat::from(2.0) * c / (TwoFloat::from(1.0) + disc.sqrt());
    let p = third - x;
    let q = x / TwoFloat::from(2.0);
    [p, x, q, third - q, q, third - q].iter().map(|v| v.hi()).collect()
}

/// Linear-domain scaling in double-double, run far past convergence.
fn scaling_oracle(ext: &Matrix, n: usize, m: usize, eps: f64, iters: usize) -> Vec<f64> {
    let total = TwoFloat::from((n + m) as f64);
    let mut a = vec![TwoFloat::from(1.0) / total; n + 1];
    a[n] = TwoFloat::from(m as f64) / total;
    let mut b = vec![TwoFloat::from(1.0) / total; m + 1];
    b[m] = TwoFloat::from(n as f64) / total;
    let kern: Vec<Vec<TwoFloat>> = (0..=n)
        .map(|i| (0..=m).map(|j| (TwoFloat::from(ext.get(i, j)) / TwoFloat::from(eps)).exp()).collect())
        .collect();
    let mut u = vec![TwoFloat::from(1.0); n + 1];
    let mut v = vec![TwoFloat::from(1.0); m + 1];
    for _ in 0..iters {
        for i in 0..=n {
            let s = (0..=m).fold(TwoFloat::from(0.0), |acc, j| acc + kern[i][j] * v[j]);
            u[i] = a[i] / s;
        }
        for j in 0..=m {
            let s = (0..=n).fold(TwoFloat::from(0.0), |acc, i| acc + kern[i][j] * u[i]);
            v[j] = b[j] / s;
        }
    }
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=m {
            out.push((u[i] * kern[i][j] * v[j]).hi());
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Verdict {
    // The degenerate instance converges at rate ~0.22/k, so it is run to a violation of
    // 8e-9; the plan error equals the violation there.
    let s = Matrix::from_rows(&[vec![10.0], vec![0.0]]).unwrap();
    let ext = build_extended_scores(&s, 0.0).unwrap();
    let cfg = SinkhornConfig {
        epsilon: 0.1,
        max_iters: 100_000_000,
        tol: 8e-9,
    };
    let p = sinkhorn_solve(&ext, &default_marginals(2, 1).unwrap(), &cfg).unwrap();
    let degenerate = max_abs_diff(p.plan.data(), &two_token_oracle(10.0, 0.1));
    let mut worst_random: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = SeededRng::new(200 + seed);
        let (n, m) = (6 + seed as usize, 3 + seed as usize % 3);
        let s = Matrix::rand_uniform(n, m, -1.0, 1.0, &mut rng);
        let ext = build_extended_scores(&s, rng.uniform(-0.5, 0.5)).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.1,
            max_iters: 5000,
            tol: 1e-15,
        };
        let p = sinkhorn_solve(&ext, &default_marginals(n, m).unwrap(), &cfg).unwrap();
        let oracle = scaling_oracle(ext.matrix(), n, m, 0.1, 3000);
        worst_random = worst_random.max(max_abs_diff(p.plan.data(), &oracle));
    }
    verdict(
        degenerate <= ORACLE_TOL && worst_random <= ORACLE_TOL,
        format!(
            "S=[[10],[0]] closed form: {degenerate:.2e} after {} iterations; \
             5 random instances vs double-double scaling: {worst_random:.2e} (tol {ORACLE_TOL:.0e})",
            p.iterations_used
        ),
    )
}

fn descriptor_dimensionality() -> Verdict {
    let mut cfg = ModelConfig::toy();
    cfg.aggregator = AggregatorConfig::paper();
    let params = ModelParams::init(&cfg, 3);
    let img = random_image(&cfg, 3);
    let d = describe(&params, &cfg, &img, None, 0).unwrap();
    let expected = 128 * 64 + 256;
    verdict(
        cfg.descriptor_len() == expected && d.descriptor.len() == expected,
        format!(
            "M=64, d_low=128, d_cls=256: declared {} built {} expected {expected}",
            cfg.descriptor_len(),
            d.descriptor.len()
        ),
    )
}

fn tier_weight_law() -> Verdict {
    let mut rng = SeededRng::new(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let t = 2 + rng.below(6);
        let mut tiers = TierConfig::uniform(&vec![1; t]);
        tiers.theta0 = rng.normal() * 2.0;
        tiers.theta_delta = (0..t - 1).map(|_| rng.normal() * 3.0).collect();
        let w = weitop::aggregation::tier_weights(&tiers);
        let ordered = w.windows(2).all(|p| p[0] >= p[1]);
        if !ordered || w.iter().any(|&x| x < WEIGHT_FLOOR) {
            violations += 1;
        }
    }
    let cfg = ModelConfig::toy();
    let init = ModelParams::init(&cfg, 0);
    let exp_theta0 = init.aggregator.theta0.data()[0].exp();
    let w0 = init.tier_weights(cfg.aggregator.tiers.floor)[0];
    verdict(
        violations == 0 && exp_theta0 == 1.0 && w0 == 1.0,
        format!("1000 draws, {violations} violations; initial exp(theta0) = {exp_theta0}, w_0 = {w0}"),
    )
}

fn random_image(cfg: &ModelConfig, seed: u64) -> Image {
    let e = &cfg.encoder;
    let mut rng = SeededRng::new(seed);
    let data = (0..e.image_side * e.image_side * e.channels).map(|_| rng.normal()).collect();
    Image::new(e.image_side, e.channels, data).unwrap()
}

fn rho_one_identity() -> Verdict {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 5);
    let settings = PruneSettings::new(1.0, cfg.encoder.prune_layer);
    let n0 = cfg.encoder.num_patches();
    let mut mismatches = 0;
    let mut hook_calls = 0;
    for k in 0..50 {
        let img = random_image(&cfg, 500 + k);
        let plain = describe(&params, &cfg, &img, None, k).unwrap();
        // The hook runs the student and the top-ρ selection, then keeps what ρ = 1 keeps.
        let mut hook = |tap: &Matrix| {
            hook_calls += 1;
            let patch = tap.block(0, n0, 0, tap.cols());
            let logits = student_logits(&params, &patch)?;
            Ok(settings.decide(&logits, &patch, k)?.kept)
        };
        let tokens = encoder::forward(&img, &params.encoder, &cfg.encoder, Some(&mut hook)).unwrap();
        let hooked = aggregate_tokens(&params, &cfg, &tokens).unwrap();
        let via_describe = describe(&params, &cfg, &img, Some(&settings), k).unwrap();
        if hooked.descriptor.values != plain.descriptor.values
            || via_describe.descriptor.values != plain.descriptor.values
        {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0 && hook_calls == 50,
        format!("50 random images, {mismatches} descriptors differ bitwise, hook fired {hook_calls} times"),
    )
}

fn gradient_correctness() -> Verdict {
    let cfg = ModelConfig::grad_check();
    let params = ModelParams::init(&cfg, 11);
    let data = make_synth_dataset(2, 2, BENCH_NOISE, BENCH_DISTRACTOR_FRAC, 5).unwrap();
    let patches: Vec<Matrix> = data.images.iter().map(|i| patchify(i, &cfg.encoder).unwrap()).collect();
    let refs: Vec<&Matrix> = patches.iter().collect();
    let loss = LossConfig::default();
    assert_eq!((loss.gamma, loss.temperature), (0.1, 0.1));
    let gc = GradCheckConfig {
        rel_tol: GRAD_REL_TOL,
        ..GradCheckConfig::default()
    };
    let t = Instant::now();
    let report = grad_check(&params, &cfg, &loss, &refs, &data.labels, &gc).unwrap();
    let elapsed = t.elapsed();
    let checked: Vec<String> = report.per_tensor().into_iter().map(|(n, _, _)| n).collect();
    let all: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let missing: Vec<&String> = all.iter().filter(|n| !checked.contains(n)).collect();
    let group = |name: &str| {
        report
            .per_tensor()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map_or(f64::NAN, |(_, m, _)| m)
    };
    let max = report.max_rel_err();
    verdict(
        max < GRAD_REL_TOL && missing.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "N0=16, M=4, d_enc=64: {} samples over {} tensors, max rel err {max:.2e} (tol {GRAD_REL_TOL:.0e}); \
             theta0 {:.1e}, theta_delta {:.1e}, dustbin {:.1e}; {} kink samples skipped; unchecked tensors {missing:?}; {:.1} s",
            report.entries.len(),
            checked.len(),
            group("aggregator.theta0"),
            group("aggregator.theta_delta"),
            group("aggregator.dustbin"),
            report.skipped,
            elapsed.as_secs_f64()
        ),
    )
}

fn weighting_off_equivalence() -> Verdict {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::init(&cfg, 6);
    // softplus(−800) underflows to exactly 0, so every tier weight is exp(0) = 1.
    params.aggregator.theta0.data_mut()[0] = 0.0;
    for d in params.aggregator.theta_delta.data_mut() {
        *d = -800.0;
    }
    let m = cfg.aggregator.clusters;
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let img = random_image(&cfg, 700 + k);
        let tokens = encoder::forward(&img, &params.encoder, &cfg.encoder, None).unwrap();
        let agg = aggregate_tokens(&params, &cfg, &tokens).unwrap();
        let (reduced, cls) = project_tokens(&tokens, &params.aggregator).unwrap();
        // Unweighted aggregation: v_j = Σ_i P_ij x̃_i, then CLS, then one L2 normalization.
        let mut v = Vec::new();
        for j in 0..m {
            for c in 0..reduced.cols() {
                v.push((0..tokens.len()).map(|i| agg.plan.plan.get(i, j) * reduced.get(i, c)).sum::<f64>());
            }
        }
        v.extend_from_slice(&cls);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let oracle: Vec<f64> = v.iter().map(|x| x / norm).collect();
        worst = worst.max(max_abs_diff(&agg.descriptor.values, &oracle));
        let explicit = assemble_descriptor(&agg.plan, &reduced, &cls, &vec![1.0; 4], &agg.tau).unwrap();
        worst = worst.max(max_abs_diff(&explicit.values, &oracle));
    }
    verdict(
        worst <= UNWEIGHTED_TOL,
        format!("10 images, max deviation from the unweighted oracle {worst:.2e} (tol {UNWEIGHTED_TOL:.0e})"),
    )
}

struct SeedRun {
    data: Dataset,
    params: ModelParams,
    distill_initial: f64,
    distill_final: f64,
    learned: SweepResult,
    random_half: f64,
}

/// Five benchmark runs shared by the learning, trend and placement criteria.
fn bench() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = ModelConfig::toy();
        SEEDS
            .iter()
            .map(|&seed| {
                let data = make_synth_dataset(50, 6, BENCH_NOISE, BENCH_DISTRACTOR_FRAC, seed).unwrap();
                let tc = TrainConfig {
                    epochs: 4,
                    lr: TOY_LR,
                    seed,
                    eval_each_epoch: false,
                    ..TrainConfig::default()
                };
                let out = train(&data, &cfg, &tc).unwrap();
                let split = data.split(HELD_OUT_FRACTION).unwrap();
                let learned = rho_sweep(&out.params, &cfg, &data, &split, &SweepConfig::new(RHOS.to_vec(), vec![1]))
                    .unwrap();
                let mut rs = SweepConfig::new(vec![0.5], vec![1]);
                rs.selector = Selector::Random { seed: 99 + seed };
                let random = rho_sweep(&out.params, &cfg, &data, &split, &rs).unwrap();
                SeedRun {
                    data,
                    params: out.params,
                    distill_initial: out.distill_initial,
                    distill_final: out.distill_final,
                    learned,
                    random_half: random.rows[0].recall_at_1,
                }
            })
            .collect()
    })
}

fn mean_recalls(runs: &[SeedRun]) -> Vec<f64> {
    (0..RHOS.len())
        .map(|k| runs.iter().map(|r| r.learned.rows[k].recall_at_1).sum::<f64>() / runs.len() as f64)
        .collect()
}

fn desk_scale_learning() -> Verdict {
    let runs = bench();
    let r1 = mean_recalls(runs)[0];
    let distill: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}->{:.4}", r.distill_initial, r.distill_final))
        .collect();
    let all_decrease = runs.iter().all(|r| r.distill_final < r.distill_initial);
    verdict(
        r1 >= RECALL_AT_RHO1_MIN && all_decrease,
        format!(
            "50 places x 6 views, 5 seeds, 4 epochs: mean held-out R@1 at rho=1 {r1:.4} (min {RECALL_AT_RHO1_MIN}); \
             L_distill per seed [{}]",
            distill.join(", ")
        ),
    )
}

fn tradeoff_trend() -> Verdict {
    let runs = bench();
    let means = mean_recalls(runs);
    let flops: Vec<u64> = runs[0].learned.rows.iter().map(|r| r.flops).collect();
    let flops_decrease = flops.windows(2).all(|w| w[1] < w[0]);
    // No later ratio may exceed any earlier one by more than the band.
    let mut worst_rise = f64::NEG_INFINITY;
    for j in 1..means.len() {
        for i in 0..j {
            worst_rise = worst_rise.max(means[j] - means[i]);
        }
    }
    let banded = worst_rise <= RECALL_BAND + FLOAT_SLACK;
    let random = runs.iter().map(|r| r.random_half).sum::<f64>() / runs.len() as f64;
    let learned_half = means[3];
    let n0 = ModelConfig::toy().encoder.num_patches();
    let kept: Vec<usize> = RHOS.iter().map(|&r| weitop::pruning::kept_count(r, n0)).collect();
    verdict(
        flops_decrease && banded && learned_half > random,
        format!(
            "mean R@1 over rho {RHOS:?}: {:?}; largest rise {worst_rise:.4} (band {RECALL_BAND}); \
             FLOPs {flops:?} strictly decreasing: {flops_decrease} (kept tokens {kept:?} of {n0}); \
             rho=0.5 learned {learned_half:.4} vs random {random:.4}",
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn retrieval_exactness() -> Verdict {
    let mut rng = SeededRng::new(10);
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(40);
        let d = 1 + rng.below(16);
        let k = 1 + rng.below(n);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        // Occasional exact duplicates exercise the tie rule.
        if n > 2 && rng.below(4) == 0 {
            rows[n - 1] = rows[0].clone();
        }
        let rows: Vec<Vec<f64>> = rows.into_iter().map(unit).collect();
        let ids: Vec<usize> = (0..n).map(|_| rng.below(8)).collect();
        let db = DescriptorDb::new(&rows, ids.clone(), 1.0, 0).unwrap();
        let q = unit((0..d).map(|_| rng.normal()).collect());
        let got = knn_search(&q, &db, k).unwrap();
        let mut naive: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        naive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = got.len() == k
            && got.iter().zip(&naive).all(|(g, (dist, i))| {
                g.index == *i && g.id == ids[*i] && g.distance.to_bits() == dist.to_bits()
            });
        if !same {
            mismatches += 1;
        }
        let retrieved = vec![got.iter().map(|g| g.id).collect::<Vec<_>>()];
        let positives = vec![vec![rng.below(8)]];
        let ks: Vec<usize> = (1..=k).collect();
        let r = recall_at_k(&retrieved, &positives, &ks).unwrap();
        if r.windows(2).any(|w| w[1] < w[0]) {
            non_monotone += 1;
        }
    }
    verdict(
        mismatches == 0 && non_monotone == 0,
        format!("1000 instances: {mismatches} differ from the naive oracle (ids, bitwise distances), {non_monotone} non-monotone R@K"),
    )
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn placement_sweep() -> Verdict {
    let run = &bench()[0];
    let cfg = ModelConfig::toy();
    let split = run.data.split(HELD_OUT_FRACTION).unwrap();
    let mut sc = SweepConfig::new(vec![0.4], vec![1, 2, 3]);
    sc.repeats = 1;
    let result = rho_sweep(&run.params, &cfg, &run.data, &split, &sc).unwrap();
    let flops: Vec<u64> = result.rows.iter().map(|r| r.flops).collect();
    let recalls: Vec<f64> = result.rows.iter().map(|r| r.recall_at_1).collect();
    let header_ok = result.to_csv().lines().next() == Some("rho,recall_at_1,recall_at_5,latency_ms_median,flops,prune_layer");
    let layer1_lowest = result.rows.len() == 3 && flops[0] < flops[1] && flops[0] < flops[2];
    verdict(
        layer1_lowest && header_ok,
        format!("rho=0.4, layers 1/2/3: FLOPs {flops:?}; R@1 {recalls:?} (reported, not ordered)"),
    )
}

fn format_round_trips() -> Verdict {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 12);
    let img = random_image(&cfg, 12);
    let settings = PruneSettings::new(0.5, 1);
    let tokens = describe(&params, &cfg, &img, Some(&settings), 0).unwrap().tokens;
    let tf = TokenFile::from_tokens(&tokens);
    let mut tbytes = Vec::new();
    tf.write_to(&mut tbytes).unwrap();
    let tback = TokenFile::read_from(&mut tbytes.as_slice()).unwrap();
    let mut tagain = Vec::new();
    tback.write_to(&mut tagain).unwrap();
    let tokens_ok = tback == tf && tagain == tbytes;

    let ck = Checkpoint {
        model: cfg.clone(),
        loss: LossConfig::default(),
        data: None,
        params,
    };
    let cbytes = ck.to_bytes().unwrap();
    let cback = Checkpoint::read_from(&mut cbytes.as_slice()).unwrap();
    let ckpt_ok = cback == ck && cback.to_bytes().unwrap() == cbytes;

    let data = make_synth_dataset(20, 4, BENCH_NOISE, BENCH_DISTRACTOR_FRAC, 77).unwrap();
    let run = || {
        let tc = TrainConfig {
            epochs: 1,
            lr: TOY_LR,
            seed: 77,
            eval_each_epoch: false,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, &tc).unwrap();
        Checkpoint {
            model: cfg.clone(),
            loss: tc.loss,
            data: Some(data.config.clone()),
            params: out.params,
        }
        .checksum()
        .unwrap()
    };
    let (a, b) = (run(), run());
    verdict(
        tokens_ok && ckpt_ok && a == b,
        format!(
            "TokenFile {} bytes identical: {tokens_ok}; Checkpoint {} bytes identical: {ckpt_ok}; \
             seeded retrain checksums {a:016x} / {b:016x}",
            tbytes.len(),
            cbytes.len()
        ),
    )
}
