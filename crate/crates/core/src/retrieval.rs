//! Exact nearest-neighbour retrieval, Recall@K, and the retention-ratio sweep.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::{Dataset, Split};
use crate::encoder::{flop_count, Image};
use crate::error::{domain, shape_err, Result};
use crate::model::{describe, ModelConfig, ModelParams};
use crate::numerics::{l2_norm, Matrix};
use crate::pruning::{PruneSettings, Selector};

const UNIT_TOL: f64 = 1e-9;

/// Reference descriptors with their place ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorDb {
    pub descriptors: Matrix,
    pub ids: Vec<usize>,
    /// Retention ratio the references were built with.
    pub rho: f64,
    pub config_hash: u64,
}

impl DescriptorDb {
    pub fn new(descriptors: &[Vec<f64>], ids: Vec<usize>, rho: f64, config_hash: u64) -> Result<Self> {
        if descriptors.len() != ids.len() {
            return shape_err("DescriptorDb::new", descriptors.len(), ids.len());
        }
        let dim = descriptors.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(descriptors.len() * dim);
        for d in descriptors {
            if d.len() != dim {
                return shape_err("DescriptorDb::new", dim, d.len());
            }
            if (l2_norm(d) - 1.0).abs() > UNIT_TOL {
                return domain("reference descriptors must be unit-norm");
            }
            data.extend_from_slice(d);
        }
        Ok(Self {
            descriptors: Matrix::new(descriptors.len(), dim, data)?,
            ids,
            rho,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Row in the database.
    pub index: usize,
    pub id: usize,
    /// Squared Euclidean distance.
    pub distance: f64,
}

/// `Σ_k (a_k − b_k)²`, accumulated left to right.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact top-`k` by squared distance, ascending, ties to the lower row.
pub fn knn_search(query: &[f64], db: &DescriptorDb, k: usize) -> Result<Vec<Neighbor>> {
    if db.is_empty() {
        return domain("empty descriptor database");
    }
    if query.len() != db.dim() {
        return shape_err("knn_search", db.dim(), query.len());
    }
    if k == 0 || k > db.len() {
        return domain(format!("k must lie in [1, {}], got {k}", db.len()));
    }
    let mut all: Vec<Neighbor> = (0..db.len())
        .map(|i| Neighbor {
            index: i,
            id: db.ids[i],
            distance: squared_distance(query, db.descriptors.row(i)),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    Ok(all)
}

/// Fraction of queries whose first `K` retrieved ids hit a positive, for each `K`.
pub fn recall_at_k(retrieved: &[Vec<usize>], positives: &[Vec<usize>], ks: &[usize]) -> Result<Vec<f64>> {
    if retrieved.len() != positives.len() {
        return shape_err("recall_at_k", retrieved.len(), positives.len());
    }
    if retrieved.is_empty() {
        return domain("recall needs at least one query");
    }
    if let Some(q) = positives.iter().position(Vec::is_empty) {
        return domain(format!("query {q} has no positives"));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = retrieved
                .iter()
                .zip(positives)
                .filter(|(r, p)| r.iter().take(k).any(|id| p.contains(id)))
                .count();
            hits as f64 / retrieved.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub queries: usize,
    pub references: usize,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }
}

/// Descriptors for `indices`, computed in parallel; the image index doubles as its key.
pub fn describe_many(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &Dataset,
    indices: &[usize],
    prune: Option<&PruneSettings>,
) -> Result<Vec<Vec<f64>>> {
    indices
        .par_iter()
        .map(|&i| describe(params, cfg, &data.images[i], prune, i as u64).map(|d| d.descriptor.values))
        .collect()
}

/// Recall of the held-out queries against the held-out references.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &Dataset,
    split: &Split,
    prune: Option<&PruneSettings>,
    ks: &[usize],
) -> Result<EvalReport> {
    let refs = describe_many(params, cfg, data, &split.references, prune)?;
    let queries = describe_many(params, cfg, data, &split.queries, prune)?;
    let ids: Vec<usize> = split.references.iter().map(|&i| data.labels[i]).collect();
    let rho = prune.map_or(1.0, |p| p.rho);
    let db = DescriptorDb::new(&refs, ids, rho, 0)?;
    let kmax = ks.iter().copied().max().unwrap_or(1).min(db.len());
    let retrieved: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|q| knn_search(q, &db, kmax).map(|ns| ns.into_iter().map(|n| n.id).collect()))
        .collect::<Result<_>>()?;
    let positives: Vec<Vec<usize>> = split.queries.iter().map(|&i| vec![data.labels[i]]).collect();
    Ok(EvalReport {
        ks: ks.to_vec(),
        recalls: recall_at_k(&retrieved, &positives, ks)?,
        queries: queries.len(),
        references: db.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub samples: usize,
}

/// Per-image wall time from pixels to descriptor on the calling thread. The first
/// `warmup` passes over `images` are discarded.
pub fn latency_bench(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &[&Image],
    prune: Option<&PruneSettings>,
    repeats: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if images.is_empty() || repeats == 0 {
        return domain("latency bench needs images and at least one repeat");
    }
    let mut times = Vec::with_capacity(images.len() * repeats);
    for round in 0..warmup + repeats {
        for (k, img) in images.iter().enumerate() {
            let t = Instant::now();
            let d = describe(params, cfg, img, prune, k as u64)?;
            let elapsed = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(d);
            if round >= warmup {
                times.push(elapsed);
            }
        }
    }
    times.sort_by(f64::total_cmp);
    let pick = |q: f64| times[((q * (times.len() - 1) as f64).round() as usize).min(times.len() - 1)];
    Ok(LatencyStats {
        median_ms: pick(0.5),
        p90_ms: pick(0.9),
        samples: times.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rho: f64,
    pub prune_layer: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub latency_ms_median: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "rho,recall_at_1,recall_at_5,latency_ms_median,flops";

impl SweepResult {
    /// CSV with the fixed header; `prune_layer` is appended as a last column when the
    /// sweep covers more than one layer.
    pub fn to_csv(&self) -> String {
        let mut layers: Vec<usize> = self.rows.iter().map(|r| r.prune_layer).collect();
        layers.sort_unstable();
        layers.dedup();
        let with_layer = layers.len() > 1;
        let mut out = String::from(SWEEP_HEADER);
        if with_layer {
            out.push_str(",prune_layer");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.rho, r.recall_at_1, r.recall_at_5, r.latency_ms_median, r.flops
            ));
            if with_layer {
                out.push_str(&format!(",{}", r.prune_layer));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub layers: Vec<usize>,
    pub kappa: f64,
    pub selector: Selector,
    /// Latency passes over the query images; 0 skips timing.
    pub repeats: usize,
    pub warmup: usize,
}

impl SweepConfig {
    pub fn new(rhos: Vec<f64>, layers: Vec<usize>) -> Self {
        Self {
            rhos,
            layers,
            kappa: crate::pruning::DEFAULT_KAPPA,
            selector: Selector::Learned,
            repeats: 0,
            warmup: 1,
        }
    }
}

/// Re-describes references and queries at every `(layer, ρ)` with the same parameters.
pub fn rho_sweep(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &Dataset,
    split: &Split,
    sweep: &SweepConfig,
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for &layer in &sweep.layers {
        for &rho in &sweep.rhos {
            let mut settings = PruneSettings::new(rho, layer);
            settings.kappa = sweep.kappa;
            settings.selector = sweep.selector;
            settings.validate(cfg.encoder.depth)?;
            let prune = (rho < 1.0).then_some(&settings);
            let report = evaluate(params, cfg, data, split, prune, &[1, 5])?;
            let latency = if sweep.repeats > 0 {
                let imgs: Vec<&Image> = split.queries.iter().map(|&i| &data.images[i]).collect();
                latency_bench(params, cfg, &imgs, prune, sweep.repeats, sweep.warmup)?.median_ms
            } else {
                f64::NAN
            };
            let mut enc = cfg.encoder.clone();
            enc.prune_layer = layer;
            rows.push(SweepRow {
                rho,
                prune_layer: layer,
                recall_at_1: report.recalls[0],
                recall_at_5: report.recalls[1],
                latency_ms_median: latency,
                flops: flop_count(&enc, rho),
            });
        }
    }
    Ok(SweepResult { rows })
}
