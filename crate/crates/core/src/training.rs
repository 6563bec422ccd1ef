//! Batched loss and gradients, the training loop, and finite-difference verification.

use rayon::prelude::*;

use crate::data::{Dataset, Fnv, Split, HELD_OUT_FRACTION};
use crate::encoder::patchify;
use crate::error::{domain, Error, Result};
use crate::losses::{ms_loss_grad, total_loss, MsLossConfig};
use crate::model::{collect_grads, train_forward, Detached, ModelConfig, ModelParams};
use crate::numerics::{Matrix, SeededRng};
use crate::optim::{linear_decay, AdamW, AdamWConfig};
use crate::pruning::DEFAULT_TEMPERATURE;
use crate::retrieval::evaluate;
use crate::tape::Tape;

/// Learning rate of the reference protocol.
pub const PAPER_LR: f64 = 6e-5;
/// Learning rate that suits the toy model and a handful of steps.
pub const TOY_LR: f64 = 3e-4;
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub ms: MsLossConfig,
    pub gamma: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ms: MsLossConfig::default(),
            gamma: DEFAULT_GAMMA,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.ms.validate()?;
        if !(self.gamma >= 0.0) {
            return domain("gamma must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return domain("temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub retr: f64,
    /// Mean distillation loss over the batch.
    pub distill: f64,
    /// Combined hash of every discrete decision in the batch.
    pub signature: u64,
    pub detached: Vec<Detached>,
    pub grads: Option<ModelParams>,
}

const BACKWARD_CHUNK: usize = 16;

/// `L_retr + γ·mean(L_distill)` over a batch, and optionally its gradient. Per-image
/// gradients are summed in batch order, so the result does not depend on the thread count.
pub fn batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: &LossConfig,
    patches: &[&Matrix],
    labels: &[usize],
    frozen: Option<&[Detached]>,
    with_grads: bool,
) -> Result<BatchResult> {
    let b = patches.len();
    if b == 0 || labels.len() != b {
        return domain("batch must be nonempty with one label per image");
    }
    let forwards = patches
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let out = train_forward(&mut tape, &vars, cfg, x, loss.temperature, frozen.map(|f| &f[k]))?;
            Ok((tape, vars, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let descriptors: Vec<Vec<f64>> = forwards
        .iter()
        .map(|(t, _, o)| t.value(o.descriptor).data().to_vec())
        .collect();
    let (retr, dg) = ms_loss_grad(&descriptors, labels, &loss.ms)?;
    let distill = forwards
        .iter()
        .map(|(t, _, o)| o.distill.map_or(0.0, |v| t.value(v).data()[0]))
        .sum::<f64>()
        / b as f64;
    let total = total_loss(retr, distill, loss.gamma)?;
    let mut sig = Fnv::new();
    for (t, _, _) in &forwards {
        sig.write_u64(t.signature());
    }

    let grads = if with_grads {
        let distill_seed = loss.gamma / b as f64;
        let mut sum = params.zeros_like();
        for (c, chunk) in forwards.chunks(BACKWARD_CHUNK).enumerate() {
            let parts: Vec<ModelParams> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, (tape, vars, out))| {
                    let k = c * BACKWARD_CHUNK + j;
                    let mut seeds = vec![(out.descriptor, Matrix::row_vector(dg[k].clone()))];
                    if let Some(d) = out.distill {
                        seeds.push((d, Matrix::filled(1, 1, distill_seed)));
                    }
                    let g = tape.backward(&seeds);
                    collect_grads(tape, &g, vars)
                })
                .collect();
            for part in &parts {
                let src = part.named();
                for (k, (_, dst)) in sum.named_mut().into_iter().enumerate() {
                    dst.add_assign(src[k].1);
                }
            }
        }
        Some(sum)
    } else {
        None
    };

    Ok(BatchResult {
        loss: total,
        retr,
        distill,
        signature: sig.finish(),
        detached: forwards.into_iter().map(|(_, _, o)| o.detached).collect(),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub places_per_batch: usize,
    pub views_per_batch: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Held-out Recall@1 after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: PAPER_LR,
            adamw: AdamWConfig::default(),
            places_per_batch: 15,
            views_per_batch: 4,
            seed: 0,
            loss: LossConfig::default(),
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0) {
            return domain("learning rate must be non-negative");
        }
        if self.places_per_batch == 0 || self.views_per_batch == 0 {
            return domain("batch shape must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.places_per_batch * self.views_per_batch
    }
}

/// One row of the metrics trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub retr: f64,
    pub distill: f64,
    pub weights: Vec<f64>,
    /// Held-out Recall@1 at full retention; NaN when evaluation is off.
    pub recall_at_1: f64,
}

pub fn trace_csv(trace: &[EpochMetrics]) -> String {
    let tiers = trace.first().map_or(0, |m| m.weights.len());
    let mut out = String::from("epoch,L_retr,L_distill");
    for t in 0..tiers {
        out.push_str(&format!(",w_{t}"));
    }
    out.push_str(",recall_at_1\n");
    for m in trace {
        out.push_str(&format!("{},{},{}", m.epoch, m.retr, m.distill));
        for w in &m.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push_str(&format!(",{}\n", m.recall_at_1));
    }
    out
}

/// Which tensors the optimizer may touch: every head, the final norm, and the last
/// `trainable_last_k` blocks (plus the embeddings when all blocks train).
pub fn trainable_mask(params: &ModelParams, cfg: &ModelConfig) -> Vec<bool> {
    let depth = cfg.encoder.depth;
    let first = depth - cfg.encoder.trainable_last_k;
    params
        .named()
        .iter()
        .map(|(name, _)| match name.strip_prefix("encoder.") {
            None => true,
            Some(rest) => match rest.strip_prefix("blocks.") {
                Some(b) => b.split('.').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i >= first),
                None if rest.starts_with("final_") => true,
                None => first == 0,
            },
        })
        .collect()
}

pub struct Trainer<'d> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub trace: Vec<EpochMetrics>,
    pub split: Split,
    data: &'d Dataset,
    patches: Vec<Matrix>,
    opt: AdamW,
    mask: Vec<bool>,
    rng: SeededRng,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        let split = data.split(HELD_OUT_FRACTION)?;
        let patches = data
            .images
            .iter()
            .map(|img| patchify(img, &model.encoder))
            .collect::<Result<Vec<_>>>()?;
        let root = SeededRng::new(cfg.seed);
        let params = ModelParams::init(&model, cfg.seed);
        let opt = AdamW::new(cfg.adamw.clone(), &params);
        let mask = trainable_mask(&params, &model);
        Ok(Self {
            model,
            params,
            trace: Vec::new(),
            split,
            data,
            patches,
            opt,
            mask,
            rng: root.split(1),
            cfg,
        })
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut places = self.split.train_places.clone();
        self.rng.shuffle(&mut places);
        let views = self.data.views();
        let k = self.cfg.views_per_batch.min(views);
        places
            .chunks(self.cfg.places_per_batch)
            .map(|chunk| {
                chunk
                    .iter()
                    .flat_map(|&pl| {
                        let mut vs = self.rng.sample_indices(views, k);
                        vs.sort_unstable();
                        vs.into_iter().map(move |v| pl * views + v)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.split.train_places.len().div_ceil(self.cfg.places_per_batch)
    }

    /// Mean distillation loss over the first view of every training place.
    pub fn probe_distill(&self) -> Result<f64> {
        let idx: Vec<usize> = self
            .split
            .train_places
            .iter()
            .map(|&pl| self.data.index(pl, 0))
            .collect();
        let patches: Vec<&Matrix> = idx.iter().map(|&i| &self.patches[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels[i]).collect();
        Ok(batch_loss(&self.params, &self.model, &self.cfg.loss, &patches, &labels, None, false)?.distill)
    }

    pub fn held_out_recall(&self) -> Result<f64> {
        let r = evaluate(&self.params, &self.model, self.data, &self.split, None, &[1])?;
        Ok(r.recalls[0])
    }

    /// Runs all epochs. On divergence the trace so far stays in `self.trace`.
    pub fn run(&mut self) -> Result<()> {
        let total_steps = self.cfg.epochs * self.steps_per_epoch();
        let mut step = 0;
        for epoch in 1..=self.cfg.epochs {
            let mut retr = 0.0;
            let mut distill = 0.0;
            let batches = self.batches();
            for (s, batch) in batches.iter().enumerate() {
                let patches: Vec<&Matrix> = batch.iter().map(|&i| &self.patches[i]).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| self.data.labels[i]).collect();
                let res = batch_loss(&self.params, &self.model, &self.cfg.loss, &patches, &labels, None, true)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::Diverged {
                            epoch,
                            step: s,
                            loss: f64::NAN,
                        },
                        other => other,
                    })?;
                let grads = res.grads.expect("gradients requested");
                if !res.loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: s,
                        loss: res.loss,
                    });
                }
                let lr = linear_decay(self.cfg.lr, step, total_steps);
                self.opt.update(&mut self.params, &grads, lr, &self.mask);
                retr += res.retr;
                distill += res.distill;
                step += 1;
            }
            let n = batches.len().max(1) as f64;
            let recall_at_1 = if self.cfg.eval_each_epoch {
                self.held_out_recall()?
            } else {
                f64::NAN
            };
            self.trace.push(EpochMetrics {
                epoch,
                retr: retr / n,
                distill: distill / n,
                weights: self.params.tier_weights(self.model.aggregator.tiers.floor),
                recall_at_1,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochMetrics>,
    pub distill_initial: f64,
    pub distill_final: f64,
}

/// Trains from scratch and reports the probe distillation loss before and after.
pub fn train(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, model.clone(), cfg.clone())?;
    let distill_initial = t.probe_distill()?;
    t.run()?;
    let distill_final = t.probe_distill()?;
    Ok(TrainOutcome {
        params: t.params,
        trace: t.trace,
        distill_initial,
        distill_final,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    pub samples_per_tensor: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rel_tol: 1e-4,
            samples_per_tensor: 20,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Samples rejected because a perturbation flipped a discrete decision.
    pub skipped: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn violations(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_err < self.rel_tol)).collect()
    }

    /// Largest relative error per tensor, in parameter order.
    pub fn per_tensor(&self) -> Vec<(String, f64, usize)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((n, m, c)) if *n == e.name => {
                    *m = m.max(e.rel_err);
                    *c += 1;
                }
                _ => out.push((e.name.clone(), e.rel_err, 1)),
            }
        }
        out
    }
}

/// Compares the analytic gradient of the batch loss with central differences. The teacher
/// importance and the student's input are frozen at the base point, matching their
/// treatment as constants, and
/// perturbations that change any discrete decision (ReLU pattern, clamp, tier order) are
/// resampled.
pub fn grad_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: &LossConfig,
    patches: &[&Matrix],
    labels: &[usize],
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = batch_loss(params, cfg, loss, patches, labels, None, true)?;
    let grads = base.grads.expect("gradients requested");
    let grads = grads.named();
    let frozen = base.detached;
    let mut work = params.clone();
    let mut rng = SeededRng::new(gc.seed);
    let mut report = GradCheckReport {
        rel_tol: gc.rel_tol,
        ..Default::default()
    };
    let names: Vec<(String, usize)> = params.named().iter().map(|(n, m)| (n.clone(), m.len())).collect();
    let eval = |p: &ModelParams| batch_loss(p, cfg, loss, patches, labels, Some(&frozen), false);
    for (t, (name, len)) in names.iter().enumerate() {
        let mut order: Vec<usize> = (0..*len).collect();
        rng.shuffle(&mut order);
        let mut accepted = 0;
        for idx in order {
            if accepted == gc.samples_per_tensor {
                break;
            }
            let orig = work.named()[t].1.data()[idx];
            work.named_mut()[t].1.data_mut()[idx] = orig + gc.h;
            let plus = eval(&work)?;
            work.named_mut()[t].1.data_mut()[idx] = orig - gc.h;
            let minus = eval(&work)?;
            work.named_mut()[t].1.data_mut()[idx] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * gc.h);
            let analytic = grads[t].1.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(gc.floor);
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_err: (analytic - numeric).abs() / denom,
            });
            accepted += 1;
        }
    }
    Ok(report)
}
