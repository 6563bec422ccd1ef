//! Encoder, aggregation head and student predictor wired together, for inference and for
//! the differentiable training pass.

use crate::aggregation::{
    assemble_descriptor, assemble_tape, assign_tiers, cluster_importance, cluster_importance_from,
    project_tokens, tier_weights_raw, tier_weights_tape, AggregatorConfig, AggregatorParams,
    GlobalDescriptor, TierConfig,
};
use crate::encoder::{forward_tape, patchify, EncoderConfig, EncoderParams, Image, TokenSet};
use crate::error::{domain, Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::pruning::{distill_tape, init_student, teacher_importance, PruneDecision, PruneSettings, StudentParams};
use crate::sinkhorn::{
    build_extended_scores, default_marginals, sinkhorn_solve, sinkhorn_unrolled, SinkhornConfig,
    TransportPlan, DEFAULT_EPSILON, DEFAULT_MAX_ITERS,
};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub student_hidden: usize,
    pub epsilon: f64,
    /// Fixed iteration count of the differentiable solve; also the inference iteration cap.
    pub sinkhorn_iters: usize,
}

impl ModelConfig {
    /// Toy encoder, 16 clusters in tiers of 6/5/4/1, 32-dim cluster blocks, 64-dim CLS part.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            aggregator: AggregatorConfig {
                clusters: 16,
                d_low: 32,
                d_cls: 64,
                hidden: crate::aggregation::DEFAULT_HIDDEN,
                tiers: TierConfig::uniform(&[6, 5, 4, 1]),
            },
            student_hidden: crate::aggregation::DEFAULT_HIDDEN,
            epsilon: DEFAULT_EPSILON,
            sinkhorn_iters: DEFAULT_MAX_ITERS,
        }
    }

    /// Small enough for finite-difference checks: 16 tokens, 4 clusters in 4 tiers.
    pub fn grad_check() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            aggregator: AggregatorConfig {
                clusters: 4,
                d_low: 8,
                d_cls: 8,
                hidden: 32,
                tiers: TierConfig::uniform(&[1, 1, 1, 1]),
            },
            student_hidden: 32,
            epsilon: DEFAULT_EPSILON,
            sinkhorn_iters: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregator.validate()?;
        if self.student_hidden == 0 {
            return domain("student hidden width must be positive");
        }
        if !(self.epsilon > 0.0) || self.sinkhorn_iters == 0 {
            return domain("epsilon and the Sinkhorn iteration count must be positive");
        }
        Ok(())
    }

    pub fn descriptor_len(&self) -> usize {
        self.aggregator.descriptor_len()
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.sinkhorn_iters,
            ..SinkhornConfig::default()
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Matrix> {
    pub encoder: EncoderParams<T>,
    pub aggregator: AggregatorParams<T>,
    pub student: StudentParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<'s, U>(&'s self, f: &mut dyn FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map("encoder", f),
            aggregator: self.aggregator.map("aggregator", f),
            student: self.student.map("student", f),
        }
    }

    pub fn visit_mut<'s>(&'s mut self, f: &mut dyn FnMut(&str, &'s mut T)) {
        self.encoder.visit_mut("encoder", f);
        self.aggregator.visit_mut("aggregator", f);
        self.student.visit_mut("student", f);
    }

    /// `(name, tensor)` in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

impl ModelParams<Matrix> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let root = SeededRng::new(seed);
        let width = cfg.encoder.width;
        Self {
            encoder: EncoderParams::init(&cfg.encoder, &mut root.split(1)),
            aggregator: AggregatorParams::init(width, &cfg.aggregator, &mut root.split(2)),
            student: init_student(width, cfg.student_hidden, &mut root.split(3)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelParams<Var> {
        self.map(&mut |_, m| tape.param(m))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    /// Current tier weights.
    pub fn tier_weights(&self, floor: f64) -> Vec<f64> {
        tier_weights_raw(
            self.aggregator.theta0.data()[0],
            self.aggregator.theta_delta.data(),
            floor,
        )
        .0
    }
}

/// Everything produced while describing one image.
#[derive(Clone, Debug)]
pub struct Description {
    pub descriptor: GlobalDescriptor,
    pub tokens: TokenSet,
    pub aggregation: Aggregation,
    pub decision: Option<PruneDecision>,
}

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub descriptor: GlobalDescriptor,
    pub plan: TransportPlan,
    pub alpha: Vec<f64>,
    pub tau: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Aggregates an encoder output into a global descriptor.
pub fn aggregate_tokens(params: &ModelParams, cfg: &ModelConfig, tokens: &TokenSet) -> Result<Aggregation> {
    let agg = &params.aggregator;
    let (reduced, cls) = project_tokens(tokens, agg)?;
    let scores = agg.fs.forward(&reduced)?;
    let ext = build_extended_scores(&scores, agg.dustbin.data()[0])?;
    let marginals = default_marginals(tokens.len(), cfg.aggregator.clusters)?;
    let plan = sinkhorn_solve(&ext, &marginals, &cfg.sinkhorn())?;
    let tiers = &cfg.aggregator.tiers;
    let alpha = cluster_importance(&plan, tiers.ghost_penalty);
    let tau = assign_tiers(&alpha, &tiers.sizes)?;
    let weights = params.tier_weights(tiers.floor);
    let descriptor = assemble_descriptor(&plan, &reduced, &cls, &weights, &tau)?;
    Ok(Aggregation {
        descriptor,
        plan,
        alpha,
        tau,
        weights,
    })
}

/// Student logits for the patch rows of `tokens`.
pub fn student_logits(params: &ModelParams, patch_tokens: &Matrix) -> Result<Vec<f64>> {
    Ok(params.student.forward(patch_tokens)?.into_data())
}

/// Inference: image to global descriptor, pruning when `prune` asks for `ρ < 1`.
pub fn describe(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Image,
    prune: Option<&PruneSettings>,
    image_key: u64,
) -> Result<Description> {
    let mut enc = cfg.encoder.clone();
    let mut decision = None;
    let tokens = match prune {
        Some(settings) if settings.rho < 1.0 => {
            settings.validate(enc.depth)?;
            enc.prune_layer = settings.layer;
            let n0 = enc.num_patches();
            let mut hook = |tap: &Matrix| {
                let patch = tap.block(0, n0, 0, tap.cols());
                let logits = student_logits(params, &patch)?;
                let d = settings.decide(&logits, &patch, image_key)?;
                let kept = d.kept.clone();
                decision = Some(d);
                Ok(kept)
            };
            crate::encoder::forward(image, &params.encoder, &enc, Some(&mut hook))?
        }
        Some(settings) => {
            settings.validate(enc.depth)?;
            crate::encoder::forward(image, &params.encoder, &enc, None)?
        }
        None => crate::encoder::forward(image, &params.encoder, &enc, None)?,
    };
    let aggregation = aggregate_tokens(params, cfg, &tokens)?;
    Ok(Description {
        descriptor: aggregation.descriptor.clone(),
        tokens,
        aggregation,
        decision,
    })
}

/// Prune scores and kept set for an image, computed from the tokens after `layer`.
pub fn prune_preview(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Image,
    settings: &PruneSettings,
    image_key: u64,
) -> Result<PruneDecision> {
    settings.validate(cfg.encoder.depth)?;
    let patches = patchify(image, &cfg.encoder)?;
    let mut tape = Tape::new();
    let p = params.encoder.bind(&mut tape);
    let trace = forward_tape(&mut tape, &p, &cfg.encoder, &patches, settings.layer, None)?;
    let tap = tape.value(trace.tap.expect("tap layer is positive"));
    let n0 = cfg.encoder.num_patches();
    let patch = tap.block(0, n0, 0, tap.cols());
    let logits = student_logits(params, &patch)?;
    settings.decide(&logits, &patch, image_key)
}

/// Differentiable pass over one image.
pub struct TrainForward {
    /// Unit-norm descriptor, 1×D.
    pub descriptor: Var,
    /// Distillation loss, 1×1; absent when the prune layer is 0.
    pub distill: Option<Var>,
    /// Constants of the pass: the teacher and the student's input.
    pub detached: Detached,
}

/// Values that enter the loss as constants. Holding them fixed turns the loss into the
/// function whose gradient the tape computes, which is what finite differences need.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detached {
    pub teacher: Vec<f64>,
    /// Patch tokens after the hook layer.
    pub early: Option<Matrix>,
}

/// Records the training forward for one image. `frozen`, when given, replaces the detached
/// values that would otherwise be computed from this pass.
pub fn train_forward<'a>(
    tape: &mut Tape<'a>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    patches: &Matrix,
    temperature: f64,
    frozen: Option<&Detached>,
) -> Result<TrainForward> {
    let enc = &cfg.encoder;
    let n = enc.num_patches();
    let m = cfg.aggregator.clusters;
    let tiers = &cfg.aggregator.tiers;
    let trace = forward_tape(tape, &p.encoder, enc, patches, enc.prune_layer, None)?;
    let tokens = trace.tokens;
    let patch = tape.slice_rows(tokens, 0, n);
    let cls = tape.slice_rows(tokens, n, n + 1);

    let agg = &p.aggregator;
    let reduced = agg.f1.apply(tape, patch);
    let cls_red = agg.f2.apply(tape, cls);
    let scores = agg.fs.apply(tape, reduced);
    let col = tape.broadcast(agg.dustbin, n, 1);
    let top = tape.concat_cols(&[scores, col]);
    let row = tape.broadcast(agg.dustbin, 1, m + 1);
    let ext = tape.concat_rows(&[top, row]);
    let marginals = default_marginals(n, m)?;
    let plan = sinkhorn_unrolled(tape, ext, &marginals, cfg.epsilon, cfg.sinkhorn_iters);
    if !tape.value(plan).is_finite() {
        return Err(Error::NonFinite {
            stage: "transport plan".into(),
        });
    }
    let alpha = cluster_importance_from(tape.value(plan), tiers.ghost_penalty);
    let tau = assign_tiers(&alpha, &tiers.sizes)?;
    tape.record_discrete(tau.iter().map(|&t| t as u64));
    let w = tier_weights_tape(tape, agg.theta0, agg.theta_delta, tiers.floor);
    let cluster_w = tape.gather_cols(w, &tau);
    let descriptor = assemble_tape(tape, plan, reduced, cls_red, cluster_w);

    let (distill, detached) = match trace.tap {
        Some(tap) => {
            let teacher = match frozen {
                Some(f) => f.teacher.clone(),
                None => {
                    let plan_values = TransportPlan {
                        plan: tape.value(plan).clone(),
                        log_u: vec![],
                        log_v: vec![],
                        epsilon: cfg.epsilon,
                        iterations_used: cfg.sinkhorn_iters,
                        max_marginal_violation: f64::NAN,
                        converged: false,
                    };
                    let weights = tape.value(w).data().to_vec();
                    teacher_importance(&plan_values, &weights, &tau)?
                }
            };
            // The student reads a detached copy of the hook-layer tokens.
            let early = match frozen.and_then(|f| f.early.clone()) {
                Some(e) => e,
                None => tape.value(tap).block(0, n, 0, enc.width),
            };
            let x = tape.constant(early.clone());
            let z = p.student.apply(tape, x);
            let z = tape.reshape(z, 1, n);
            let loss = distill_tape(tape, z, &teacher, temperature);
            (
                Some(loss),
                Detached {
                    teacher,
                    early: Some(early),
                },
            )
        }
        None => (None, Detached::default()),
    };
    Ok(TrainForward {
        descriptor,
        distill,
        detached,
    })
}

/// Gradients of every parameter after a backward sweep; unreached tensors get zeros.
pub fn collect_grads(
    tape: &Tape<'_>,
    grads: &crate::tape::Gradients,
    vars: &ModelParams<Var>,
) -> ModelParams<Matrix> {
    vars.map(&mut |_, v| match grads.get(*v) {
        Some(g) => g.clone(),
        None => {
            let (r, c) = tape.value(*v).shape();
            Matrix::zeros(r, c)
        }
    })
}
