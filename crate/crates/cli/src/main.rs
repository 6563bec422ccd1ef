use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use weitop::aggregation::TierConfig;
use weitop::data::{make_synth_dataset_with, Dataset, SynthConfig, BENCH_DISTRACTOR_FRAC, BENCH_NOISE, HELD_OUT_FRACTION};
use weitop::io::{load_dataset, save_dataset, write_grid_csv, write_mask_pgm, write_pgm, Checkpoint, TokenFile};
use weitop::model::{aggregate_tokens, describe, prune_preview, ModelConfig};
use weitop::pruning::{teacher_importance, validate_rho, PruneSettings, Selector, DEFAULT_KAPPA, DEFAULT_TEMPERATURE};
use weitop::retrieval::{evaluate, rho_sweep, SweepConfig};
use weitop::sinkhorn::{DEFAULT_EPSILON, DEFAULT_MAX_ITERS};
use weitop::training::{trace_csv, train, LossConfig, TrainConfig, DEFAULT_GAMMA, TOY_LR};

const THREADS_VAR: &str = "WEITOP_THREADS";

#[derive(Parser)]
#[command(name = "weitop", version, about = "Weighted OT aggregation with self-distilled token pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic benchmark and write a checkpoint plus the epoch trace.
    Train(TrainArgs),
    /// Held-out recall at one retention ratio.
    Eval(EvalArgs),
    /// Recall, latency and FLOPs over retention ratios (and optionally prune layers).
    Sweep(SweepArgs),
    /// Per-patch grid of one image as PGM and CSV.
    ExportHeatmap(HeatmapArgs),
    /// Global descriptor of a token file.
    Aggregate(AggregateArgs),
    /// Encoder output of one image as a token file.
    DumpTokens(DumpArgs),
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    places: usize,
    #[arg(long, default_value_t = 6)]
    views: usize,
    #[arg(long, default_value_t = BENCH_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = BENCH_DISTRACTOR_FRAC)]
    distractor_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig::new(self.places, self.views, self.noise, self.distractor_frac, self.seed)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: SynthArgs,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    /// Tier sizes, most important first; must sum to --clusters.
    #[arg(long, value_delimiter = ',')]
    tiers: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    sinkhorn_iters: usize,
    /// Ghost-row penalty in the cluster importance.
    #[arg(long, default_value_t = weitop::aggregation::DEFAULT_GHOST_PENALTY)]
    lambda_ghost: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temp: f64,
    #[arg(long, default_value_t = TOY_LR)]
    lr: f64,
    /// Output directory for checkpoint.wadc and trace.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file; defaults to regenerating the checkpoint's training data.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: f64,
    /// Block after which pruning fires; defaults to the checkpoint's setting.
    #[arg(long)]
    prune_layer: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Learned,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    prune: PruneArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    topk: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SelectorArg::Learned)]
    selector: SelectorArg,
    /// Seed of the random selector.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.95,0.7,0.5,0.4")]
    rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    prune_layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: f64,
    /// Timed passes over the queries per row; 0 skips timing.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = SelectorArg::Learned)]
    selector: SelectorArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeatmapKind {
    AbsorbedMass,
    PruneScores,
    KeptMask,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    prune: PruneArgs,
    #[arg(long, default_value_t = 0)]
    image_index: usize,
    #[arg(long, value_enum)]
    what: HeatmapKind,
    /// Output prefix; writes <out>.pgm and <out>.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    /// Descriptor CSV (one line); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    prune: PruneArgs,
    #[arg(long, default_value_t = 0)]
    image_index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: SynthArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportHeatmap(a) => cmd_export_heatmap(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::DumpTokens(a) => cmd_dump_tokens(a),
        Command::GenData(a) => cmd_gen_data(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for divergence or non-finite activations, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let diverged = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<weitop::Error>(),
            Some(weitop::Error::Diverged { .. } | weitop::Error::NonFinite { .. })
        )
    });
    if diverged {
        3
    } else {
        2
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_VAR} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Tiers in the 6:5:4:1 proportion for multiples of 16 clusters.
fn default_tiers(clusters: usize) -> Result<Vec<usize>> {
    if clusters == 0 || clusters % 16 != 0 {
        return Err(anyhow!("--tiers is required when --clusters is not a multiple of 16"));
    }
    let s = clusters / 16;
    Ok(vec![6 * s, 5 * s, 4 * s, s])
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let tiers = match &a.tiers {
        Some(t) => t.clone(),
        None => default_tiers(a.clusters)?,
    };
    let mut model = ModelConfig::toy();
    model.aggregator.clusters = a.clusters;
    model.aggregator.tiers = TierConfig::uniform(&tiers);
    model.aggregator.tiers.ghost_penalty = a.lambda_ghost;
    model.epsilon = a.epsilon;
    model.sinkhorn_iters = a.sinkhorn_iters;
    model.validate()?;
    let loss = LossConfig {
        gamma: a.gamma,
        temperature: a.temp,
        ..LossConfig::default()
    };
    let synth = a.data.config();
    let data = make_synth_dataset_with(&synth)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.data.seed,
        loss: loss.clone(),
        ..TrainConfig::default()
    };
    let outcome = train(&data, &model, &tc)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = Checkpoint {
        model,
        loss,
        data: Some(synth),
        params: outcome.params,
    };
    let ckpt_path = a.out.join("checkpoint.wadc");
    ckpt.save(&ckpt_path)?;
    weitop::io::write_text(a.out.join("trace.csv"), &trace_csv(&outcome.trace))?;
    for m in &outcome.trace {
        println!(
            "epoch {}: L_retr {:.5} L_distill {:.5} R@1 {:.4}",
            m.epoch, m.retr, m.distill, m.recall_at_1
        );
    }
    println!(
        "probe L_distill {:.5} -> {:.5}",
        outcome.distill_initial, outcome.distill_final
    );
    println!("checkpoint {} (checksum {:016x})", ckpt_path.display(), ckpt.checksum()?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_source(s: &Source) -> Result<(Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(&s.ckpt)?;
    let data = match (&s.dataset, &ckpt.data) {
        (Some(path), _) => load_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))?,
        (None, Some(cfg)) => make_synth_dataset_with(cfg)?,
        (None, None) => return Err(anyhow!("checkpoint records no dataset; pass --dataset")),
    };
    let enc = &ckpt.model.encoder;
    let c = &data.config;
    if (c.image_side, c.patch_size, c.channels) != (enc.image_side, enc.patch_size, enc.channels) {
        return Err(weitop::Error::Domain("dataset geometry does not match the encoder".into()).into());
    }
    Ok((ckpt, data))
}

fn prune_settings(p: &PruneArgs, model: &ModelConfig, selector: Selector) -> Result<PruneSettings> {
    validate_rho(p.rho)?;
    let mut s = PruneSettings::new(p.rho, p.prune_layer.unwrap_or(model.encoder.prune_layer));
    s.kappa = p.kappa;
    s.selector = selector;
    s.validate(model.encoder.depth)?;
    Ok(s)
}

fn selector(kind: SelectorArg, seed: u64) -> Selector {
    match kind {
        SelectorArg::Learned => Selector::Learned,
        SelectorArg::Random => Selector::Random { seed },
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ckpt, data) = load_source(&a.source)?;
    let settings = prune_settings(&a.prune, &ckpt.model, selector(a.selector, a.seed))?;
    if a.topk.is_empty() || a.topk.contains(&0) {
        return Err(weitop::Error::Domain("--topk values must be positive".into()).into());
    }
    let split = data.split(HELD_OUT_FRACTION)?;
    let prune = (settings.rho < 1.0).then_some(&settings);
    let report = evaluate(&ckpt.params, &ckpt.model, &data, &split, prune, &a.topk)?;
    let mut csv = String::from("k,recall\n");
    for (k, r) in report.ks.iter().zip(&report.recalls) {
        println!("R@{k} {r:.4}");
        csv.push_str(&format!("{k},{r}\n"));
    }
    println!(
        "queries {} references {} rho {} layer {}",
        report.queries, report.references, settings.rho, settings.layer
    );
    if let Some(out) = &a.out {
        weitop::io::write_text(out, &csv)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (ckpt, data) = load_source(&a.source)?;
    let layers = a
        .prune_layers
        .clone()
        .unwrap_or_else(|| vec![ckpt.model.encoder.prune_layer]);
    for &rho in &a.rhos {
        validate_rho(rho)?;
    }
    let mut cfg = SweepConfig::new(a.rhos.clone(), layers);
    cfg.kappa = a.kappa;
    cfg.repeats = a.repeats;
    cfg.selector = selector(a.selector, a.seed);
    let split = data.split(HELD_OUT_FRACTION)?;
    let result = rho_sweep(&ckpt.params, &ckpt.model, &data, &split, &cfg)?;
    let csv = result.to_csv();
    match &a.out {
        Some(out) => weitop::io::write_text(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_export_heatmap(a: HeatmapArgs) -> Result<()> {
    let (ckpt, data) = load_source(&a.source)?;
    let settings = prune_settings(&a.prune, &ckpt.model, Selector::Learned)?;
    let image = data
        .images
        .get(a.image_index)
        .ok_or_else(|| weitop::Error::Domain(format!("image index {} out of range", a.image_index)))?;
    let key = a.image_index as u64;
    let (model, params) = (&ckpt.model, &ckpt.params);
    let g = model.encoder.grid_side();
    let n0 = g * g;
    let mut pgm = Vec::new();
    let values: Vec<f64> = match a.what {
        HeatmapKind::AbsorbedMass => {
            let prune = (settings.rho < 1.0).then_some(&settings);
            let d = describe(params, model, image, prune, key)?;
            let agg = &d.aggregation;
            let mass = teacher_importance(&agg.plan, &agg.weights, &agg.tau)?;
            let mut grid = vec![0.0; n0];
            for (row, &pos) in d.tokens.kept_indices.iter().enumerate() {
                grid[pos] = mass[row];
            }
            write_pgm(&mut pgm, &grid, g, g)?;
            grid
        }
        HeatmapKind::PruneScores => {
            let scores = prune_preview(params, model, image, &settings, key)?.scores;
            write_pgm(&mut pgm, &scores, g, g)?;
            scores
        }
        HeatmapKind::KeptMask => {
            let kept = prune_preview(params, model, image, &settings, key)?.kept;
            let mut mask = vec![false; n0];
            for i in kept {
                mask[i] = true;
            }
            write_mask_pgm(&mut pgm, &mask, g, g)?;
            mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
        }
    };
    let mut csv = Vec::new();
    write_grid_csv(&mut csv, &values, g)?;
    fs::write(with_ext(&a.out, "pgm"), pgm)?;
    fs::write(with_ext(&a.out, "csv"), csv)?;
    Ok(())
}

fn cmd_aggregate(a: AggregateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let tokens = TokenFile::load(&a.tokens)
        .with_context(|| format!("cannot load token file {}", a.tokens.display()))?
        .to_tokens()?;
    if tokens.width() != ckpt.model.encoder.width {
        return Err(weitop::Error::Domain(format!(
            "token width {} does not match the encoder width {}",
            tokens.width(),
            ckpt.model.encoder.width
        ))
        .into());
    }
    let agg = aggregate_tokens(&ckpt.params, &ckpt.model, &tokens)?;
    let line: Vec<String> = agg.descriptor.values.iter().map(|v| v.to_string()).collect();
    let line = line.join(",") + "\n";
    match &a.out {
        Some(out) => weitop::io::write_text(out, &line)?,
        None => std::io::stdout().write_all(line.as_bytes())?,
    }
    Ok(())
}

fn cmd_dump_tokens(a: DumpArgs) -> Result<()> {
    let (ckpt, data) = load_source(&a.source)?;
    let settings = prune_settings(&a.prune, &ckpt.model, Selector::Learned)?;
    let image = data
        .images
        .get(a.image_index)
        .ok_or_else(|| weitop::Error::Domain(format!("image index {} out of range", a.image_index)))?;
    let prune = (settings.rho < 1.0).then_some(&settings);
    let d = describe(&ckpt.params, &ckpt.model, image, prune, a.image_index as u64)?;
    TokenFile::from_tokens(&d.tokens).save(&a.out)?;
    println!("{} tokens of width {}", d.tokens.len(), d.tokens.width());
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let data = make_synth_dataset_with(&a.data.config())?;
    save_dataset(&data, &a.out)?;
    println!("{} images, checksum {:016x}", data.len(), data.checksum());
    Ok(())
}
