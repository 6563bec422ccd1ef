use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use weitop::io::{read_pgm, Checkpoint, TokenFile};
use weitop::model::{aggregate_tokens, describe, ModelConfig, ModelParams};
use weitop::training::LossConfig;

fn weitop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weitop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = weitop(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    weitop(dir, args).status.code().expect("exit code")
}

const SMALL: &[&str] = &["--places", "10", "--views", "4", "--epochs", "2"];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out]);
    ok(dir, &args);
    dir.join(out).join("checkpoint.wadc")
}

#[test]
fn train_writes_checkpoint_and_one_trace_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    assert!(ck.exists());
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].starts_with("epoch,L_retr,L_distill,w_0"));
    assert_eq!(lines.len(), 1 + 2);
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.data.unwrap().places, 10);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a", &["--seed", "7"]);
    let b = train_small(dir.path(), "b", &["--seed", "7"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    let c = train_small(dir.path(), "c", &["--seed", "8"]);
    assert_ne!(std::fs::read(dir.path().join("a/checkpoint.wadc")).unwrap(), std::fs::read(c).unwrap());
}

#[test]
fn thread_count_does_not_change_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, out: &str| {
        let mut args = vec!["train"];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(&["--out", out]);
        let st = Command::new(env!("CARGO_BIN_EXE_weitop"))
            .current_dir(dir.path())
            .env("WEITOP_THREADS", threads)
            .args(&args)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(dir.path().join(out).join("checkpoint.wadc")).unwrap()
    };
    assert_eq!(run("1", "t1"), run("3", "t3"));
    let bad = Command::new(env!("CARGO_BIN_EXE_weitop"))
        .current_dir(dir.path())
        .env("WEITOP_THREADS", "zero")
        .args(["gen-data", "--out", "d.wsyn"])
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn tier_flags_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    train_small(
        dir.path(),
        "wide",
        &["--clusters", "64", "--tiers", "24,20,16,4"],
    );
    let ck = Checkpoint::load(dir.path().join("wide/checkpoint.wadc")).unwrap();
    assert_eq!(ck.model.aggregator.tiers.sizes, vec![24, 20, 16, 4]);
    assert_eq!(
        code(dir.path(), &["train", "--clusters", "64", "--tiers", "1,1", "--out", "bad"]),
        2
    );
    assert_eq!(code(dir.path(), &["train", "--epochs", "x"]), 2);
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn eval_identity_kappa_default_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    let ck = ck.to_str().unwrap();
    let at_one = ok(dir.path(), &["eval", "--ckpt", ck, "--rho", "1.0"]);
    assert!(at_one.contains("R@1 ") && at_one.contains("R@5 "));
    // At ρ = 1 the hook is never installed, so the prune layer cannot matter.
    let other_layer = ok(dir.path(), &["eval", "--ckpt", ck, "--rho", "1.0", "--prune-layer", "3"]);
    assert_eq!(at_one.replace("layer 3", "layer 1"), other_layer.replace("layer 3", "layer 1"));
    let default_kappa = ok(dir.path(), &["eval", "--ckpt", ck, "--rho", "0.5"]);
    let explicit = ok(dir.path(), &["eval", "--ckpt", ck, "--rho", "0.5", "--kappa", "0.5"]);
    assert_eq!(default_kappa, explicit);
    ok(dir.path(), &["eval", "--ckpt", ck, "--topk", "1,2,3", "--out", "rep.csv"]);
    let rep = std::fs::read_to_string(dir.path().join("rep.csv")).unwrap();
    assert_eq!(rep.lines().count(), 4);
    assert_eq!(code(dir.path(), &["eval", "--ckpt", ck, "--rho", "0"]), 2);
    assert_eq!(code(dir.path(), &["eval", "--ckpt", ck, "--rho", "1.5"]), 2);
    assert_eq!(code(dir.path(), &["eval", "--ckpt", "missing.wadc"]), 2);
    assert_eq!(code(dir.path(), &["eval", "--ckpt", ck, "--rho", "0.5", "--prune-layer", "4"]), 2);
}

#[test]
fn dataset_file_matches_the_recorded_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    let ck = ck.to_str().unwrap();
    ok(
        dir.path(),
        &["gen-data", "--places", "10", "--views", "4", "--out", "d.wsyn"],
    );
    let implicit = ok(dir.path(), &["eval", "--ckpt", ck, "--rho", "0.7"]);
    let explicit = ok(dir.path(), &["eval", "--ckpt", ck, "--rho", "0.7", "--dataset", "d.wsyn"]);
    assert_eq!(implicit, explicit);
}

fn sweep_recalls(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("{},{},{}", c[0], c[1], c[2])
        })
        .collect()
}

#[test]
fn sweep_rows_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    let ck = ck.to_str().unwrap();
    let single = ok(dir.path(), &["sweep", "--ckpt", ck, "--repeats", "1"]);
    let lines: Vec<&str> = single.lines().collect();
    assert_eq!(lines[0], "rho,recall_at_1,recall_at_5,latency_ms_median,flops");
    assert_eq!(lines.len(), 1 + 5);
    let rhos: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rhos, ["1", "0.95", "0.7", "0.5", "0.4"]);
    ok(
        dir.path(),
        &["sweep", "--ckpt", ck, "--rhos", "1,0.4", "--prune-layers", "1,2,3", "--repeats", "0", "--out", "s.csv"],
    );
    let multi = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(multi.lines().next().unwrap().ends_with(",prune_layer"));
    assert_eq!(multi.lines().count(), 1 + 2 * 3);
    let again = ok(dir.path(), &["sweep", "--ckpt", ck, "--rhos", "1,0.4", "--prune-layers", "1,2,3", "--repeats", "2"]);
    assert_eq!(sweep_recalls(&multi), sweep_recalls(&again));
    assert_eq!(code(dir.path(), &["sweep", "--ckpt", ck, "--rhos", "1,0"]), 2);
}

#[test]
fn heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    let ck = ck.to_str().unwrap();
    ok(dir.path(), &["export-heatmap", "--ckpt", ck, "--what", "kept-mask", "--out", "km"]);
    let (w, h, levels) = read_pgm(&std::fs::read_to_string(dir.path().join("km.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 4));
    assert_eq!(levels, vec![255; 16]);

    ok(
        dir.path(),
        &["export-heatmap", "--ckpt", ck, "--what", "kept-mask", "--rho", "0.5", "--out", "half"],
    );
    let (_, _, levels) = read_pgm(&std::fs::read_to_string(dir.path().join("half.pgm")).unwrap()).unwrap();
    assert_eq!(levels.iter().filter(|&&v| v == 255).count(), 8);
    assert!(levels.iter().all(|&v| v == 0 || v == 255));

    ok(
        dir.path(),
        &["export-heatmap", "--ckpt", ck, "--what", "prune-scores", "--image-index", "3", "--out", "ps"],
    );
    let csv = std::fs::read_to_string(dir.path().join("ps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));
    let (_, _, levels) = read_pgm(&std::fs::read_to_string(dir.path().join("ps.pgm")).unwrap()).unwrap();
    assert!(levels.contains(&0) && levels.contains(&255));

    assert_eq!(code(dir.path(), &["export-heatmap", "--ckpt", ck, "--what", "nope", "--out", "x"]), 2);
    assert_eq!(
        code(dir.path(), &["export-heatmap", "--ckpt", ck, "--what", "kept-mask", "--image-index", "40", "--out", "x"]),
        2
    );
}

#[test]
fn absorbed_mass_with_unit_weights_is_the_plan_row_sum() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    let mut c = Checkpoint::load(&ck).unwrap();
    // softplus(−800) is exactly 0, so every tier weight is exp(0) = 1.
    c.params.aggregator.theta0.data_mut()[0] = 0.0;
    for d in c.params.aggregator.theta_delta.data_mut() {
        *d = -800.0;
    }
    assert!(c.params.tier_weights(1e-3).iter().all(|&w| w == 1.0));
    let path = dir.path().join("unit.wadc");
    c.save(&path).unwrap();
    ok(
        dir.path(),
        &["export-heatmap", "--ckpt", path.to_str().unwrap(), "--what", "absorbed-mass", "--image-index", "5", "--out", "am"],
    );
    let data = weitop::data::make_synth_dataset_with(c.data.as_ref().unwrap()).unwrap();
    let d = describe(&c.params, &c.model, &data.images[5], None, 5).unwrap();
    let plan = &d.aggregation.plan.plan;
    let m = c.model.aggregator.clusters;
    let expected: Vec<f64> = (0..16).map(|i| plan.row(i)[..m].iter().sum()).collect();
    let csv = std::fs::read_to_string(dir.path().join("am.csv")).unwrap();
    let got: Vec<f64> = csv
        .lines()
        .flat_map(|l| l.split(','))
        .map(|s| s.parse().unwrap())
        .collect();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-15, "{g} vs {e}");
    }
}

#[test]
fn dumped_tokens_aggregate_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path(), "run", &[]);
    let cks = ck.to_str().unwrap();
    ok(dir.path(), &["dump-tokens", "--ckpt", cks, "--image-index", "2", "--rho", "0.5", "--out", "t.wtks"]);
    let tf = TokenFile::load(dir.path().join("t.wtks")).unwrap();
    assert_eq!((tf.n, tf.d, tf.has_cls), (8, 64, true));
    let mut bytes = Vec::new();
    tf.write_to(&mut bytes).unwrap();
    assert_eq!(bytes, std::fs::read(dir.path().join("t.wtks")).unwrap());

    let line = ok(dir.path(), &["aggregate", "--ckpt", cks, "--tokens", "t.wtks"]);
    let got: Vec<f64> = line.trim().split(',').map(|s| s.parse().unwrap()).collect();
    let c = Checkpoint::load(&ck).unwrap();
    let expected = aggregate_tokens(&c.params, &c.model, &tf.to_tokens().unwrap()).unwrap();
    assert_eq!(got, expected.descriptor.values);
    assert_eq!(got.len(), c.model.descriptor_len());

    let cfg = ModelConfig::grad_check();
    let other = Checkpoint {
        model: cfg.clone(),
        loss: LossConfig::default(),
        data: None,
        params: ModelParams::init(&cfg, 0),
    };
    other.save(dir.path().join("nodata.wadc")).unwrap();
    assert_eq!(code(dir.path(), &["dump-tokens", "--ckpt", "nodata.wadc", "--out", "x.wtks"]), 2);
    std::fs::write(dir.path().join("junk.wtks"), b"JUNK").unwrap();
    assert_eq!(code(dir.path(), &["aggregate", "--ckpt", cks, "--tokens", "junk.wtks"]), 2);
}
