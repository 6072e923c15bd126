use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use resrep::checkpoint::{Checkpoint, ModelKind};
use resrep::flops::model_flops;
use resrep::reparam::insert_compactors;
use resrep::report::{reduction_pct, WidthReport};
use tempfile::TempDir;

const DATA: &[&str] = &["--noise", "0.5", "--train-samples", "512", "--test-samples", "500"];

fn resrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resrep"))
        .args(args)
        .env_remove("RESREP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = resrep(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_data<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(DATA).copied().collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_base(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&with_data(&[
        "train-base", "--arch", "miniconv", "--widths", "8,16,16", "--input-size", "8", "--epochs", "5", "--lr", "0.05",
        "--batch-size", "32", "--seed", seed, "--out", p(&out),
    ]));
    out
}

const RESREP_FLAGS: &[&str] = &[
    "--flops-target", "0.4", "--lambda", "3e-3", "--interval", "16", "--warmup-epochs", "1", "--epochs", "100", "--batch-size",
    "32", "--lr", "0.02",
];

fn run_resrep(base: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["resrep", "--base", p(base), "--out", p(out)];
    args.extend(RESREP_FLAGS);
    args.extend(extra);
    ok(&with_data(&args))
}

fn last_log_accuracy(log: &Path) -> f64 {
    let mut r = csv::Reader::from_path(log).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "accuracy").unwrap();
    r.records().last().unwrap().unwrap()[col].parse().unwrap()
}

#[test]
fn base_training_learns_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = train_base(dir.path(), "a.rsrp", "3");
    let b = train_base(dir.path(), "b.rsrp", "3");
    assert!(last_log_accuracy(&dir.path().join("a.log.csv")) > 0.9);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(dir.path().join("a.log.csv")).unwrap(), fs::read(dir.path().join("b.log.csv")).unwrap());
    let ck = Checkpoint::<f32>::load(&a).unwrap();
    assert_eq!(ck.meta.kind, ModelKind::Base);
    assert_eq!(ck.meta.arch.unwrap().widths, vec![8, 16, 16]);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.rsrp");
    let r = resrep(&["train-base", "--arch", "vgg16", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("vgg16"));

    let base = train_base(dir.path(), "base.rsrp", "0");
    for target in ["0", "1", "1.5", "-0.2"] {
        let r = resrep(&["resrep", "--base", p(&base), "--flops-target", target, "--out", p(&out)]);
        assert_eq!(r.status.code(), Some(2), "target {target}");
    }
    for lambda in ["0", "-1e-3"] {
        let r = resrep(&["ablate", "--base", p(&base), "--mode", "group-lasso", "--lambda", lambda, "--out", p(&out)]);
        assert_eq!(r.status.code(), Some(2), "lambda {lambda}");
    }
    assert!(!out.exists());
}

#[test]
fn data_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let base = train_base(dir.path(), "base.rsrp", "0");
    let empty = TempDir::new().unwrap();
    let r = resrep(&["eval", "--checkpoint", p(&base), "--data", "cifar10", "--data-dir", p(empty.path())]);
    assert_eq!(r.status.code(), Some(2));

    let r = Command::new(env!("CARGO_BIN_EXE_resrep"))
        .args(["eval", "--checkpoint", p(&base), "--data", "cifar10"])
        .env("RESREP_DATA_DIR", empty.path())
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains(p(empty.path())));

    let r = resrep(&["eval", "--checkpoint", p(&base), "--synthetic-dims", "1,8,8"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("channels"));
}

#[test]
fn identity_compactors_convert_to_the_same_widths() {
    let dir = TempDir::new().unwrap();
    let base = train_base(dir.path(), "base.rsrp", "0");
    let ck = Checkpoint::<f32>::load(&base).unwrap();
    let re = dir.path().join("identity.rsrp");
    Checkpoint::of_model(&insert_compactors(&ck.model).unwrap(), ck.meta.arch.clone(), 0).save(&re).unwrap();
    let conv = dir.path().join("conv.rsrp");
    ok(&with_data(&["convert", "--input", p(&re), "--out", p(&conv)]));
    let report: WidthReport = serde_json::from_slice(&fs::read(dir.path().join("conv.widths.json")).unwrap()).unwrap();
    assert!(report.layers.iter().all(|l| l.original == l.final_width));
    assert_eq!(report.reduction_pct, 0.0);
    assert_eq!(report.accuracy_before, report.accuracy_after);
    let csv = fs::read_to_string(dir.path().join("conv.widths.csv")).unwrap();
    assert!(csv.starts_with("index,name,original_width,final_width\n"));
    assert_eq!(csv.lines().count(), 1 + report.layers.len());
}

#[test]
fn fully_pruned_compactor_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let base = train_base(dir.path(), "base.rsrp", "0");
    let ck = Checkpoint::<f32>::load(&base).unwrap();
    let mut model = insert_compactors(&ck.model).unwrap();
    model.compactor_mut(1).unwrap().q.data_mut().fill(0.0);
    let re = dir.path().join("dead.rsrp");
    Checkpoint::of_model(&model, None, 0).save(&re).unwrap();
    let r = resrep(&["convert", "--input", p(&re), "--skip-eval", "--out", p(&dir.path().join("c.rsrp"))]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("target layer 1"));
}

#[test]
fn resrep_then_convert_is_lossless_and_meets_the_target() {
    let dir = TempDir::new().unwrap();
    let base = train_base(dir.path(), "base.rsrp", "0");
    let re = dir.path().join("rr.rsrp");
    run_resrep(&base, &re, &[]);
    let events = fs::read_to_string(dir.path().join("rr.events.jsonl")).unwrap();
    assert!(events.lines().count() >= 1);
    for line in events.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["masked"].is_array());
    }
    let trace = fs::read_to_string(dir.path().join("rr.trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,surviving_sq,pruned_sq\n"));
    assert_eq!(trace.lines().count(), 101);

    let conv = dir.path().join("conv.rsrp");
    ok(&with_data(&["convert", "--input", p(&re), "--out", p(&conv)]));
    let report: WidthReport = serde_json::from_slice(&fs::read(dir.path().join("conv.widths.json")).unwrap()).unwrap();
    assert!(report.reduction_pct >= 40.0, "{}", report.reduction_pct);

    let model = Checkpoint::<f32>::load(&conv).unwrap();
    assert_eq!(model.meta.kind, ModelKind::Converted);
    assert!(!model.model.has_compactors());
    let flops = model_flops(&model.model).unwrap();
    assert_eq!(flops, report.final_flops);
    assert!((reduction_pct(report.original_flops, flops) - report.reduction_pct).abs() <= 0.01);

    let acc = |ck: &Path| -> f64 { ok(&with_data(&["eval", "--checkpoint", p(ck)])).trim().parse().unwrap() };
    let first = ok(&with_data(&["eval", "--checkpoint", p(&conv)]));
    assert_eq!(first, ok(&with_data(&["eval", "--checkpoint", p(&conv)])));
    assert_eq!(first.trim().split('.').nth(1).map(str::len), Some(4));
    assert!((100.0 * (acc(&conv) - acc(&re))).abs() <= 0.1);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = TempDir::new().unwrap();
    let base = train_base(dir.path(), "base.rsrp", "0");
    let full = dir.path().join("full.rsrp");
    run_resrep(&base, &full, &[]);
    let split = dir.path().join("split.rsrp");
    run_resrep(&base, &split, &["--stop-after", "37"]);
    assert_eq!(Checkpoint::<f32>::load(&split).unwrap().meta.epoch, 37);
    run_resrep(&base, &split, &["--resume"]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&split).unwrap());
    for suffix in ["log.csv", "events.jsonl", "trace.csv"] {
        assert_eq!(
            fs::read(dir.path().join(format!("full.{suffix}"))).unwrap(),
            fs::read(dir.path().join(format!("split.{suffix}"))).unwrap(),
            "{suffix}"
        );
    }
}

#[test]
fn ablation_writes_minimal_structure_and_resrep_mode_matches() {
    let dir = TempDir::new().unwrap();
    let base = train_base(dir.path(), "base.rsrp", "0");
    let short = ["--epochs", "6", "--interval", "16", "--warmup-epochs", "1", "--batch-size", "32", "--lr", "0.02"];
    let lasso = dir.path().join("lasso.rsrp");
    let mut args = vec!["ablate", "--base", p(&base), "--mode", "group-lasso", "--lambda", "0.03", "--out", p(&lasso)];
    args.extend(short);
    let stdout = ok(&with_data(&args));
    assert!(stdout.contains("minimal structure"));
    let ms: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("lasso.minimal.json")).unwrap()).unwrap();
    assert!(ms["accuracy_after"].as_f64().unwrap() >= ms["accuracy_before"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("lasso.trace.csv")).unwrap().lines().count(), 7);

    let via_resrep = dir.path().join("a.rsrp");
    let via_ablate = dir.path().join("b.rsrp");
    let mut args = vec!["resrep", "--base", p(&base), "--flops-target", "0.3", "--lambda", "3e-3", "--out", p(&via_resrep)];
    args.extend(short);
    ok(&with_data(&args));
    let mut args = vec![
        "ablate", "--base", p(&base), "--mode", "resrep", "--flops-target", "0.3", "--lambda", "3e-3", "--out", p(&via_ablate),
    ];
    args.extend(short);
    ok(&with_data(&args));
    assert_eq!(fs::read(&via_resrep).unwrap(), fs::read(&via_ablate).unwrap());
    assert_eq!(fs::read(dir.path().join("a.events.jsonl")).unwrap(), fs::read(dir.path().join("b.events.jsonl")).unwrap());

    let r = resrep(&with_data(&["ablate", "--base", p(&base), "--mode", "res-only", "--out", p(&via_ablate)]));
    assert_eq!(r.status.code(), Some(2), "res-only needs a FLOPs target");
}
