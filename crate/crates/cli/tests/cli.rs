use std::fs;
use std::path::Path;
use std::process::Command;

use leanet::harness::{ExperimentConfig, MetricsRow, SweepGroup, Variant};
use leanet::netspec::CaanVariant;
use leanet_cli::{emit_report, emit_sweep_report, sweep_svg, text_table};

const TINY: &str = r#"{"extent": 32, "scale": 0.0625, "folds": 2,
  "train": {"epochs": 2, "batch": 4},
  "colorizer": {"levels": 3, "epochs": 2, "batch": 4}}"#;

fn leanet(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_leanet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LEANET_JOBS")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = leanet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.ends_with(".png") && !n.ends_with(".anom.png")
        })
        .count()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--bogus"],
        vec![],
        vec!["fly"],
        vec!["synth"],
        vec!["train", "--data", "d", "--variant", "nope", "--out", "o"],
        vec!["synth", "--out", "o", "--pos", "many"],
    ] {
        let out = leanet(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
    let help = leanet(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-colorizer"));
}

#[test]
fn domain_errors_exit_1_and_name_the_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = leanet(&["eval", "--data", "missing", "--model", "none.ckpt", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: i/o error"));

    let out = leanet(&["synth", "--out", "d", "--hue-shift", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("harness:"));

    fs::write(dir.path().join("bad.json"), "{ nope").unwrap();
    let out = leanet(&["synth", "--out", "d", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "d", "--pos", "50", "--neg", "152", "--seed", "7"], dir.path());
    let d = dir.path().join("d");
    assert_eq!(pngs(&d.join("positive")) + pngs(&d.join("negative")), 202);
    let manifest = fs::read_to_string(d.join("labels.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 203);
    assert_eq!(manifest.lines().filter(|l| l.ends_with(",1")).count(), 50);
    let img = image::open(d.join("positive/pos_0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"extent": 24, "seeds": [3]}"#).unwrap();
    ok(&["synth", "--out", "a", "--pos", "2", "--neg", "2", "--config", "c.json"], dir.path());
    ok(&["synth", "--out", "b", "--pos", "2", "--neg", "2", "--config", "c.json", "--extent", "16"], dir.path());
    ok(&["synth", "--out", "c", "--pos", "2", "--neg", "2"], dir.path());
    let size = |d: &str| image::open(dir.path().join(d).join("positive/pos_0000.png")).unwrap().width();
    assert_eq!((size("a"), size("b"), size("c")), (24, 16, 64));
    let seed = |d: &str| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(d).join("synth.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!((seed("a"), seed("c")), (3, 0));
}

#[test]
fn pipeline_runs_in_documented_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.json"), TINY).unwrap();
    ok(&["synth", "--config", "c.json", "--out", "d", "--pos", "8", "--neg", "16", "--seed", "5"], p);
    ok(&["train-colorizer", "--config", "c.json", "--data", "d", "--out", "col", "--seed", "5"], p);
    assert!(p.join("col/colorizer.ckpt").is_file());
    let history = fs::read_to_string(p.join("col/colorizer_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    ok(&["gen-maps", "--data", "d", "--colorizer", "col/colorizer.ckpt"], p);
    assert!(p.join("d/positive/pos_0003.anom.f32").is_file());
    assert!(p.join("d/negative/neg_0015.anom.png").is_file());

    let out = leanet(&["train", "--config", "c.json", "--data", "d", "--variant", "caan-resnet", "--out", "m"], p);
    assert_eq!(out.status.code(), Some(1));
    ok(
        &["train", "--config", "c.json", "--data", "d", "--variant", "caan-resnet", "--point", "2", "--out", "m", "--seed", "1"],
        p,
    );
    assert!(p.join("m/model.ckpt").is_file());
    let metrics = fs::read_to_string(p.join("m/train_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,total_loss,attention_loss,detection_loss\n1,"));
    assert_eq!(metrics.lines().count(), 3);

    ok(&["eval", "--data", "d", "--model", "m/model.ckpt", "--out", "e"], p);
    let preds = fs::read_to_string(p.join("e/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 25);
    assert!(fs::read_to_string(p.join("e/eval_metrics.csv")).unwrap().contains("caan-resnet,2,24,"));

    ok(&["visualize", "--data", "d", "--model", "m/model.ckpt", "--out", "v", "--name", "pos_0001"], p);
    for f in ["p2_attention.png", "p2_before.png", "p2_after.png", "raw/p2_after.f32"] {
        assert!(p.join("v").join(f).is_file(), "{f}");
    }

    ok(&["train", "--config", "c.json", "--data", "d", "--variant", "baseline", "--out", "b"], p);
    let out = leanet(&["visualize", "--data", "d", "--model", "b/model.ckpt", "--out", "v2"], p);
    assert_eq!(out.status.code(), Some(1));

    let table = ok(
        &["sweep", "--config", "c.json", "--data", "d", "--out", "s", "--variants", "baseline,direct_attention", "--points", "1,3"],
        p,
    );
    assert!(table.contains("direct_attention"));
    let folds = fs::read_to_string(p.join("s/folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 1 + 3 * 2);
    let summary = fs::read_to_string(p.join("s/summary.csv")).unwrap();
    assert!(summary.starts_with("variant,point,mean_f1,std_f1\n"));
    assert!(p.join("s/metadata.json").is_file());
}

#[test]
fn sweep_with_ratios_and_jobs_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.json"), TINY).unwrap();
    ok(&["synth", "--config", "c.json", "--out", "d", "--pos", "10", "--neg", "16"], p);
    let out = Command::new(env!("CARGO_BIN_EXE_leanet"))
        .args(["sweep", "--config", "c.json", "--data", "d", "--out", "r", "--variants", "baseline", "--ratios", "0.3,0.2"])
        .current_dir(p)
        .env("LEANET_JOBS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(p.join("r/sweep.svg")).unwrap();
    assert_eq!(svg.matches("class=\"xtick\"").count(), 2);
    assert!(p.join("r/ratio_0.3/folds.csv").is_file());
    let bad = Command::new(env!("CARGO_BIN_EXE_leanet"))
        .args(["sweep", "--out", "r"])
        .current_dir(p)
        .env("LEANET_JOBS", "lots")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

fn row(v: Variant, p: Option<u8>, folds: &[f64]) -> MetricsRow {
    MetricsRow::new(v, p, 0, folds.to_vec())
}

#[test]
fn text_table_has_one_line_per_variant() {
    let lea = Variant::Caan(CaanVariant::ResnetBased);
    let mut rows = vec![
        row(Variant::Baseline, None, &[0.5, 0.7]),
        row(lea, Some(1), &[0.6, 0.6]),
        row(lea, Some(2), &[0.9, 0.7]),
    ];
    rows.push(MetricsRow { best: true, ..rows[2].clone() });
    let t = text_table(&rows);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 2 + 2);
    assert_eq!(lines[2], "baseline     0.600 ± 0.141");
    assert_eq!(lines[3], "caan-resnet  0.800 ± 0.141 (2)");
}

#[test]
fn reports_are_byte_identical_on_rerun() {
    let rows = vec![row(Variant::Baseline, None, &[0.25, 0.5]), row(Variant::DirectAttention, Some(3), &[1.0, 0.75])];
    let groups: Vec<SweepGroup> = [0.33, 0.25, 0.124, 0.06]
        .iter()
        .map(|&ratio| SweepGroup {
            ratio,
            positives: 1,
            negatives: 2,
            rows: rows.clone(),
        })
        .collect();
    assert_eq!(sweep_svg(&groups).matches("class=\"xtick\"").count(), 4);
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| -> Vec<Vec<u8>> {
        let files = emit_sweep_report(&groups, &cfg, &dir.path().join(sub)).unwrap();
        files.iter().map(|f| fs::read(f).unwrap()).collect()
    };
    assert_eq!(run("a"), run("b"));
    assert!(emit_report(&[], &cfg, dir.path()).is_err());
}
