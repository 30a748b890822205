use std::path::Path;
use std::process::Command;

use clustalign::cli::{self, run::sha256_file, ExperimentConfig, Overrides, Preset, RunManifest};

const SHORT: &str = r#"
objective_base = "toy"
[objective]
warmup_iters = 40
adapt_iters = 40
max_iters = 80
[data]
n_source = 12
n_target = 12
n_test = 12
"#;

fn config(dir: &Path, extra: &str) -> ExperimentConfig {
    // top-level keys must precede the tables of SHORT; table extras follow it
    let split = extra
        .lines()
        .position(|l| l.starts_with('['))
        .map_or(extra.len(), |n| extra.lines().take(n).map(|l| l.len() + 1).sum());
    let (top, tables) = extra.split_at(split);
    let text = format!("output_dir = {:?}\n{top}\n{SHORT}\n{tables}", dir.display().to_string());
    ExperimentConfig::parse(&text, "inline", &Overrides::default()).unwrap()
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clustalign"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

#[test]
fn all_losses_off_reproduces_the_source_only_row() {
    let tmp = tempfile::tempdir().unwrap();
    let off = config(&tmp.path().join("off"), "[losses]\nuse_a = false\nuse_c = false\nuse_n = false");
    let ablation = config(&tmp.path().join("abl"), "preset = \"ablation\"");
    let a = cli::run(&off).unwrap();
    let b = cli::run(&ablation).unwrap();
    assert_eq!(a.variants.len(), 1);
    assert_eq!(a.variants[0].label, "source-only");
    assert_eq!(b.variants[0].label, "source-only");
    assert_eq!(a.variants[0].per_seed, b.variants[0].per_seed);
    let m1 = std::fs::read(tmp.path().join("off/seed_0/metrics.csv")).unwrap();
    let m2 = std::fs::read(tmp.path().join("abl/seed_0/source-only/metrics.csv")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn ablation_table_has_five_rows_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    cli::run(&config(tmp.path(), "preset = \"ablation\"")).unwrap();
    let table = std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["source-only", "L_seg+L_a", "L_seg+L_a+L_c", "L_seg+L_a+L_n", "L_seg+L_a+L_c+L_n"]);
}

#[test]
fn lambda_c_sweep_covers_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "preset = \"sweep_lambda_c\"");
    assert_eq!(cfg.preset, Preset::SweepLambdaC);
    let summary = cli::run(&cfg).unwrap();
    let labels: Vec<&str> = summary.variants.iter().map(|v| v.label.as_str()).collect();
    assert_eq!(labels, ["lambda_c=1", "lambda_c=1.5", "lambda_c=2", "lambda_c=3", "lambda_c=4"]);
    let table = std::fs::read_to_string(tmp.path().join("sweep_lambda_c.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn same_config_gives_byte_identical_metrics_and_a_complete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[self_training]\nenabled = true";
    cli::run(&config(&tmp.path().join("a"), extra)).unwrap();
    cli::run(&config(&tmp.path().join("b"), extra)).unwrap();
    for f in ["seed_0/metrics.csv", "seed_0/selftrain_metrics.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(f)).unwrap(),
            std::fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let dir = tmp.path().join("a");
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest.artifacts.iter().map(|a| a.path.as_str()).collect();
    for required in [
        "config.toml",
        "summary.json",
        "results.csv",
        "seed_0/metrics.csv",
        "seed_0/ccd.csv",
        "seed_0/iou.csv",
        "seed_0/affinity_probe_r8_c8.csv",
        "seed_0/affinity_edges.csv",
        "seed_0/checkpoint/checkpoint.json",
        "seed_0/checkpoint/classifier.w.catn",
    ] {
        assert!(listed.contains(&required), "{required} missing from {listed:?}");
    }
    for a in &manifest.artifacts {
        assert_eq!(sha256_file(&dir.join(&a.path)).unwrap(), a.sha256, "{}", a.path);
    }
}

#[test]
fn compare_with_itself_gives_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "seeds = [0, 1]");
    cli::run(&cfg).unwrap();
    let rows = cli::compare_dirs(&[tmp.path().to_path_buf(), tmp.path().to_path_buf()]).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.delta == 0.0));
    assert!(rows.iter().all(|r| r.seeds == 2 || r.metric != "mIoU"));
}

#[test]
fn invalid_config_exits_with_2_and_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "seeds = [0]\n\n[losses]\nuse_b = true\n").unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.toml:4:"), "{stderr}");

    std::fs::write(&path, "[objective]\nwarmup_iters = 0\n").unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_with_3_and_writes_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("explode.toml");
    std::fs::write(&path, format!("output_dir = {:?}\n{SHORT}", tmp.path().join("out").display().to_string())).unwrap();
    let out = bin()
        .args(["run", path.to_str().unwrap(), "--set", "objective.base_lr=1e6"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let diag = tmp.path().join("out/diagnostics/diagnostics.json");
    assert!(diag.exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diagnostics.json"));
    assert!(tmp.path().join("out/diagnostics/last_good/checkpoint.json").exists());
}

#[test]
fn gen_data_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    cli::run(&config(&tmp.path().join("run"), "")).unwrap();
    let data_dir = tmp.path().join("target_data");
    let status = bin()
        .args(["gen-data", "--n", "4", "--seed", "9", "--shift", "default", "--out"])
        .arg(&data_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = tmp.path().join("eval.csv");
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(tmp.path().join("run/seed_0/checkpoint"))
        .arg("--data")
        .arg(&data_dir)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("method,class_0,class_1,class_2,class_3,class_4,mIoU"));
}

#[test]
fn check_grads_verb_passes() {
    let out = bin().args(["check-grads", "--instances", "3", "--probes", "20"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 10, "{stdout}");
}
