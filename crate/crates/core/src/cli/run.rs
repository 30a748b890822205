//! `run`: executes one configured experiment and writes its artifacts.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Preset};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{self, LossSet, ToyData, VariantRun, ABLATION};
use crate::graphcut;
use crate::metrics::{self, MiouReport};
use crate::model::checkpoint::save_checkpoint;
use crate::model::train::{TrainError, TrainLog};
use crate::model::ObjectiveConfig;
use crate::numerics::io;

pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Failure of a run, mapped to a process exit code by the binary.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] super::config::ConfigError),
    #[error("{message} (diagnostics: {})", diagnostics.display())]
    Numeric { message: String, diagnostics: PathBuf },
    #[error(transparent)]
    Other(#[from] Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numeric { .. } => 3,
            RunError::Other(Error::InvalidArgument(_)) => 2,
            RunError::Other(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Mean per-class CCD ratio against the source-only model, when computed.
    pub ccd_normalized_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub per_seed: Vec<SeedResult>,
}

/// Machine-readable results of a run, consumed by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub num_classes: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl RunSummary {
    fn record(&mut self, label: &str, result: SeedResult) {
        match self.variants.iter_mut().find(|v| v.label == label) {
            Some(v) => v.per_seed.push(result),
            None => self.variants.push(VariantSummary {
                label: label.to_string(),
                per_seed: vec![result],
            }),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(SUMMARY_FILE))?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join(RUN_MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` into `manifest.json`.
pub fn write_manifest(dir: &Path, preset: &str) -> Result<RunManifest> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut artifacts = Vec::with_capacity(files.len());
    for path in files {
        let rel = path.strip_prefix(dir).expect("under dir");
        artifacts.push(ArtifactEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: std::fs::metadata(&path)?.len(),
            sha256: sha256_file(&path)?,
        });
    }
    let manifest = RunManifest {
        preset: preset.to_string(),
        config_sha256: sha256_file(&dir.join("config.toml"))?,
        artifacts,
    };
    std::fs::write(dir.join(RUN_MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn slug(label: &str) -> String {
    label.replace(['+', '='], "_")
}

fn load_or_generate(cfg: &ExperimentConfig, seed: u64) -> Result<ToyData> {
    let d = &cfg.data;
    match (&d.source_dir, &d.target_dir, &d.test_dir) {
        (Some(s), Some(t), Some(v)) => {
            let data = ToyData {
                source: data::load_dataset(s)?,
                target: data::load_dataset(t)?,
                test: data::load_dataset(v)?,
            };
            let k = data.source.spec.num_classes;
            if data.target.spec.num_classes != k || data.test.spec.num_classes != k {
                return Err(Error::invalid("saved datasets disagree on the number of classes"));
            }
            Ok(data)
        }
        _ => ToyData::generate(&d.setup(), seed),
    }
}

fn seed_result(seed: u64, report: &MiouReport, ccd: Option<f64>) -> SeedResult {
    SeedResult {
        seed,
        per_class: report.per_class.clone(),
        miou: report.miou,
        pixel_accuracy: report.pixel_accuracy,
        ccd_normalized_mean: ccd,
    }
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    log.write_csv(create(path)?)
}

/// Writes the diagnostics of a numeric abort and converts it into [`RunError::Numeric`].
fn numeric_abort(out: &Path, cfg: &ObjectiveConfig, err: TrainError) -> RunError {
    if !matches!(err.error, Error::NonFinite { .. }) {
        return RunError::Other(err.error);
    }
    let dir = out.join("diagnostics");
    let write = || -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        write_log(&dir.join("metrics.csv"), &err.log)?;
        let last_good_iter = err.last_good.as_ref().map(|c| c.iter);
        if let Some(ckpt) = &err.last_good {
            save_checkpoint(dir.join("last_good"), &ckpt.params, ckpt.iter, cfg)?;
        }
        let body = serde_json::json!({
            "error": err.error.to_string(),
            "last_good_iter": last_good_iter,
            "logged_iterations": err.log.rows.len(),
        });
        std::fs::write(dir.join(DIAGNOSTICS_FILE), serde_json::to_vec_pretty(&body)?)?;
        Ok(())
    };
    if let Err(e) = write() {
        log::error!("could not write diagnostics: {e}");
    }
    RunError::Numeric {
        message: err.error.to_string(),
        diagnostics: dir.join(DIAGNOSTICS_FILE),
    }
}

fn write_probes(dir: &Path, run: &VariantRun, data: &ToyData, cfg: &ExperimentConfig) -> Result<()> {
    let Some(first) = data.test.samples.first() else {
        return Ok(());
    };
    let f = run.params.forward(&first.input)?.features;
    for [r, c] in &cfg.probe.pixels {
        let grid = graphcut::feature_affinity_probe(&f, *r, *c)?;
        io::write_csv(create(&dir.join(format!("affinity_probe_r{r}_c{c}.csv")))?, &grid)?;
    }
    let graph = graphcut::affinity_matrix(&f, cfg.probe.edge_stride)?;
    graph.write_edge_list(create(&dir.join("affinity_edges.csv"))?)
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class_{c}")).collect()
}

/// Writes the artifacts of one adapted variant into `dir`.
fn write_variant(dir: &Path, run: &VariantRun) -> Result<()> {
    write_log(&dir.join("metrics.csv"), &run.log)?;
    save_checkpoint(dir.join("checkpoint"), &run.params, run.iter, &run.cfg)
}

fn single(cfg: &ExperimentConfig, out: &Path, seed: u64, data: &ToyData, summary: &mut RunSummary) -> std::result::Result<(), RunError> {
    let obj = ObjectiveConfig {
        seed,
        ..cfg.objective.clone()
    };
    let mut variants = vec![LossSet::NONE];
    if cfg.losses.any() {
        variants.push(cfg.losses);
    }
    let runs = experiment::run_variants(data, &obj, &variants).map_err(|e| numeric_abort(out, &obj, e))?;
    let dir = out.join(format!("seed_{seed}"));
    let baseline = &runs[0];
    let main = runs.last().expect("at least one variant");
    write_variant(&dir, main)?;
    let mut table = vec![(baseline.losses.label(), baseline.test.clone())];
    let ccd_mean = if cfg.losses.any() {
        table.push((main.losses.label(), main.test.clone()));
        let report = experiment::normalized_ccd(&main.params, &baseline.params, data, cfg.ccd_variant)?;
        report.write_csv(create(&dir.join("ccd.csv"))?)?;
        report.normalized_mean
    } else {
        let report = metrics::ccd(&main.params, &data.source, &data.target, cfg.ccd_variant)?;
        report.write_csv(create(&dir.join("ccd.csv"))?)?;
        None
    };
    write_probes(&dir, main, data, cfg)?;
    summary.record(&main.losses.label(), seed_result(seed, &main.test, ccd_mean));

    if cfg.self_training.enabled {
        let st = &cfg.self_training;
        let (outcome, report) = experiment::self_train_toy(&main.params, data, &obj, st.confidence, st.rounds)
            .map_err(|e| numeric_abort(out, &obj, e))?;
        write_log(&dir.join("selftrain_metrics.csv"), &outcome.log)?;
        save_checkpoint(dir.join("checkpoint_selftrain"), &outcome.params, obj.adapt_iters, &obj)?;
        for r in &outcome.rounds {
            log::info!("seed {seed} self-training round {}: coverage {:.3}{}", r.round, r.coverage, if r.skipped { " (skipped)" } else { "" });
        }
        let label = format!("{}+self-training", main.losses.label());
        table.push((label.clone(), report.clone()));
        summary.record(&label, seed_result(seed, &report, None));
    }
    metrics::write_iou_table(create(&dir.join("iou.csv"))?, &table, &class_names(summary.num_classes))?;
    Ok(())
}

fn ablation(cfg: &ExperimentConfig, out: &Path, seed: u64, data: &ToyData, summary: &mut RunSummary) -> std::result::Result<(), RunError> {
    let obj = ObjectiveConfig {
        seed,
        ..cfg.objective.clone()
    };
    let runs = experiment::run_variants(data, &obj, &ABLATION).map_err(|e| numeric_abort(out, &obj, e))?;
    let dir = out.join(format!("seed_{seed}"));
    let baseline = &runs[0];
    for run in &runs {
        let label = run.losses.label();
        let vdir = dir.join(slug(&label));
        write_variant(&vdir, run)?;
        let ccd = if run.losses.any() {
            let report = experiment::normalized_ccd(&run.params, &baseline.params, data, cfg.ccd_variant)?;
            report.write_csv(create(&vdir.join("ccd.csv"))?)?;
            report.normalized_mean
        } else {
            None
        };
        summary.record(&label, seed_result(seed, &run.test, ccd));
    }
    write_probes(&dir, runs.last().expect("five variants"), data, cfg)?;
    let table: Vec<(String, MiouReport)> = runs.iter().map(|r| (r.losses.label(), r.test.clone())).collect();
    metrics::write_iou_table(create(&dir.join("iou.csv"))?, &table, &class_names(summary.num_classes))?;
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Path, seed: u64, data: &ToyData, summary: &mut RunSummary) -> std::result::Result<(), RunError> {
    let obj = ObjectiveConfig {
        seed,
        ..cfg.objective.clone()
    };
    let name = if cfg.preset == Preset::SweepLambdaC { "lambda_c" } else { "lambda_n" };
    let configs: Vec<(LossSet, ObjectiveConfig)> = cfg
        .sweep_grid()
        .into_iter()
        .map(|v| {
            let mut c = cfg.losses.apply(&obj);
            if cfg.preset == Preset::SweepLambdaC {
                c.lambda_c = v;
            } else {
                c.lambda_n = v;
            }
            (cfg.losses, c)
        })
        .collect();
    let runs = experiment::run_configs(data, &obj, &configs).map_err(|e| numeric_abort(out, &obj, e))?;
    let dir = out.join(format!("seed_{seed}"));
    for run in &runs {
        let value = if cfg.preset == Preset::SweepLambdaC { run.cfg.lambda_c } else { run.cfg.lambda_n };
        let label = format!("{name}={value}");
        write_variant(&dir.join(slug(&label)), run)?;
        summary.record(&label, seed_result(seed, &run.test, None));
    }
    Ok(())
}

/// Seed-averaged table: one row per variant, per-class IoU then mIoU (percent), then the mIoU std.
pub fn write_summary_table(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["method".to_string()];
    header.extend(class_names(summary.num_classes));
    header.extend(["mIoU".to_string(), "mIoU_std".to_string(), "seeds".to_string()]);
    w.write_record(&header)?;
    for v in &summary.variants {
        let mut row = vec![v.label.clone()];
        for k in 0..summary.num_classes {
            let vals: Vec<f64> = v.per_seed.iter().filter_map(|s| s.per_class[k]).collect();
            row.push(match vals.is_empty() {
                true => String::new(),
                false => format!("{:.1}", 100.0 * vals.iter().sum::<f64>() / vals.len() as f64),
            });
        }
        let miou: Vec<Vec<f64>> = v.per_seed.iter().map(|s| vec![s.miou]).collect();
        let (mean, std) = experiment::column_stats(&miou);
        row.push(format!("{:.1}", 100.0 * mean[0]));
        row.push(format!("{:.1}", 100.0 * std[0]));
        row.push(v.per_seed.len().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg` into its output directory and returns the summary.
pub fn run(cfg: &ExperimentConfig) -> std::result::Result<RunSummary, RunError> {
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(Error::from)?;
    let mut summary = RunSummary {
        preset: cfg.preset.name().to_string(),
        num_classes: 0,
        seeds: cfg.seeds.clone(),
        variants: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let data = load_or_generate(cfg, seed)?;
        summary.num_classes = data.source.spec.num_classes;
        log::info!("seed {seed}: {} source / {} target / {} test images", data.source.len(), data.target.len(), data.test.len());
        match cfg.preset {
            Preset::Single => single(cfg, &out, seed, &data, &mut summary)?,
            Preset::Ablation => ablation(cfg, &out, seed, &data, &mut summary)?,
            Preset::SweepLambdaC | Preset::SweepLambdaN => sweep(cfg, &out, seed, &data, &mut summary)?,
        }
    }
    let table = match cfg.preset {
        Preset::Single => "results.csv",
        Preset::Ablation => "ablation.csv",
        Preset::SweepLambdaC => "sweep_lambda_c.csv",
        Preset::SweepLambdaN => "sweep_lambda_n.csv",
    };
    write_summary_table(&out.join(table), &summary)?;
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary).map_err(Error::from)?).map_err(Error::from)?;
    write_manifest(&out, cfg.preset.name())?;
    Ok(summary)
}

/// Generates a dataset from a spec and saves it.
pub fn gen_data(spec: &data::DomainSpec, n: usize, seed: u64, out: &Path) -> Result<Dataset> {
    let ds = data::generate(spec, n, seed)?;
    data::save_dataset(out, &ds)?;
    Ok(ds)
}
