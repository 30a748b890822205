use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clustalign::cli::{self, ExperimentConfig, Overrides, Preset, RunError};
use clustalign::data::{self, Shift};
use clustalign::gradsuite::{self, SuiteOptions};
use clustalign::metrics::{self, CcdVariant};
use clustalign::model::checkpoint::load_checkpoint;

#[derive(Parser)]
#[command(name = "clustalign", version, about = "Cluster-alignment domain adaptation on synthetic segmentation data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShiftArg {
    None,
    Default,
    Extreme,
}

impl ShiftArg {
    fn shift(self) -> Shift {
        match self {
            ShiftArg::None => Shift::NONE,
            ShiftArg::Default => Shift::DEFAULT,
            ShiftArg::Extreme => Shift::EXTREME,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Single,
    Ablation,
    SweepLambdaC,
    SweepLambdaN,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Single => Preset::Single,
            PresetArg::Ablation => Preset::Ablation,
            PresetArg::SweepLambdaC => Preset::SweepLambdaC,
            PresetArg::SweepLambdaN => Preset::SweepLambdaN,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override a config field, e.g. `--set objective.lambda_n=2.0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Seed-averaged per-class and mean deltas between completed runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient.
    CheckGrads {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset, or import CSV samples, into a dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Experiment config whose `data.spec` is used (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Domain shift applied to the spec (`none` gives the source domain).
        #[arg(long, value_enum, default_value = "none")]
        shift: ShiftArg,
        /// CSV samples (`row,col,label,x0,..`) to import instead of generating.
        #[arg(long, num_args = 1.., conflicts_with_all = ["config", "n"])]
        import_csv: Vec<PathBuf>,
        #[arg(long, requires = "import_csv")]
        num_classes: Option<usize>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also report CCD between this source dataset and `--data`.
        #[arg(long)]
        ccd_source: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        normalized_means: bool,
        /// CSV destination for per-class IoU.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(err: RunError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn run(config: PathBuf, set: Vec<String>, seeds: Option<Vec<u64>>, out: Option<PathBuf>, preset: Option<PresetArg>) -> Result<(), RunError> {
    let overrides = Overrides {
        set,
        seeds,
        output_dir: out,
        preset: preset.map(Preset::from),
    };
    let cfg = ExperimentConfig::from_file(&config, &overrides)?;
    let summary = cli::run(&cfg)?;
    for v in &summary.variants {
        let mious: Vec<String> = v.per_seed.iter().map(|s| format!("{:.4}", s.miou)).collect();
        println!("{:<28} mIoU per seed: {}", v.label, mious.join(" "));
    }
    println!("artifacts in {}", cfg.resolved_output_dir().display());
    Ok(())
}

fn compare(runs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<(), RunError> {
    let rows = cli::compare_dirs(&runs)?;
    match out {
        Some(path) => cli::write_compare_csv(BufWriter::new(File::create(path).map_err(clustalign::Error::from)?), &rows)?,
        None => cli::write_compare_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn check_grads(opts: SuiteOptions, out: Option<PathBuf>) -> Result<bool, RunError> {
    let start = std::time::Instant::now();
    let entries = gradsuite::run_suite(&opts)?;
    for e in &entries {
        println!(
            "{} {:<36} max rel err {:.3e} over {} instances",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.max_relative_error,
            e.instances
        );
    }
    println!("finished in {:.1}s", start.elapsed().as_secs_f64());
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_vec_pretty(&entries).map_err(clustalign::Error::from)?).map_err(clustalign::Error::from)?;
    }
    Ok(entries.iter().all(|e| e.passed))
}

struct GenArgs {
    out: PathBuf,
    config: Option<PathBuf>,
    n: usize,
    seed: u64,
    shift: ShiftArg,
    import_csv: Vec<PathBuf>,
    num_classes: Option<usize>,
}

fn gen_data(a: GenArgs) -> Result<(), RunError> {
    if !a.import_csv.is_empty() {
        let k = a
            .num_classes
            .ok_or_else(|| clustalign::Error::InvalidArgument("--num-classes is required with --import-csv".into()))?;
        let samples = a
            .import_csv
            .iter()
            .map(|p| data::import_csv_sample(File::open(p)?, k))
            .collect::<clustalign::Result<Vec<_>>>()?;
        let ds = data::dataset_from_samples(samples, k)?;
        data::save_dataset(&a.out, &ds)?;
        println!("imported {} samples into {}", ds.len(), a.out.display());
        return Ok(());
    }
    let base = match &a.config {
        Some(path) => ExperimentConfig::from_file(path, &Overrides::default())?.data.spec,
        None => data::DomainSpec::default(),
    };
    let spec = data::shifted_spec(&base, a.shift.shift())?;
    let ds = cli::run::gen_data(&spec, a.n, a.seed, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn eval(checkpoint: PathBuf, data_dir: PathBuf, ccd_source: Option<PathBuf>, normalized: bool, out: Option<PathBuf>) -> Result<(), RunError> {
    let (seg, _) = load_checkpoint(&checkpoint)?;
    let ds = data::load_dataset(&data_dir)?;
    let report = metrics::evaluate(&seg, &ds)?;
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {k}: IoU {:.4}", v),
            None => println!("class {k}: absent"),
        }
    }
    println!("mIoU {:.4}  pixel accuracy {:.4}", report.miou, report.pixel_accuracy);
    if let Some(path) = out {
        let names: Vec<String> = (0..ds.spec.num_classes).map(|k| format!("class_{k}")).collect();
        let file = BufWriter::new(File::create(path).map_err(clustalign::Error::from)?);
        metrics::write_iou_table(file, &[(checkpoint.display().to_string(), report)], &names)?;
    }
    if let Some(src) = ccd_source {
        let variant = if normalized { CcdVariant::NormalizedMeans } else { CcdVariant::Raw };
        let ccd = metrics::ccd(&seg, &data::load_dataset(src)?, &ds, variant)?;
        ccd.write_csv(std::io::stdout().lock())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run {
            config,
            set,
            seeds,
            out,
            preset,
        } => run(config, set, seeds, out, preset),
        Command::Compare { runs, out } => compare(runs, out),
        Command::CheckGrads {
            instances,
            probes,
            eps,
            seed,
            out,
        } => match check_grads(
            SuiteOptions {
                instances,
                probes,
                eps,
                seed,
            },
            out,
        ) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::GenData {
            out,
            config,
            n,
            seed,
            shift,
            import_csv,
            num_classes,
        } => gen_data(GenArgs {
            out,
            config,
            n,
            seed,
            shift,
            import_csv,
            num_classes,
        }),
        Command::Eval {
            checkpoint,
            data,
            ccd_source,
            normalized_means,
            out,
        } => eval(checkpoint, data, ccd_source, normalized_means, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
