//! Toy two-domain experiments: loss ablations, weight sweeps, CCD and
//! self-training on top of a shared warm-up.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DomainSpec, Shift};
use crate::error::Result;
use crate::metrics::{self, CcdReport, CcdVariant, MiouReport};
use crate::model::train::{self, AdaptOptions, Checkpoint, Phase, SelfTrainOutcome, SourceData, TrainLog};
use crate::model::{ObjectiveConfig, Segmenter};
use crate::numerics::FeatureMap;
use crate::LabelMap;

/// Which adaptation losses are active. Missing keys default to enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSet {
    pub use_a: bool,
    pub use_c: bool,
    pub use_n: bool,
}

impl Default for LossSet {
    fn default() -> Self {
        LossSet::ALL
    }
}

impl LossSet {
    pub const NONE: LossSet = LossSet {
        use_a: false,
        use_c: false,
        use_n: false,
    };
    pub const ALL: LossSet = LossSet {
        use_a: true,
        use_c: true,
        use_n: true,
    };

    /// `cfg` with the weights of disabled losses set to zero.
    pub fn apply(&self, cfg: &ObjectiveConfig) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_a: if self.use_a { cfg.lambda_a } else { 0.0 },
            lambda_c: if self.use_c { cfg.lambda_c } else { 0.0 },
            lambda_n: if self.use_n { cfg.lambda_n } else { 0.0 },
            ..cfg.clone()
        }
    }

    pub fn any(&self) -> bool {
        self.use_a || self.use_c || self.use_n
    }

    pub fn label(&self) -> String {
        if !self.any() {
            return "source-only".into();
        }
        let mut parts = vec!["L_seg"];
        if self.use_a {
            parts.push("L_a");
        }
        if self.use_c {
            parts.push("L_c");
        }
        if self.use_n {
            parts.push("L_n");
        }
        parts.join("+")
    }
}

/// The five ablation rows: source-only, +L_a, +L_a+L_c, +L_a+L_n, full.
pub const ABLATION: [LossSet; 5] = [
    LossSet::NONE,
    LossSet {
        use_a: true,
        use_c: false,
        use_n: false,
    },
    LossSet {
        use_a: true,
        use_c: true,
        use_n: false,
    },
    LossSet {
        use_a: true,
        use_c: false,
        use_n: true,
    },
    LossSet::ALL,
];

/// Dataset sizes and the domain pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySetup {
    pub spec: DomainSpec,
    pub shift: Shift,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out target images used for validation and reported mIoU.
    pub n_test: usize,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            spec: DomainSpec::default(),
            shift: Shift::DEFAULT,
            n_source: 40,
            n_target: 40,
            n_test: 40,
        }
    }
}

/// Source, unlabelled-target (labels kept for CCD only) and held-out target test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
}

impl ToyData {
    pub fn generate(setup: &ToySetup, seed: u64) -> Result<Self> {
        let base = seed.wrapping_mul(1_000);
        let (source, target) =
            data::make_domain_pair(&setup.spec, setup.shift, setup.n_source, setup.n_target, base + 1, base + 2)?;
        let test = data::generate(&target.spec, setup.n_test, base + 3)?;
        Ok(Self { source, target, test })
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub losses: LossSet,
    pub cfg: ObjectiveConfig,
    pub params: Segmenter,
    /// Schedule position after adaptation.
    pub iter: usize,
    /// Warm-up rows followed by this variant's adaptation rows.
    pub log: TrainLog,
    pub test: MiouReport,
}

/// Warm-up once, then adapt each variant from the same checkpoint.
pub fn run_variants(data: &ToyData, cfg: &ObjectiveConfig, variants: &[LossSet]) -> train::TrainResult<Vec<VariantRun>> {
    let configs: Vec<(LossSet, ObjectiveConfig)> = variants.iter().map(|l| (*l, l.apply(cfg))).collect();
    run_configs(data, cfg, &configs)
}

/// Warm-up under `warm_cfg`, then adapt once per `(losses, config)` pair.
///
/// Each adaptation config must share the warm-up's schedule fields; only
/// loss weights are expected to differ.
pub fn run_configs(
    data: &ToyData,
    warm_cfg: &ObjectiveConfig,
    configs: &[(LossSet, ObjectiveConfig)],
) -> train::TrainResult<Vec<VariantRun>> {
    let xs = data.source.inputs();
    let ys = data.source.labels();
    let xt = data.target.inputs();
    let source = SourceData {
        inputs: &xs,
        labels: &ys,
    };
    let validator = |seg: &Segmenter| Ok(metrics::evaluate(seg, &data.test)?.miou);
    let k = data.source.spec.num_classes;
    let start = Checkpoint::new(train::init_segmenter(warm_cfg, data.source.spec.input_channels, k));
    let warm = train::warmup(start, source, xt.len(), warm_cfg, Some(&validator))?;
    let mut runs = Vec::with_capacity(configs.len());
    for (losses, vcfg) in configs {
        let adapted = train::adapt(
            warm.checkpoint.clone(),
            source,
            &xt,
            vcfg,
            Some(&validator),
            AdaptOptions {
                phase: Phase::Adapt,
                target_labels: None,
                schedule_start: warm.checkpoint.iter,
                steps: vcfg.adapt_iters,
            },
        )
        .map_err(|mut e| {
            let mut log = warm.log.clone();
            log.rows.append(&mut e.log.rows);
            e.log = log;
            e
        })?;
        let mut log = warm.log.clone();
        log.rows.extend(adapted.log.rows);
        log.iters_per_epoch = adapted.log.iters_per_epoch;
        let params = adapted.checkpoint.params;
        let test = metrics::evaluate(&params, &data.test)?;
        runs.push(VariantRun {
            losses: *losses,
            cfg: vcfg.clone(),
            params,
            iter: adapted.checkpoint.iter,
            log,
            test,
        });
    }
    Ok(runs)
}

/// Target-test mIoU per seed and variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// `miou[seed_index][variant_index]`.
    pub miou: Vec<Vec<f64>>,
}

impl AblationSummary {
    pub fn mean(&self) -> Vec<f64> {
        column_stats(&self.miou).0
    }

    pub fn std(&self) -> Vec<f64> {
        column_stats(&self.miou).1
    }
}

/// Column means and sample standard deviations (0 for a single row).
pub fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = rows.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = rows.len() as f64;
    let cols = first.len();
    let mean: Vec<f64> = (0..cols).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..cols)
        .map(|j| {
            if rows.len() < 2 {
                0.0
            } else {
                (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        })
        .collect();
    (mean, std)
}

pub fn run_ablation(
    setup: &ToySetup,
    cfg: &ObjectiveConfig,
    seeds: &[u64],
    variants: &[LossSet],
) -> train::TrainResult<AblationSummary> {
    let mut miou = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = ToyData::generate(setup, seed)?;
        let seed_cfg = ObjectiveConfig { seed, ..cfg.clone() };
        let runs = run_variants(&data, &seed_cfg, variants)?;
        miou.push(runs.iter().map(|r| r.test.miou).collect());
    }
    Ok(AblationSummary {
        variants: variants.iter().map(LossSet::label).collect(),
        seeds: seeds.to_vec(),
        miou,
    })
}

/// CCD of `adapted`, normalized by the CCD of `baseline`, on source vs target data.
pub fn normalized_ccd(adapted: &Segmenter, baseline: &Segmenter, data: &ToyData, variant: CcdVariant) -> Result<CcdReport> {
    let base = metrics::ccd(baseline, &data.source, &data.target, variant)?;
    metrics::ccd(adapted, &data.source, &data.target, variant)?.normalize_by(&base)
}

/// One or more self-training rounds on top of `seg`, scored on the test set.
pub fn self_train_toy(
    seg: &Segmenter,
    data: &ToyData,
    cfg: &ObjectiveConfig,
    confidence: f64,
    rounds: usize,
) -> train::TrainResult<(SelfTrainOutcome, MiouReport)> {
    let xs: Vec<&FeatureMap> = data.source.inputs();
    let ys: Vec<&LabelMap> = data.source.labels();
    let xt = data.target.inputs();
    let validator = |s: &Segmenter| Ok(metrics::evaluate(s, &data.test)?.miou);
    let out = train::self_train(
        seg,
        SourceData {
            inputs: &xs,
            labels: &ys,
        },
        &xt,
        confidence,
        rounds,
        cfg,
        Some(&validator),
    )?;
    let report = metrics::evaluate(&out.params, &data.test)?;
    Ok((out, report))
}
