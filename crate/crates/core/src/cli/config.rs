//! Experiment configuration: a TOML document with full defaulting.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DomainSpec, Shift};
use crate::experiment::{LossSet, ToySetup};
use crate::metrics::CcdVariant;
use crate::model::objective::TOY_LAMBDA_SCALE;
use crate::model::ObjectiveConfig;

/// Environment variable naming the root that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CLUSTALIGN_OUTPUT_ROOT";

/// Loss-weight grid of the weight sweeps.
pub const SWEEP_GRID: [f64; 5] = [0.001, 0.0015, 0.002, 0.003, 0.004];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// One method (the configured losses) against its source-only baseline.
    #[default]
    Single,
    /// The five loss combinations from a shared warm-up.
    Ablation,
    SweepLambdaC,
    SweepLambdaN,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Single => "single",
            Preset::Ablation => "ablation",
            Preset::SweepLambdaC => "sweep_lambda_c",
            Preset::SweepLambdaN => "sweep_lambda_n",
        }
    }
}

/// Starting point that the `[objective]` table overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveBase {
    /// Full-scale hyperparameters (momentum 0.9, weight decay 1e-4, poly power 0.9, ...).
    #[default]
    Standard,
    /// Desk-scale schedule and loss weights for the synthetic domains.
    Toy,
}

impl ObjectiveBase {
    pub fn config(&self) -> ObjectiveConfig {
        match self {
            ObjectiveBase::Standard => ObjectiveConfig::default(),
            ObjectiveBase::Toy => ObjectiveConfig::toy(),
        }
    }

    /// Factor applied to the sweep grid.
    pub fn lambda_scale(&self) -> f64 {
        match self {
            ObjectiveBase::Standard => 1.0,
            ObjectiveBase::Toy => TOY_LAMBDA_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: DomainSpec,
    pub shift: Shift,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    /// Saved datasets to use instead of generating; all three or none.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let setup = ToySetup::default();
        Self {
            spec: setup.spec,
            shift: setup.shift,
            n_source: setup.n_source,
            n_target: setup.n_target,
            n_test: setup.n_test,
            source_dir: None,
            target_dir: None,
            test_dir: None,
        }
    }
}

impl DataConfig {
    pub fn setup(&self) -> ToySetup {
        ToySetup {
            spec: self.spec.clone(),
            shift: self.shift,
            n_source: self.n_source,
            n_target: self.n_target,
            n_test: self.n_test,
        }
    }

    pub fn uses_saved(&self) -> bool {
        self.source_dir.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainingConfig {
    pub enabled: bool,
    pub confidence: f64,
    pub rounds: usize,
}

impl Default for SelfTrainingConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            confidence: 0.9,
            rounds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// `[row, col]` pixels of the first test image whose affinity maps are exported.
    pub pixels: Vec<[usize; 2]>,
    /// Stride of the exported affinity edge list.
    pub edge_stride: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pixels: vec![[8, 8]],
            edge_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub objective_base: ObjectiveBase,
    pub objective: ObjectiveConfig,
    pub losses: LossSet,
    pub self_training: SelfTrainingConfig,
    pub data: DataConfig,
    pub ccd_variant: CcdVariant,
    /// Replaces the default sweep grid (already in the units of `objective`).
    pub sweep_values: Option<Vec<f64>>,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Single,
            output_dir: PathBuf::from("run"),
            seeds: vec![0],
            objective_base: ObjectiveBase::Standard,
            objective: ObjectiveConfig::default(),
            losses: LossSet::ALL,
            self_training: SelfTrainingConfig::default(),
            data: DataConfig::default(),
            ccd_variant: CcdVariant::Raw,
            sweep_values: None,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}:{line}:{column}: {message}")]
    Located {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: {message}")]
    Invalid { origin: String, message: String },
}

impl ConfigError {
    fn invalid(origin: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            origin: origin.to_string(),
            message: message.into(),
        }
    }
}

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn located(origin: &str, text: &str, span: Option<Range<usize>>, message: &str) -> ConfigError {
    match span {
        Some(span) => {
            let (line, column) = line_col(text, span.start);
            ConfigError::Located {
                origin: origin.to_string(),
                line,
                column,
                message: message.trim().to_string(),
            }
        }
        None => ConfigError::invalid(origin, message.trim()),
    }
}

/// Command-line overrides, applied after the file and before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.key=value` assignments; values are TOML literals, bare words become strings.
    pub set: Vec<String>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::invalid("--set", format!("`{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::invalid("--set", format!("bad key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::invalid("--set", format!("`{part}` in `{key}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

fn to_table<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).expect("config types serialize to TOML")
}

impl ExperimentConfig {
    /// Parses `text`, applies `overrides`, resolves the objective base and validates.
    ///
    /// Syntax, type and unknown-key errors in the file carry its line and column.
    pub fn parse(text: &str, origin: &str, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| located(origin, text, e.span(), e.message()))?;
        // strict typed pass over the file alone, for located errors
        toml::from_str::<ExperimentConfig>(text).map_err(|e| located(origin, text, e.span(), e.message()))?;

        for assignment in &overrides.set {
            set_path(&mut raw, assignment)?;
        }
        let typed: ExperimentConfig = toml::Value::Table(raw.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::invalid("overrides", e.message()))?;

        let mut objective = to_table(&typed.objective_base.config());
        if let Some(user) = raw.get("objective").and_then(toml::Value::as_table) {
            for (k, v) in user {
                objective.insert(k.clone(), v.clone());
            }
        }
        raw.insert("objective".into(), toml::Value::Table(objective));
        let mut cfg: ExperimentConfig = toml::Value::Table(raw)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::invalid(origin, e.message()))?;

        if let Some(seeds) = &overrides.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(dir) = &overrides.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(preset) = overrides.preset {
            cfg.preset = preset;
        }
        cfg.validate().map_err(|m| ConfigError::invalid(origin, m))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::invalid(&origin, e.to_string()))?;
        Self::parse(&text, &origin, overrides)
    }

    /// Rejects configurations that cannot produce a meaningful run.
    pub fn validate(&self) -> Result<(), String> {
        self.objective.validate().map_err(|e| format!("objective: {e}"))?;
        self.data.spec.validate().map_err(|e| format!("data.spec: {e}"))?;
        self.data.shift.affine(self.data.spec.input_channels).map_err(|e| format!("data.shift: {e}"))?;
        if self.seeds.is_empty() {
            return Err("seeds: at least one seed is required".into());
        }
        let pseudo_label_losses = match self.preset {
            Preset::Single => self.losses.use_c || self.losses.use_n,
            Preset::Ablation => true,
            Preset::SweepLambdaC => true,
            Preset::SweepLambdaN => true,
        };
        if pseudo_label_losses && self.objective.warmup_iters == 0 {
            return Err("L_c and L_n need pseudo-labels from a warmed-up model: set objective.warmup_iters > 0".into());
        }
        let dirs = [&self.data.source_dir, &self.data.target_dir, &self.data.test_dir];
        let given = dirs.iter().filter(|d| d.is_some()).count();
        if given != 0 && given != 3 {
            return Err("data: give all of source_dir, target_dir and test_dir, or none".into());
        }
        if given == 3 && self.seeds.len() > 1 {
            log::warn!("saved datasets are shared by every seed; seeds only change initialization");
        }
        if self.data.n_source == 0 || self.data.n_target == 0 || self.data.n_test == 0 {
            return Err("data: n_source, n_target and n_test must be positive".into());
        }
        let st = &self.self_training;
        if st.enabled && !(st.confidence > 0.5 && st.confidence <= 1.0) {
            return Err(format!("self_training.confidence {} outside (0.5, 1]", st.confidence));
        }
        if st.enabled && st.rounds == 0 {
            return Err("self_training.rounds must be at least 1".into());
        }
        if let Some(values) = &self.sweep_values {
            if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err("sweep_values must be a non-empty list of nonnegative numbers".into());
            }
        }
        let (h, w) = (self.data.spec.height, self.data.spec.width);
        if self.probe.pixels.iter().any(|[r, c]| *r >= h || *c >= w) {
            return Err(format!("probe.pixels must lie inside the {h}x{w} grid"));
        }
        if self.probe.edge_stride == 0 {
            return Err("probe.edge_stride must be positive".into());
        }
        Ok(())
    }

    /// Sweep grid in objective units.
    pub fn sweep_grid(&self) -> Vec<f64> {
        self.sweep_values.clone().unwrap_or_else(|| {
            let scale = self.objective_base.lambda_scale();
            SWEEP_GRID.iter().map(|v| v * scale).collect()
        })
    }

    /// Output directory, resolved against the output-root environment variable when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
