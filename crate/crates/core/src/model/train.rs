//! Warm-up, adaptation and self-training loops.
//!
//! Target data enters as bare input maps; validation is delegated to a
//! caller-supplied closure so ground truth never reaches the loop.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{self, Batch, LossBreakdown, ObjectiveConfig};
use super::optim::{poly_lr, sgd_step, SgdState};
use super::segmenter::Segmenter;
use crate::alignment::ClusterStats;
use crate::clustering::{self, LabelMap};
use crate::error::{Error, Result};
use crate::numerics::FeatureMap;

/// Scores a segmenter on held-out data (typically target mIoU).
pub type Validator<'a> = dyn Fn(&Segmenter) -> Result<f64> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Adapt,
    SelfTrain(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub phase: Phase,
    pub lr: f64,
    pub seg: f64,
    pub clustering: Option<f64>,
    pub alignment: Option<f64>,
    pub ncut: Option<f64>,
    pub total: f64,
    /// Filled on the last iteration of each epoch when a validator is given.
    pub val_miou: Option<f64>,
}

/// Per-epoch means of the logged loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub seg: f64,
    pub clustering: Option<f64>,
    pub alignment: Option<f64>,
    pub ncut: Option<f64>,
    pub total: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<MetricsRow>,
    pub iters_per_epoch: usize,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl TrainLog {
    pub const HEADER: [&'static str; 8] = ["iter", "lr", "L_seg", "L_c", "L_a", "L_n", "total", "val_mIoU"];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.iter.to_string(),
                r.lr.to_string(),
                r.seg.to_string(),
                fmt(r.clustering),
                fmt(r.alignment),
                fmt(r.ncut),
                r.total.to_string(),
                fmt(r.val_miou),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Epoch means over the rows of one phase, in order.
    pub fn epochs(&self, phase: Phase) -> Vec<EpochSummary> {
        let rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.phase == phase).collect();
        let per = self.iters_per_epoch.max(1);
        rows.chunks(per)
            .enumerate()
            .map(|(epoch, chunk)| EpochSummary {
                epoch: epoch + 1,
                seg: chunk.iter().map(|r| r.seg).sum::<f64>() / chunk.len() as f64,
                clustering: mean_opt(chunk.iter().map(|r| r.clustering)),
                alignment: mean_opt(chunk.iter().map(|r| r.alignment)),
                ncut: mean_opt(chunk.iter().map(|r| r.ncut)),
                total: chunk.iter().map(|r| r.total).sum::<f64>() / chunk.len() as f64,
                val_miou: chunk.last().and_then(|r| r.val_miou),
            })
            .collect()
    }
}

/// Parameters, optimizer state and position in the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Segmenter,
    pub state: SgdState,
    /// Next iteration to run.
    pub iter: usize,
}

impl Checkpoint {
    pub fn new(params: Segmenter) -> Self {
        let state = SgdState::new(&params);
        Self { params, state, iter: 0 }
    }
}

/// A failed run, with the last parameters known to be finite.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainError {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
    pub log: TrainLog,
}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
            log: TrainLog::default(),
        }
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Labelled source images as parallel slices.
#[derive(Debug, Clone, Copy)]
pub struct SourceData<'a> {
    pub inputs: &'a [&'a FeatureMap],
    pub labels: &'a [&'a LabelMap],
}

pub fn init_segmenter(cfg: &ObjectiveConfig, input_channels: usize, num_classes: usize) -> Segmenter {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Segmenter::init(input_channels, cfg.hidden_dim, cfg.feature_dim, num_classes, &mut rng)
}

/// Iterations per epoch: `cfg.iters_per_epoch`, or one pass over `n` images.
pub fn epoch_length(cfg: &ObjectiveConfig, n: usize) -> usize {
    if cfg.iters_per_epoch > 0 {
        cfg.iters_per_epoch
    } else {
        n.div_ceil(cfg.batch_size).max(1)
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn phase_rng(cfg: &ObjectiveConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

fn diagnostics(b: &LossBreakdown) -> String {
    format!(
        "L_seg={} L_c={:?} L_a={:?} L_n={:?} total={}",
        b.seg, b.clustering, b.alignment, b.ncut, b.total
    )
}

struct Loop<'a, 'v> {
    cfg: &'a ObjectiveConfig,
    validator: Option<&'a Validator<'v>>,
    epoch_len: usize,
    log: TrainLog,
}

impl Loop<'_, '_> {
    /// Applies one update or returns the failure with the pre-step checkpoint.
    fn step(
        &mut self,
        ckpt: &mut Checkpoint,
        phase: Phase,
        step_in_phase: usize,
        breakdown: LossBreakdown,
        grads: &Segmenter,
        schedule_iter: usize,
    ) -> TrainResult<()> {
        let finite = breakdown.total.is_finite() && grads.all_finite();
        if !finite {
            let what = if breakdown.total.is_finite() { "gradients are non-finite" } else { "loss is non-finite" };
            return Err(self.fail(ckpt, Error::NonFinite {
                iter: ckpt.iter,
                diagnostics: format!("{what}; {}", diagnostics(&breakdown)),
            }));
        }
        let before = ckpt.clone();
        let lr = match sgd_step(&mut ckpt.params, grads, &mut ckpt.state, schedule_iter, self.cfg) {
            Ok(lr) => lr,
            Err(e) => return Err(self.fail(&before, e)),
        };
        if !ckpt.params.all_finite() {
            let e = Error::NonFinite {
                iter: ckpt.iter,
                diagnostics: format!("parameters became non-finite after update; {}", diagnostics(&breakdown)),
            };
            return Err(self.fail(&before, e));
        }
        for note in &breakdown.notes {
            log::debug!("iter {}: {note}", ckpt.iter);
        }
        let val_miou = if (step_in_phase + 1).is_multiple_of(self.epoch_len) {
            match self.validator {
                Some(v) => Some(v(&ckpt.params).map_err(|e| self.fail(&before, e))?),
                None => None,
            }
        } else {
            None
        };
        self.log.rows.push(MetricsRow {
            iter: ckpt.iter,
            phase,
            lr,
            seg: breakdown.seg,
            clustering: breakdown.clustering,
            alignment: breakdown.alignment,
            ncut: breakdown.ncut,
            total: breakdown.total,
            val_miou,
        });
        ckpt.iter += 1;
        Ok(())
    }

    fn fail(&self, last_good: &Checkpoint, error: Error) -> TrainError {
        TrainError {
            error,
            last_good: Some(Box::new(last_good.clone())),
            log: self.log.clone(),
        }
    }
}

/// Source-only training for `cfg.warmup_iters` steps from `start`.
pub fn warmup(
    start: Checkpoint,
    source: SourceData<'_>,
    target_len: usize,
    cfg: &ObjectiveConfig,
    validator: Option<&Validator<'_>>,
) -> TrainResult<TrainOutcome> {
    cfg.validate()?;
    if source.inputs.is_empty() {
        return Err(Error::invalid("source dataset is empty").into());
    }
    let mut rng = phase_rng(cfg, 0);
    let mut lp = Loop {
        cfg,
        validator,
        epoch_len: epoch_length(cfg, target_len.max(1)),
        log: TrainLog::default(),
    };
    lp.log.iters_per_epoch = lp.epoch_len;
    let mut ckpt = start;
    for step in 0..cfg.warmup_iters {
        let idx = sample_indices(&mut rng, source.inputs.len(), cfg.batch_size);
        let xs: Vec<&FeatureMap> = idx.iter().map(|&i| source.inputs[i]).collect();
        let ys: Vec<&LabelMap> = idx.iter().map(|&i| source.labels[i]).collect();
        let obj = objective::supervised_objective(&ckpt.params, &xs, &ys).map_err(|e| lp.fail(&ckpt, e))?;
        let it = ckpt.iter;
        lp.step(&mut ckpt, Phase::Warmup, step, obj.breakdown, &obj.grads, it)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log: lp.log,
    })
}

/// Options for one adaptation run.
#[derive(Debug, Clone, Copy)]
pub struct AdaptOptions<'a> {
    pub phase: Phase,
    /// Confident pseudo-labels per target image (self-training).
    pub target_labels: Option<&'a [LabelMap]>,
    /// Schedule position of the first step; the schedule runs to `cfg.max_iters`.
    pub schedule_start: usize,
    pub steps: usize,
}

/// Adaptation with the full objective, rebuilding pseudo-labels, prototypes,
/// source statistics and the affinity graph every step.
pub fn adapt(
    start: Checkpoint,
    source: SourceData<'_>,
    target: &[&FeatureMap],
    cfg: &ObjectiveConfig,
    validator: Option<&Validator<'_>>,
    opts: AdaptOptions<'_>,
) -> TrainResult<TrainOutcome> {
    cfg.validate()?;
    if source.inputs.is_empty() || target.is_empty() {
        return Err(Error::invalid("source and target datasets must be non-empty").into());
    }
    if let Some(labels) = opts.target_labels {
        if labels.len() != target.len() {
            return Err(Error::LengthMismatch {
                left: target.len(),
                right: labels.len(),
            }
            .into());
        }
    }
    let stream = match opts.phase {
        Phase::Warmup => 0,
        Phase::Adapt => 1,
        Phase::SelfTrain(round) => 2 + round as u64,
    };
    let mut rng = phase_rng(cfg, stream);
    let mut lp = Loop {
        cfg,
        validator,
        epoch_len: epoch_length(cfg, target.len()),
        log: TrainLog::default(),
    };
    lp.log.iters_per_epoch = lp.epoch_len;
    let mut ema: Option<ClusterStats> = None;
    let mut ckpt = start;
    for step in 0..opts.steps {
        let si = sample_indices(&mut rng, source.inputs.len(), cfg.batch_size);
        let ti = sample_indices(&mut rng, target.len(), cfg.batch_size);
        let xs: Vec<&FeatureMap> = si.iter().map(|&i| source.inputs[i]).collect();
        let ys: Vec<&LabelMap> = si.iter().map(|&i| source.labels[i]).collect();
        let xt: Vec<&FeatureMap> = ti.iter().map(|&i| target[i]).collect();
        let yt: Option<Vec<&LabelMap>> = opts.target_labels.map(|l| ti.iter().map(|&i| &l[i]).collect());
        let batch = Batch {
            source_inputs: &xs,
            source_labels: &ys,
            target_inputs: &xt,
            target_labels: yt.as_deref(),
        };
        let result = (|| {
            let mut frozen = objective::freeze(&ckpt.params, &batch, cfg)?;
            if let (Some(decay), Some(stats)) = (cfg.source_stats_ema, frozen.source_stats.as_mut()) {
                let running = ema.get_or_insert_with(|| stats.clone());
                running.ema_update(stats, decay);
                *stats = running.clone();
            }
            objective::total_objective_with(&ckpt.params, &batch, cfg, &frozen)
        })();
        let obj = result.map_err(|e| lp.fail(&ckpt, e))?;
        lp.step(&mut ckpt, opts.phase, step, obj.breakdown, &obj.grads, opts.schedule_start + step)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log: lp.log,
    })
}

/// Warm-up followed by adaptation; `adapt_iters = 0` is source-only training.
pub fn train(
    source: SourceData<'_>,
    target: &[&FeatureMap],
    cfg: &ObjectiveConfig,
    validator: Option<&Validator<'_>>,
) -> TrainResult<TrainOutcome> {
    let k = source
        .labels
        .iter()
        .flat_map(|y| y.iter().flatten())
        .max()
        .map(|m| m + 1)
        .ok_or(Error::EmptySupervision)?;
    train_with_classes(source, target, k, cfg, validator)
}

/// [`train`] with an explicit class count.
pub fn train_with_classes(
    source: SourceData<'_>,
    target: &[&FeatureMap],
    num_classes: usize,
    cfg: &ObjectiveConfig,
    validator: Option<&Validator<'_>>,
) -> TrainResult<TrainOutcome> {
    let channels = source
        .inputs
        .first()
        .map(|x| x.row_len())
        .ok_or_else(|| Error::invalid("source dataset is empty"))?;
    let start = Checkpoint::new(init_segmenter(cfg, channels, num_classes));
    let warm = warmup(start, source, target.len(), cfg, validator)?;
    let schedule_start = warm.checkpoint.iter;
    let adapted = adapt(
        warm.checkpoint,
        source,
        target,
        cfg,
        validator,
        AdaptOptions {
            phase: Phase::Adapt,
            target_labels: None,
            schedule_start,
            steps: cfg.adapt_iters,
        },
    )
    .map_err(|mut e| {
        let mut log = warm.log.clone();
        log.rows.append(&mut e.log.rows);
        e.log = log;
        e
    })?;
    let mut log = warm.log;
    log.rows.extend(adapted.log.rows);
    Ok(TrainOutcome {
        checkpoint: adapted.checkpoint,
        log,
    })
}

/// Minimum fraction of target pixels that must pass the confidence threshold.
pub const MIN_PSEUDO_COVERAGE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub coverage: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub params: Segmenter,
    pub rounds: Vec<RoundReport>,
    pub log: TrainLog,
}

/// Rounds of pseudo-label self-training on top of `seg`.
///
/// Each round labels target pixels whose top probability reaches
/// `confidence` (others IGNORE) and retrains for `cfg.adapt_iters` steps on
/// the full objective plus cross-entropy on those labels, with a fresh
/// schedule and momentum. Rounds with coverage below 1% are skipped.
pub fn self_train(
    seg: &Segmenter,
    source: SourceData<'_>,
    target: &[&FeatureMap],
    confidence: f64,
    rounds: usize,
    cfg: &ObjectiveConfig,
    validator: Option<&Validator<'_>>,
) -> TrainResult<SelfTrainOutcome> {
    if !(confidence > 0.5 && confidence <= 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0.5, 1]")).into());
    }
    if rounds == 0 {
        return Err(Error::invalid("rounds must be at least 1").into());
    }
    let round_cfg = ObjectiveConfig {
        warmup_iters: 0,
        max_iters: cfg.adapt_iters,
        ..cfg.clone()
    };
    let mut params = seg.clone();
    let mut reports = Vec::with_capacity(rounds);
    let mut log = TrainLog::default();
    for round in 0..rounds {
        let labels = target
            .iter()
            .map(|x| clustering::confident_pseudo_labels(&params.forward(x)?.scores, confidence))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = labels.iter().map(LabelMap::len).sum();
        let kept: usize = labels.iter().map(|l| l.iter().flatten().count()).sum();
        let coverage = kept as f64 / total.max(1) as f64;
        if coverage < MIN_PSEUDO_COVERAGE {
            log::warn!("self-training round {round}: pseudo-label coverage {coverage:.4} below 1%, round skipped");
            reports.push(RoundReport {
                round,
                coverage,
                skipped: true,
            });
            continue;
        }
        let outcome = adapt(
            Checkpoint::new(params.clone()),
            source,
            target,
            &round_cfg,
            validator,
            AdaptOptions {
                phase: Phase::SelfTrain(round),
                target_labels: Some(&labels),
                schedule_start: 0,
                steps: round_cfg.adapt_iters,
            },
        )?;
        params = outcome.checkpoint.params;
        log.iters_per_epoch = outcome.log.iters_per_epoch;
        log.rows.extend(outcome.log.rows);
        reports.push(RoundReport {
            round,
            coverage,
            skipped: false,
        });
    }
    Ok(SelfTrainOutcome {
        params,
        rounds: reports,
        log,
    })
}

/// Current learning rate for a schedule position (exposed for logging).
pub fn lr_at(cfg: &ObjectiveConfig, iter: usize) -> f64 {
    poly_lr(cfg.base_lr, iter, cfg.max_iters, cfg.poly_power)
}
