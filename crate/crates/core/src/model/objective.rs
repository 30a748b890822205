//! The full adaptation objective and its gradient routing.
//!
//! The extractor minimizes `L_seg + lc*L_c + la*L_a + ln*L_n`; the classifier
//! minimizes `L_seg + ln*L_n`. Pseudo-labels, prototypes and source cluster
//! statistics are treated as constants within a step, so `L_c` and `L_a`
//! only reach the classifier through the (non-differentiable) argmax and
//! contribute no classifier gradient. The routed gradients are therefore the
//! gradients of a single scalar, which is what the finite-difference checks
//! compare against.

use serde::{Deserialize, Serialize};

use super::loss::cross_entropy_sum;
use super::segmenter::{ForwardPass, Segmenter};
use crate::alignment::{self, ClusterStats};
use crate::clustering::{self, LabelMap, PrototypeSet};
use crate::error::{Error, Result};
use crate::graphcut;
use crate::numerics::{ops, FeatureMap, Tensor};

/// Loss weights, optimizer, schedule and model-size settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_n: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub warmup_iters: usize,
    pub adapt_iters: usize,
    pub max_iters: usize,
    /// 0 picks the smallest stride keeping the graph within 4096 nodes.
    pub affinity_stride: usize,
    pub seed: u64,
    /// Images per domain per step (source and target batches are paired).
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Cap on class members considered during prototype selection.
    pub prototype_cap: Option<usize>,
    /// EMA decay for source cluster statistics across steps; off when `None`.
    pub source_stats_ema: Option<f64>,
    /// Iterations per logged epoch; 0 means one pass over the target set.
    pub iters_per_epoch: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.0015,
            lambda_a: 0.001,
            lambda_n: 0.002,
            base_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            warmup_iters: 2000,
            adapt_iters: 2000,
            max_iters: 4000,
            affinity_stride: 0,
            seed: 0,
            batch_size: 2,
            hidden_dim: 16,
            feature_dim: 8,
            prototype_cap: None,
            source_stats_ema: None,
            iters_per_epoch: 0,
        }
    }
}

/// Loss-weight multiplier of the desk-scale preset.
pub const TOY_LAMBDA_SCALE: f64 = 1000.0;

impl ObjectiveConfig {
    /// Desk-scale preset for the synthetic toy pair: the default loss weights
    /// scaled by [`TOY_LAMBDA_SCALE`] (ratios kept), a larger learning rate and
    /// 300 + 300 iterations.
    pub fn toy() -> Self {
        let d = Self::default();
        Self {
            lambda_c: d.lambda_c * TOY_LAMBDA_SCALE,
            lambda_a: d.lambda_a * TOY_LAMBDA_SCALE,
            lambda_n: d.lambda_n * TOY_LAMBDA_SCALE,
            base_lr: 0.05,
            warmup_iters: 300,
            adapt_iters: 300,
            max_iters: 600,
            ..d
        }
    }

    /// Alternative weighting `lambda_c, lambda_a, lambda_n = 0.001, 0.0015, 0.002`
    /// (the [`Default`] swaps the first two).
    pub fn with_alt_lambdas(self) -> Self {
        Self {
            lambda_c: 0.001,
            lambda_a: 0.0015,
            lambda_n: 0.002,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_c, self.lambda_a, self.lambda_n];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.max_iters < self.warmup_iters + self.adapt_iters {
            return Err(Error::invalid(format!(
                "max_iters {} < warmup_iters {} + adapt_iters {}",
                self.max_iters, self.warmup_iters, self.adapt_iters
            )));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("batch_size, hidden_dim and feature_dim must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::invalid("base_lr must be finite and non-negative"));
        }
        if let Some(decay) = self.source_stats_ema {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::invalid("source_stats_ema must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn stride_for(&self, h: usize, w: usize) -> usize {
        if self.affinity_stride == 0 {
            graphcut::default_stride(h, w)
        } else {
            self.affinity_stride
        }
    }
}

/// One step's worth of paired data.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub source_inputs: &'a [&'a FeatureMap],
    pub source_labels: &'a [&'a LabelMap],
    pub target_inputs: &'a [&'a FeatureMap],
    /// Confident pseudo-labels used as extra supervision during self-training.
    pub target_labels: Option<&'a [&'a LabelMap]>,
}

/// Quantities held constant while differentiating one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub pseudo_labels: Vec<LabelMap>,
    pub prototypes: Vec<Option<PrototypeSet>>,
    pub source_stats: Option<ClusterStats>,
}

/// Per-term values. `None` means the term was disabled (zero weight) or skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg: f64,
    pub seg_target: Option<f64>,
    pub clustering: Option<f64>,
    pub alignment: Option<f64>,
    pub ncut: Option<f64>,
    pub total: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub grads: Segmenter,
}

fn check_batch(seg: &Segmenter, batch: &Batch<'_>) -> Result<()> {
    if batch.source_inputs.is_empty() || batch.target_inputs.is_empty() {
        return Err(Error::invalid("both source and target batches must be non-empty"));
    }
    if batch.source_inputs.len() != batch.source_labels.len() {
        return Err(Error::LengthMismatch {
            left: batch.source_inputs.len(),
            right: batch.source_labels.len(),
        });
    }
    if let Some(labels) = batch.target_labels {
        if labels.len() != batch.target_inputs.len() {
            return Err(Error::LengthMismatch {
                left: batch.target_inputs.len(),
                right: labels.len(),
            });
        }
    }
    let k = seg.num_classes();
    for y in batch.source_labels.iter().chain(batch.target_labels.unwrap_or(&[])) {
        y.validate(k)?;
    }
    Ok(())
}

/// Mean cross-entropy pooled over all labelled pixels of the batch, with its
/// parameter gradients.
fn supervised_grads(seg: &Segmenter, inputs: &[&FeatureMap], labels: &[&LabelMap]) -> Result<(f64, Segmenter)> {
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: labels.len(),
        });
    }
    let passes = inputs.iter().map(|x| seg.forward(x)).collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut per_image = Vec::with_capacity(passes.len());
    for (pass, y) in passes.iter().zip(labels) {
        let (s, g, c) = cross_entropy_sum(&pass.logits, y)?;
        sum += s;
        count += c;
        per_image.push(g);
    }
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    let mut grads = seg.zeros_like();
    for ((x, pass), mut g) in inputs.iter().zip(&passes).zip(per_image) {
        g.scale(1.0 / count as f64);
        seg.backward(x, pass, None, Some(&g), &mut grads)?;
    }
    Ok((sum / count as f64, grads))
}

/// Source-only objective `L_seg` used during warm-up.
pub fn supervised_objective(seg: &Segmenter, inputs: &[&FeatureMap], labels: &[&LabelMap]) -> Result<Objective> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = seg.num_classes();
    for y in labels {
        y.validate(k)?;
    }
    let (value, grads) = supervised_grads(seg, inputs, labels)?;
    Ok(Objective {
        breakdown: LossBreakdown {
            seg: value,
            total: value,
            ..LossBreakdown::default()
        },
        grads,
    })
}

/// Pseudo-labels, prototypes and source statistics at the current parameters.
pub fn freeze(seg: &Segmenter, batch: &Batch<'_>, cfg: &ObjectiveConfig) -> Result<Frozen> {
    check_batch(seg, batch)?;
    let k = seg.num_classes();
    let mut pseudo_labels = Vec::with_capacity(batch.target_inputs.len());
    let mut prototypes = Vec::with_capacity(batch.target_inputs.len());
    for x in batch.target_inputs {
        let pass = seg.forward(x)?;
        let y_hat = clustering::pseudo_labels(&pass.scores)?;
        let protos = if cfg.lambda_c > 0.0 {
            clustering::build_prototypes(&pass.features, &y_hat, k, cfg.prototype_cap).ok()
        } else {
            None
        };
        pseudo_labels.push(y_hat);
        prototypes.push(protos);
    }
    let source_stats = if cfg.lambda_a > 0.0 {
        let passes = batch
            .source_inputs
            .iter()
            .map(|x| seg.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let maps: Vec<_> = passes
            .iter()
            .zip(batch.source_labels)
            .map(|(p, y)| (&p.features, *y))
            .collect();
        Some(alignment::cluster_stats_pooled(&maps, k)?)
    } else {
        None
    };
    Ok(Frozen {
        pseudo_labels,
        prototypes,
        source_stats,
    })
}

/// Evaluates the objective and its routed gradients with freshly frozen constants.
pub fn total_objective(seg: &Segmenter, batch: &Batch<'_>, cfg: &ObjectiveConfig) -> Result<Objective> {
    let frozen = freeze(seg, batch, cfg)?;
    total_objective_with(seg, batch, cfg, &frozen)
}

/// Evaluates the objective holding `frozen` fixed.
pub fn total_objective_with(
    seg: &Segmenter,
    batch: &Batch<'_>,
    cfg: &ObjectiveConfig,
    frozen: &Frozen,
) -> Result<Objective> {
    check_batch(seg, batch)?;
    let k = seg.num_classes();
    let mut breakdown = LossBreakdown::default();

    let (seg_value, mut grads) = supervised_grads(seg, batch.source_inputs, batch.source_labels)?;
    breakdown.seg = seg_value;
    let mut total = breakdown.seg;

    let target_passes: Vec<ForwardPass> = batch
        .target_inputs
        .iter()
        .map(|x| seg.forward(x))
        .collect::<Result<Vec<_>>>()?;
    if frozen.pseudo_labels.len() != target_passes.len() {
        return Err(Error::LengthMismatch {
            left: target_passes.len(),
            right: frozen.pseudo_labels.len(),
        });
    }
    let mut grad_f: Vec<Tensor> = target_passes
        .iter()
        .map(|p| Tensor::zeros(p.features.shape()))
        .collect();
    let mut grad_logits: Vec<Tensor> = target_passes
        .iter()
        .map(|p| Tensor::zeros(p.logits.shape()))
        .collect();

    // pseudo-label supervision (self-training)
    if let Some(labels) = batch.target_labels {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut per_image = Vec::with_capacity(labels.len());
        for (pass, y) in target_passes.iter().zip(labels) {
            let (s, g, c) = cross_entropy_sum(&pass.logits, y)?;
            sum += s;
            count += c;
            per_image.push(g);
        }
        if count > 0 {
            let value = sum / count as f64;
            breakdown.seg_target = Some(value);
            total += value;
            for (acc, g) in grad_logits.iter_mut().zip(&per_image) {
                acc.add_scaled(g, 1.0 / count as f64)?;
            }
        } else {
            breakdown.notes.push("target supervision: no confident pixels".into());
        }
    }

    if cfg.lambda_c > 0.0 {
        let mut values = Vec::new();
        let mut image_grads = Vec::new();
        for (t, pass) in target_passes.iter().enumerate() {
            let Some(protos) = frozen.prototypes.get(t).and_then(Option::as_ref) else {
                continue;
            };
            match clustering::clustering_loss(&pass.features, &frozen.pseudo_labels[t], protos) {
                Ok(lc) if lc.counted > 0 => {
                    if lc.skipped_absent > 0 {
                        breakdown
                            .notes
                            .push(format!("L_c: image {t} skipped {} pixels of absent classes", lc.skipped_absent));
                    }
                    values.push(lc.loss.value);
                    image_grads.push((t, lc.loss.gradients.into_values().next().expect("f_t")));
                }
                Ok(_) => {}
                Err(e) => breakdown.notes.push(format!("L_c: image {t} skipped: {e}")),
            }
        }
        if values.is_empty() {
            breakdown.notes.push("L_c skipped: no usable images".into());
        } else {
            let b = values.len() as f64;
            let value = values.iter().sum::<f64>() / b;
            breakdown.clustering = Some(value);
            total += cfg.lambda_c * value;
            for (t, g) in image_grads {
                grad_f[t].add_scaled(&g, cfg.lambda_c / b)?;
            }
        }
    }

    if cfg.lambda_a > 0.0 {
        let source_stats = frozen
            .source_stats
            .as_ref()
            .ok_or_else(|| Error::invalid("frozen source statistics missing"))?;
        let maps: Vec<_> = target_passes
            .iter()
            .zip(&frozen.pseudo_labels)
            .map(|(p, y)| (&p.features, y))
            .collect();
        let target_stats = alignment::cluster_stats_pooled(&maps, k)?;
        match alignment::alignment_loss(&target_stats, source_stats) {
            Ok(la) => {
                breakdown.alignment = Some(la.value);
                total += cfg.lambda_a * la.value;
                let per_image = alignment::backprop_to_features(&la, &target_stats, &maps);
                for (acc, g) in grad_f.iter_mut().zip(&per_image) {
                    acc.add_scaled(g, cfg.lambda_a)?;
                }
            }
            Err(e) => breakdown.notes.push(format!("L_a skipped: {e}")),
        }
    }

    if cfg.lambda_n > 0.0 {
        let mut values = Vec::new();
        let mut image_grads = Vec::new();
        for (t, pass) in target_passes.iter().enumerate() {
            let (h, w) = pass.features.grid()?;
            match graphcut::ncut_loss_map(&pass.features, &pass.scores, cfg.stride_for(h, w)) {
                Ok(mut ln) => {
                    values.push(ln.value);
                    let gf = ln.take_gradient(graphcut::FEATURES)?;
                    let gp = ln.take_gradient(graphcut::SCORES)?;
                    image_grads.push((t, gf, gp));
                }
                Err(e) => breakdown.notes.push(format!("L_n: image {t} skipped: {e}")),
            }
        }
        if values.is_empty() {
            breakdown.notes.push("L_n skipped: no usable images".into());
        } else {
            let b = values.len() as f64;
            let value = values.iter().sum::<f64>() / b;
            breakdown.ncut = Some(value);
            total += cfg.lambda_n * value;
            let scale = cfg.lambda_n / b;
            for (t, gf, gp) in image_grads {
                grad_f[t].add_scaled(&gf, scale)?;
                let scores = &target_passes[t].scores;
                let gl = &mut grad_logits[t];
                for i in 0..scores.num_rows() {
                    let back = ops::softmax_backward(scores.row(i), gp.row(i));
                    for (acc, v) in gl.row_mut(i).iter_mut().zip(back) {
                        *acc += scale * v;
                    }
                }
            }
        }
    }

    for (t, (x, pass)) in batch.target_inputs.iter().zip(&target_passes).enumerate() {
        let needs_logits = batch.target_labels.is_some() || cfg.lambda_n > 0.0;
        let needs_features = cfg.lambda_c > 0.0 || cfg.lambda_a > 0.0 || cfg.lambda_n > 0.0;
        if !needs_logits && !needs_features {
            continue;
        }
        seg.backward(
            x,
            pass,
            needs_features.then_some(&grad_f[t]),
            needs_logits.then_some(&grad_logits[t]),
            &mut grads,
        )?;
    }

    breakdown.total = total;
    Ok(Objective { breakdown, grads })
}

/// Finite-difference check of every parameter group of the routed objective,
/// holding the frozen constants of the starting point fixed.
pub fn check_objective_gradients<R: rand::Rng + ?Sized>(
    seg: &Segmenter,
    batch: &Batch<'_>,
    cfg: &ObjectiveConfig,
    eps: f64,
    probes: usize,
    rng: &mut R,
) -> Result<crate::numerics::GradCheckReport> {
    let frozen = freeze(seg, batch, cfg)?;
    let names = super::segmenter::PARAM_NAMES;
    let loss = |inputs: &[Tensor]| {
        let params = Segmenter::from_tensors(names.iter().map(|n| n.to_string()).zip(inputs.iter().cloned()).collect())?;
        let obj = total_objective_with(&params, batch, cfg, &frozen)?;
        let mut lv = crate::numerics::LossValue::new(obj.breakdown.total);
        for (name, g) in obj.grads.tensors() {
            lv = lv.with_gradient(name, g.clone());
        }
        Ok(lv)
    };
    let inputs: Vec<(&str, Tensor)> = seg.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    crate::numerics::finite_difference_check(loss, &inputs, eps, probes, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ToyBatch {
        xs: Vec<FeatureMap>,
        ys: Vec<LabelMap>,
        xt: Vec<FeatureMap>,
    }

    fn toy(rng: &mut ChaCha8Rng, k: usize) -> ToyBatch {
        let map = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[4, 4, 3], |_| rng.random_range(-1.0..1.0));
        let labels = |rng: &mut ChaCha8Rng| {
            LabelMap::new(4, 4, (0..16).map(|i| if i < k { i as u32 } else { rng.random_range(0..k as u32) }).collect())
                .unwrap()
        };
        ToyBatch {
            xs: vec![map(rng), map(rng)],
            ys: vec![labels(rng), labels(rng)],
            xt: vec![map(rng), map(rng)],
        }
    }

    fn unit_lambdas() -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_c: 0.7,
            lambda_a: 0.5,
            lambda_n: 0.9,
            affinity_stride: 1,
            ..ObjectiveConfig::default()
        }
    }

    #[test]
    fn routed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = unit_lambdas();
        for case in 0..20 {
            let k = 2 + case % 3;
            let t = toy(&mut rng, k);
            let seg = Segmenter::init(3, 5, 4, k, &mut rng);
            let xs: Vec<&FeatureMap> = t.xs.iter().collect();
            let ys: Vec<&LabelMap> = t.ys.iter().collect();
            let xt: Vec<&FeatureMap> = t.xt.iter().collect();
            let batch = Batch {
                source_inputs: &xs,
                source_labels: &ys,
                target_inputs: &xt,
                target_labels: None,
            };
            let report = check_objective_gradients(&seg, &batch, &cfg, 1e-5, 100, &mut rng).unwrap();
            assert!(report.passes(1e-4), "case {case}: {report:?}");
        }
    }

    #[test]
    fn self_training_term_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t = toy(&mut rng, 3);
        let seg = Segmenter::init(3, 5, 4, 3, &mut rng);
        let yt = [t.ys[1].clone(), LabelMap::filled(4, 4, 2)];
        let xs: Vec<&FeatureMap> = t.xs.iter().collect();
        let ys: Vec<&LabelMap> = t.ys.iter().collect();
        let xt: Vec<&FeatureMap> = t.xt.iter().collect();
        let yt: Vec<&LabelMap> = yt.iter().collect();
        let batch = Batch {
            source_inputs: &xs,
            source_labels: &ys,
            target_inputs: &xt,
            target_labels: Some(&yt),
        };
        let report = check_objective_gradients(&seg, &batch, &unit_lambdas(), 1e-5, 100, &mut rng).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn clustering_and_alignment_never_reach_the_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t = toy(&mut rng, 3);
        let seg = Segmenter::init(3, 5, 4, 3, &mut rng);
        let xs: Vec<&FeatureMap> = t.xs.iter().collect();
        let ys: Vec<&LabelMap> = t.ys.iter().collect();
        let xt: Vec<&FeatureMap> = t.xt.iter().collect();
        let batch = Batch {
            source_inputs: &xs,
            source_labels: &ys,
            target_inputs: &xt,
            target_labels: None,
        };
        let seg_only = ObjectiveConfig {
            lambda_c: 0.0,
            lambda_a: 0.0,
            lambda_n: 0.0,
            ..unit_lambdas()
        };
        let with_ca = ObjectiveConfig {
            lambda_n: 0.0,
            ..unit_lambdas()
        };
        let base = total_objective(&seg, &batch, &seg_only).unwrap();
        let routed = total_objective(&seg, &batch, &with_ca).unwrap();
        assert_eq!(base.grads.wc, routed.grads.wc);
        assert_eq!(base.grads.bc, routed.grads.bc);
        assert_ne!(base.grads.w1, routed.grads.w1);
        assert!(base.breakdown.clustering.is_none() && base.breakdown.ncut.is_none());
        assert_eq!(base.breakdown.total, base.breakdown.seg);

        let full = total_objective(&seg, &batch, &unit_lambdas()).unwrap();
        assert_ne!(full.grads.wc, base.grads.wc);
        let b = &full.breakdown;
        let expected = b.seg + 0.7 * b.clustering.unwrap() + 0.5 * b.alignment.unwrap() + 0.9 * b.ncut.unwrap();
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let t = toy(&mut rng, 2);
        let seg = Segmenter::init(3, 5, 4, 2, &mut rng);
        let xs: Vec<&FeatureMap> = t.xs.iter().collect();
        let ys: Vec<&LabelMap> = t.ys[..1].iter().collect();
        let xt: Vec<&FeatureMap> = t.xt.iter().collect();
        let batch = Batch {
            source_inputs: &xs,
            source_labels: &ys,
            target_inputs: &xt,
            target_labels: None,
        };
        assert!(matches!(
            total_objective(&seg, &batch, &ObjectiveConfig::default()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let bad = ObjectiveConfig {
            lambda_n: -1.0,
            ..ObjectiveConfig::default()
        };
        assert!(bad.validate().is_err());
        let short = ObjectiveConfig {
            max_iters: 10,
            ..ObjectiveConfig::default()
        };
        assert!(short.validate().is_err());
        let text = ObjectiveConfig::default().with_alt_lambdas();
        assert_eq!((text.lambda_c, text.lambda_a), (0.001, 0.0015));
    }
}
