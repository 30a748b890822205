//! Per-class first-order cluster statistics and the contrastive alignment
//! loss pulling each target cluster toward its own source cluster and away
//! from the others.

use std::io::Write;

use crate::clustering::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::{ops, FeatureMap, LossValue, Tensor};

/// Gradient key used by [`alignment_loss_wrt_features`].
pub const FEATURES: &str = "f_t";

/// Per-class means `u^k` and their unit directions `U^k`.
///
/// A class is present iff it has at least one pixel and a non-degenerate mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub means: Vec<Option<Vec<f64>>>,
    pub normalized: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl ClusterStats {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.normalized.get(k).is_some_and(Option::is_some)
    }

    pub fn present(&self) -> Vec<bool> {
        (0..self.num_classes()).map(|k| self.is_present(k)).collect()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&k| self.is_present(k)).collect()
    }

    pub fn channels(&self) -> Option<usize> {
        self.means.iter().flatten().next().map(Vec::len)
    }

    fn from_sums(sums: Vec<Vec<f64>>, counts: Vec<usize>) -> Self {
        let mut means = Vec::with_capacity(counts.len());
        let mut normalized = Vec::with_capacity(counts.len());
        for (k, (sum, &count)) in sums.into_iter().zip(&counts).enumerate() {
            if count == 0 {
                means.push(None);
                normalized.push(None);
                continue;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            match ops::l2_normalize(&mean) {
                Ok(unit) => {
                    normalized.push(Some(unit));
                    means.push(Some(mean));
                }
                Err(_) => {
                    log::warn!("class {k}: mean of {count} features has zero norm; treated as absent");
                    normalized.push(None);
                    means.push(None);
                }
            }
        }
        Self {
            means,
            normalized,
            counts,
        }
    }

    /// Exponential moving average toward `batch`: `old * decay + new * (1 - decay)`
    /// for classes present in both; classes new to `self` are adopted as is.
    pub fn ema_update(&mut self, batch: &ClusterStats, decay: f64) {
        for k in 0..self.num_classes().min(batch.num_classes()) {
            let Some(new) = batch.means[k].as_ref() else { continue };
            let merged = match self.means[k].as_ref() {
                Some(old) => old
                    .iter()
                    .zip(new)
                    .map(|(o, n)| decay * o + (1.0 - decay) * n)
                    .collect(),
                None => new.clone(),
            };
            if let Ok(unit) = ops::l2_normalize(&merged) {
                self.means[k] = Some(merged);
                self.normalized[k] = Some(unit);
                self.counts[k] += batch.counts[k];
            }
        }
    }

    /// One row per class: `k, count, u_0.., U_0..`; absent classes leave the
    /// vector fields empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let c = self.channels().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string(), "count".to_string()];
        header.extend((0..c).map(|d| format!("u{d}")));
        header.extend((0..c).map(|d| format!("U{d}")));
        w.write_record(&header)?;
        for k in 0..self.num_classes() {
            let mut record = vec![k.to_string(), self.counts[k].to_string()];
            match (&self.means[k], &self.normalized[k]) {
                (Some(u), Some(unit)) => {
                    record.extend(u.iter().map(f64::to_string));
                    record.extend(unit.iter().map(f64::to_string));
                }
                _ => record.extend(std::iter::repeat_n(String::new(), 2 * c)),
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Class statistics pooled over several `(features, labels)` maps.
pub fn cluster_stats_pooled(maps: &[(&FeatureMap, &LabelMap)], num_classes: usize) -> Result<ClusterStats> {
    let c = maps
        .first()
        .map(|(f, _)| f.row_len())
        .ok_or(Error::EmptyInput)?;
    let mut sums = vec![vec![0.0; c]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, y) in maps {
        let (h, w) = f.grid()?;
        y.expect_grid(h, w)?;
        if f.row_len() != c {
            return Err(Error::LengthMismatch {
                left: c,
                right: f.row_len(),
            });
        }
        for (i, label) in y.iter().enumerate() {
            let Some(k) = label else { continue };
            if k >= num_classes {
                return Err(Error::ClassOutOfRange { class: k, num_classes });
            }
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(f.row(i)) {
                *s += v;
            }
        }
    }
    Ok(ClusterStats::from_sums(sums, counts))
}

pub fn cluster_stats(f: &FeatureMap, y: &LabelMap, num_classes: usize) -> Result<ClusterStats> {
    cluster_stats_pooled(&[(f, y)], num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLoss {
    pub value: f64,
    /// Mutually present classes, ascending.
    pub classes: Vec<usize>,
    /// `dL/du_t^k` for each mutually present class.
    pub grad_means: Vec<Option<Vec<f64>>>,
}

/// Contrastive cluster alignment over the classes present in both stats:
///
/// `L = -(1/K') sum_k log softmax_j(-D(U_t^k, U_s^j))[k]`
///
/// Source statistics are constants; gradients are with respect to the target
/// means.
pub fn alignment_loss(target: &ClusterStats, source: &ClusterStats) -> Result<AlignmentLoss> {
    let classes: Vec<usize> = (0..target.num_classes().min(source.num_classes()))
        .filter(|&k| target.is_present(k) && source.is_present(k))
        .collect();
    if classes.is_empty() {
        return Err(Error::NoAlignableClasses);
    }
    let kp = classes.len() as f64;
    let mut grad_means = vec![None; target.num_classes()];
    let mut total = 0.0;
    let mut logits = vec![0.0; classes.len()];
    let mut dists = vec![0.0; classes.len()];
    for (row, &k) in classes.iter().enumerate() {
        let ut = target.normalized[k].as_ref().expect("present");
        for (col, &j) in classes.iter().enumerate() {
            let us = source.normalized[j].as_ref().expect("present");
            dists[col] = ops::euclidean_distance(ut, us)?;
            logits[col] = -dists[col];
        }
        total -= ops::log_softmax_at(&logits, row);

        // d(-log q_row)/d logit_j = q_j - [j == row]; logit_j = -D_j
        let mut q = logits.clone();
        ops::softmax_in_place(&mut q);
        let mut grad_unit = vec![0.0; ut.len()];
        for (col, &j) in classes.iter().enumerate() {
            let coeff = -(q[col] - if col == row { 1.0 } else { 0.0 }) / kp;
            let us = source.normalized[j].as_ref().expect("present");
            let dd = ops::euclidean_grad_wrt_first(ut, us, dists[col]);
            for (g, d) in grad_unit.iter_mut().zip(dd) {
                *g += coeff * d;
            }
        }
        let mean = target.means[k].as_ref().expect("present");
        grad_means[k] = Some(ops::l2_normalize_backward(ut, ops::norm(mean), &grad_unit));
    }
    Ok(AlignmentLoss {
        value: total / kp,
        classes,
        grad_means,
    })
}

/// Spreads `dL/du^k` back to the pixels of each map: every class-`k` pixel
/// receives `dL/du^k / M_k`, where `M_k` is the pooled count.
pub fn backprop_to_features(
    loss: &AlignmentLoss,
    target: &ClusterStats,
    maps: &[(&FeatureMap, &LabelMap)],
) -> Vec<Tensor> {
    maps.iter()
        .map(|(f, y)| {
            let mut grad = Tensor::zeros(f.shape());
            for (i, label) in y.iter().enumerate() {
                let Some(k) = label else { continue };
                if let Some(Some(gm)) = loss.grad_means.get(k) {
                    let m = target.counts[k] as f64;
                    for (g, v) in grad.row_mut(i).iter_mut().zip(gm) {
                        *g = v / m;
                    }
                }
            }
            grad
        })
        .collect()
}

/// `L_a` as a function of one target feature map, with its gradient under [`FEATURES`].
pub fn alignment_loss_wrt_features(
    f_t: &FeatureMap,
    y_t: &LabelMap,
    source: &ClusterStats,
) -> Result<LossValue> {
    let maps = [(f_t, y_t)];
    let target = cluster_stats_pooled(&maps, source.num_classes())?;
    let loss = alignment_loss(&target, source)?;
    let grad = backprop_to_features(&loss, &target, &maps)
        .pop()
        .expect("one map");
    Ok(LossValue::new(loss.value).with_gradient(FEATURES, grad))
}
