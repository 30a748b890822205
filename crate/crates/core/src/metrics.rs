//! Confusion matrices, IoU/mIoU and the cross-domain cluster-centre distance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clustering::{self, LabelMap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::numerics::{ops, FeatureMap};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Accumulates one prediction/truth pair; IGNORE truth pixels are not scored.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        let (h, w) = truth.grid();
        pred.expect_grid(h, w)?;
        let k = self.num_classes;
        pred.validate(k)?;
        truth.validate(k)?;
        for (t, p) in truth.iter().zip(pred.iter()) {
            let Some(t) = t else { continue };
            let Some(p) = p else {
                return Err(Error::invalid("predictions must not contain IGNORE where truth is scored"));
            };
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::LengthMismatch {
                left: self.num_classes,
                right: other.num_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`; `None` for classes absent from truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
                let fp: u64 = (0..k).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }

    pub fn report(&self) -> MiouReport {
        let per_class = self.iou();
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        MiouReport {
            per_class,
            miou,
            pixel_accuracy: self.pixel_accuracy().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

pub fn confusion(predictions: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in predictions.iter().zip(truths) {
        cm.add(p, t)?;
    }
    Ok(cm)
}

pub fn miou(predictions: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<MiouReport> {
    Ok(confusion(predictions, truths, num_classes)?.report())
}

pub fn predict(seg: &Segmenter, x: &FeatureMap) -> Result<LabelMap> {
    clustering::pseudo_labels(&seg.forward(x)?.scores)
}

/// Scores `seg` on every sample of `data`.
pub fn evaluate(seg: &Segmenter, data: &Dataset) -> Result<MiouReport> {
    let k = data.spec.num_classes;
    if seg.num_classes() != k {
        return Err(Error::LengthMismatch {
            left: seg.num_classes(),
            right: k,
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for s in &data.samples {
        cm.add(&predict(seg, &s.input)?, &s.label)?;
    }
    Ok(cm.report())
}

/// Which class centres the distance is measured between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcdVariant {
    /// Raw class-mean features.
    #[default]
    Raw,
    /// L2-normalized class means.
    NormalizedMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcdReport {
    pub variant: CcdVariant,
    /// Euclidean distance between source and target class centres; `None`
    /// when the class is missing on either side.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Classes left out of the mean.
    pub flagged: Vec<usize>,
    pub normalizer: Option<Vec<Option<f64>>>,
    pub normalized: Option<Vec<Option<f64>>>,
    pub normalized_mean: Option<f64>,
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Ground-truth class means of the extracted features over a whole dataset.
pub fn class_feature_means(seg: &Segmenter, data: &Dataset) -> Result<Vec<Option<Vec<f64>>>> {
    let k = data.spec.num_classes;
    let c = seg.feature_dim();
    let mut sums = vec![vec![0.0; c]; k];
    let mut counts = vec![0usize; k];
    for s in &data.samples {
        let f = seg.forward(&s.input)?.features;
        for (i, label) in s.label.iter().enumerate() {
            let Some(cls) = label else { continue };
            counts[cls] += 1;
            for (acc, v) in sums[cls].iter_mut().zip(f.row(i)) {
                *acc += v;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(sum, n)| (n > 0).then(|| sum.iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Per-class centre distances from precomputed class means.
pub fn ccd_from_means(
    source: &[Option<Vec<f64>>],
    target: &[Option<Vec<f64>>],
    variant: CcdVariant,
) -> Result<CcdReport> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    let prepare = |v: &Vec<f64>| match variant {
        CcdVariant::Raw => Ok(v.clone()),
        CcdVariant::NormalizedMeans => ops::l2_normalize(v),
    };
    let mut per_class = Vec::with_capacity(source.len());
    let mut flagged = Vec::new();
    for (k, (s, t)) in source.iter().zip(target).enumerate() {
        let d = match (s, t) {
            (Some(s), Some(t)) => match (prepare(s), prepare(t)) {
                (Ok(s), Ok(t)) => Some(ops::euclidean_distance(&s, &t)?),
                _ => None,
            },
            _ => None,
        };
        if d.is_none() {
            log::warn!("CCD undefined for class {k}: centre missing or degenerate");
            flagged.push(k);
        }
        per_class.push(d);
    }
    let mean = mean_of(&per_class);
    Ok(CcdReport {
        variant,
        per_class,
        mean,
        flagged,
        normalizer: None,
        normalized: None,
        normalized_mean: None,
    })
}

/// Cross-domain class-centre distances for `seg`, using ground truth on both sides.
pub fn ccd(seg: &Segmenter, source: &Dataset, target: &Dataset, variant: CcdVariant) -> Result<CcdReport> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput);
    }
    if source.spec.num_classes != target.spec.num_classes {
        return Err(Error::LengthMismatch {
            left: source.spec.num_classes,
            right: target.spec.num_classes,
        });
    }
    ccd_from_means(
        &class_feature_means(seg, source)?,
        &class_feature_means(seg, target)?,
        variant,
    )
}

impl CcdReport {
    /// Divides by a baseline's per-class distances wherever the baseline is positive.
    pub fn normalize_by(mut self, baseline: &CcdReport) -> Result<Self> {
        if baseline.per_class.len() != self.per_class.len() {
            return Err(Error::LengthMismatch {
                left: self.per_class.len(),
                right: baseline.per_class.len(),
            });
        }
        let normalized: Vec<Option<f64>> = self
            .per_class
            .iter()
            .zip(&baseline.per_class)
            .map(|(raw, norm)| match (raw, norm) {
                (Some(r), Some(n)) if *n > 0.0 => Some(r / n),
                _ => None,
            })
            .collect();
        self.normalized_mean = mean_of(&normalized);
        self.normalized = Some(normalized);
        self.normalizer = Some(baseline.per_class.clone());
        Ok(self)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "ccd", "normalizer", "normalized"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (k, raw) in self.per_class.iter().enumerate() {
            let norm = self.normalizer.as_ref().and_then(|n| n[k]);
            let normalized = self.normalized.as_ref().and_then(|n| n[k]);
            w.write_record([k.to_string(), fmt(*raw), fmt(norm), fmt(normalized)])?;
        }
        w.write_record([
            "mean".to_string(),
            fmt(self.mean),
            String::new(),
            fmt(self.normalized_mean),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// One row per method with per-class IoU columns then mIoU, all in percent.
pub fn write_iou_table<W: Write>(out: W, rows: &[(String, MiouReport)], class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string()];
    header.extend(class_names.iter().cloned());
    header.push("mIoU".into());
    w.write_record(&header)?;
    for (name, report) in rows {
        if report.per_class.len() != class_names.len() {
            return Err(Error::LengthMismatch {
                left: class_names.len(),
                right: report.per_class.len(),
            });
        }
        let mut record = vec![name.clone()];
        record.extend(
            report
                .per_class
                .iter()
                .map(|v| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_default()),
        );
        record.push(format!("{:.1}", 100.0 * report.miou));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DomainSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lm(h: usize, w: usize, v: &[u32]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let y = lm(2, 2, &[0, 1, 2, 1]);
        let r = miou(std::slice::from_ref(&y), std::slice::from_ref(&y), 3).unwrap();
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn flipping_a_class_zeroes_its_iou() {
        let truth = lm(2, 3, &[0, 0, 1, 1, 2, 2]);
        let pred = lm(2, 3, &[0, 0, 2, 2, 2, 2]);
        let r = miou(&[pred], &[truth], 3).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));
    }

    #[test]
    fn hand_built_three_by_three() {
        // truth      pred
        // 0 0 1      0 1 1
        // 0 2 1      0 2 2
        // 2 2 X      2 0 0   (X = IGNORE)
        let truth = lm(3, 3, &[0, 0, 1, 0, 2, 1, 2, 2, LabelMap::IGNORE]);
        let pred = lm(3, 3, &[0, 1, 1, 0, 2, 2, 2, 0, 0]);
        let cm = confusion(std::slice::from_ref(&pred), std::slice::from_ref(&truth), 3).unwrap();
        let expected = [[2, 1, 0], [0, 1, 1], [1, 0, 2]];
        for (t, row) in expected.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                assert_eq!(cm.get(t, p), v);
            }
        }
        assert_eq!(cm.total(), 8);
        let r = cm.report();
        // class 0: tp 2, fn 1, fp 1; class 1: tp 1, fn 1, fp 1; class 2: tp 2, fn 1, fp 1
        assert_eq!(r.per_class, vec![Some(0.5), Some(1.0 / 3.0), Some(0.5)]);
        assert!((r.miou - (0.5 + 1.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
        assert_eq!(r.pixel_accuracy, 5.0 / 8.0);
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let y = lm(1, 2, &[0, 1]);
        let r = miou(std::slice::from_ref(&y), std::slice::from_ref(&y), 4).unwrap();
        assert_eq!(r.per_class[2..], [None, None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let y = lm(1, 2, &[0, 3]);
        assert!(miou(std::slice::from_ref(&y), std::slice::from_ref(&y), 3).is_err());
    }

    #[test]
    fn identical_domains_have_zero_ccd_and_self_normalization_is_one() {
        let data = generate(&DomainSpec::default(), 3, 2).unwrap();
        let seg = Segmenter::init(4, 6, 5, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let r = ccd(&seg, &data, &data, CcdVariant::Raw).unwrap();
        assert!(r.per_class.iter().all(|d| *d == Some(0.0)));

        let other = generate(&DomainSpec::default(), 3, 3).unwrap();
        let raw = ccd(&seg, &data, &other, CcdVariant::Raw).unwrap();
        let normalized = raw.clone().normalize_by(&raw).unwrap();
        assert!(normalized.normalized.unwrap().iter().all(|v| *v == Some(1.0)));
        assert_eq!(normalized.normalized_mean, Some(1.0));
    }

    #[test]
    fn missing_classes_are_flagged() {
        let s = vec![Some(vec![0.0, 1.0]), Some(vec![1.0, 0.0]), None];
        let t = vec![Some(vec![0.0, 0.0]), Some(vec![4.0, 4.0]), Some(vec![1.0, 1.0])];
        let r = ccd_from_means(&s, &t, CcdVariant::Raw).unwrap();
        assert_eq!(r.flagged, vec![2]);
        assert_eq!(r.per_class[..2], [Some(1.0), Some(5.0)]);
        assert_eq!(r.mean, Some(3.0));
        let n = ccd_from_means(&s, &t, CcdVariant::NormalizedMeans).unwrap();
        assert_eq!(n.flagged, vec![0, 2]);
    }

    #[test]
    fn table_and_csv_output() {
        let report = MiouReport {
            per_class: vec![Some(0.5), None],
            miou: 0.5,
            pixel_accuracy: 0.5,
        };
        let mut buf = Vec::new();
        write_iou_table(&mut buf, &[("source-only".into(), report)], &["a".into(), "b".into()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "method,a,b,mIoU\nsource-only,50.0,,50.0\n");

        let r = ccd_from_means(&[Some(vec![0.0])], &[Some(vec![2.0])], CcdVariant::Raw)
            .unwrap()
            .normalize_by(&ccd_from_means(&[Some(vec![0.0])], &[Some(vec![4.0])], CcdVariant::Raw).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "class,ccd,normalizer,normalized\n0,2,4,0.5\nmean,2,,0.5\n"
        );
    }
}
