use crate::error::{Error, Result};
use crate::numerics::{ops, ScoreMap, Tensor};

/// Per-pixel class indices over an `h x w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    /// Marks an unscored / unsupervised pixel.
    pub const IGNORE: u32 = u32::MAX;

    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::LengthMismatch {
                left: h * w,
                right: labels.len(),
            });
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u32) -> Self {
        Self {
            h,
            w,
            labels: vec![label; h * w],
        }
    }

    /// Checks every non-IGNORE value is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l != Self::IGNORE && l as usize >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class: l as usize,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn as_mut_slice(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    /// Label at flat pixel `i`, `None` when ignored.
    pub fn get(&self, i: usize) -> Option<usize> {
        match self.labels[i] {
            Self::IGNORE => None,
            l => Some(l as usize),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        (0..self.labels.len()).map(|i| self.get(i))
    }

    pub fn expect_grid(&self, h: usize, w: usize) -> Result<()> {
        if (self.h, self.w) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: vec![self.h, self.w],
            });
        }
        Ok(())
    }

    /// `[h, w]` tensor with IGNORE encoded as -1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.h, self.w],
            self.iter().map(|l| l.map_or(-1.0, |v| v as f64)).collect(),
        )
        .expect("grid matches")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] => (*h, *w),
            other => {
                return Err(Error::invalid(format!(
                    "label tensor must be [h, w], got {other:?}"
                )))
            }
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v == -1.0 {
                    Ok(Self::IGNORE)
                } else if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::invalid(format!("invalid label value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, labels)
    }
}

/// Per-pixel argmax of a score map; ties go to the lowest class index.
pub fn pseudo_labels(p: &ScoreMap) -> Result<LabelMap> {
    let (h, w) = p.grid()?;
    let labels = p.rows().map(|row| ops::argmax(row) as u32).collect();
    LabelMap::new(h, w, labels)
}

/// Like [`pseudo_labels`] but pixels whose top probability is below
/// `confidence` are marked IGNORE.
pub fn confident_pseudo_labels(p: &ScoreMap, confidence: f64) -> Result<LabelMap> {
    let (h, w) = p.grid()?;
    let labels = p
        .rows()
        .map(|row| {
            let k = ops::argmax(row);
            if row[k] >= confidence {
                k as u32
            } else {
                LabelMap::IGNORE
            }
        })
        .collect();
    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_rows() {
        let p = Tensor::new(
            vec![1, 3, 3],
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(pseudo_labels(&p).unwrap().as_slice(), &[1, 2, 0]);
    }

    #[test]
    fn uniform_row_goes_to_class_zero() {
        let p = Tensor::filled(&[1, 1, 3], 1.0 / 3.0);
        assert_eq!(pseudo_labels(&p).unwrap().as_slice(), &[0]);
    }

    #[test]
    fn random_maps_match_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let mut p = Tensor::from_fn(&[3, 4, k], |_| rng.random::<f64>());
            for i in 0..12 {
                ops::softmax_in_place(p.row_mut(i));
            }
            let labels = pseudo_labels(&p).unwrap();
            for i in 0..12 {
                let row = p.row(i);
                let mut best = 0;
                let mut best_val = f64::NEG_INFINITY;
                for (c, &v) in row.iter().enumerate() {
                    if v > best_val {
                        best_val = v;
                        best = c;
                    }
                }
                assert_eq!(labels.get(i), Some(best));
            }
        }
    }

    #[test]
    fn confidence_masks_low_scores() {
        let p = Tensor::new(vec![1, 2, 2], vec![0.95, 0.05, 0.6, 0.4]).unwrap();
        let y = confident_pseudo_labels(&p, 0.9).unwrap();
        assert_eq!(y.iter().collect::<Vec<_>>(), vec![Some(0), None]);
    }

    #[test]
    fn tensor_encoding_keeps_ignore() {
        let y = LabelMap::new(1, 3, vec![2, LabelMap::IGNORE, 0]).unwrap();
        assert_eq!(y.to_tensor().data(), &[2.0, -1.0, 0.0]);
        assert_eq!(LabelMap::from_tensor(&y.to_tensor()).unwrap(), y);
        assert!(y.validate(3).is_ok());
        assert!(y.validate(2).is_err());
    }
}
