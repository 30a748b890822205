use crate::clustering::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::{ops, LossValue, ScoreMap, Tensor};

/// Probabilities are clamped to this before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

pub const LOGITS: &str = "logits";

/// Mean pixel-wise cross-entropy of a probability map against `y`, skipping
/// IGNORE pixels.
pub fn cross_entropy(p: &ScoreMap, y: &LabelMap) -> Result<f64> {
    let (h, w) = p.grid()?;
    y.expect_grid(h, w)?;
    let k = p.row_len();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, label) in y.iter().enumerate() {
        let Some(c) = label else { continue };
        if c >= k {
            return Err(Error::ClassOutOfRange { class: c, num_classes: k });
        }
        total -= p.row(i)[c].max(LOG_FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok(total / count as f64)
}

/// Summed cross-entropy and per-pixel logit gradients (unnormalized), plus
/// the number of supervised pixels. Lets callers pool several images.
pub(crate) fn cross_entropy_sum(logits: &Tensor, y: &LabelMap) -> Result<(f64, Tensor, usize)> {
    let (h, w) = logits.grid()?;
    y.expect_grid(h, w)?;
    let k = logits.row_len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, label) in y.iter().enumerate() {
        let Some(c) = label else { continue };
        if c >= k {
            return Err(Error::ClassOutOfRange { class: c, num_classes: k });
        }
        let g = grad.row_mut(i);
        g.copy_from_slice(logits.row(i));
        ops::softmax_in_place(g);
        total -= g[c].max(LOG_FLOOR).ln();
        g[c] -= 1.0;
        count += 1;
    }
    Ok((total, grad, count))
}

/// Supervised segmentation loss on logits: mean over labelled pixels of
/// `-log softmax(logits)[y]`, with gradient `(p - onehot)/count` under [`LOGITS`].
pub fn segmentation_loss(logits: &Tensor, y: &LabelMap) -> Result<LossValue> {
    let (total, mut grad, count) = cross_entropy_sum(logits, y)?;
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    grad.scale(1.0 / count as f64);
    Ok(LossValue::new(total / count as f64).with_gradient(LOGITS, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_prediction_costs_nothing() {
        let p = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert!(cross_entropy(&p, &y).unwrap() <= 1e-12);
    }

    #[test]
    fn uniform_prediction_costs_log_k() {
        let p = Tensor::filled(&[2, 2, 4], 0.25);
        let y = LabelMap::new(2, 2, vec![0, 3, 1, 2]).unwrap();
        assert!((cross_entropy(&p, &y).unwrap() - 4f64.ln()).abs() < 1e-12);
        let logits = Tensor::zeros(&[2, 2, 4]);
        assert!((segmentation_loss(&logits, &y).unwrap().value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let y = LabelMap::filled(2, 2, LabelMap::IGNORE);
        assert!(matches!(
            segmentation_loss(&Tensor::zeros(&[2, 2, 3]), &y),
            Err(Error::EmptySupervision)
        ));
    }

    #[test]
    fn gradient_is_p_minus_one_hot_over_count() {
        let logits = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = LabelMap::new(1, 2, vec![0, LabelMap::IGNORE]).unwrap();
        let lv = segmentation_loss(&logits, &y).unwrap();
        let g = lv.gradient(LOGITS).unwrap();
        let e = std::f64::consts::E;
        assert!((g.data()[0] - (e / (e + 1.0) - 1.0)).abs() < 1e-15);
        assert_eq!(&g.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let logits = Tensor::from_fn(&[4, 4, 4], |_| rng.random_range(-3.0..3.0));
            let y = LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..4)).collect()).unwrap();
            let loss = |inputs: &[Tensor]| segmentation_loss(&inputs[0], &y);
            let report = finite_difference_check(loss, &[(LOGITS, logits)], 1e-6, 100, &mut rng).unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }
}
