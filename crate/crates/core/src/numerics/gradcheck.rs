//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::tensor::{LossValue, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is (numerically) zero are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InputGradError {
    pub name: String,
    pub max_relative_error: f64,
    /// Flat index of the worst probe.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputGradError>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the analytic gradients returned by `loss` with central differences.
///
/// `loss` receives the tensors in the order of `inputs` and must return a
/// gradient keyed by each input's name. For every input, `probes` coordinates
/// are drawn at random (every coordinate when the input is smaller than that).
pub fn finite_difference_check<F, R>(
    loss: F,
    inputs: &[(&str, Tensor)],
    eps: f64,
    probes: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<LossValue>,
    R: Rng + ?Sized,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut point: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let base = loss(&point)?;
    if !base.value.is_finite() {
        return Err(Error::invalid("loss is not finite at the base point"));
    }

    let mut report = GradCheckReport { inputs: Vec::new() };
    for (slot, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = base.gradient(name)?;
        analytic.expect_shape(tensor.shape())?;
        let coords: Vec<usize> = if tensor.len() <= probes {
            (0..tensor.len()).collect()
        } else {
            (0..probes).map(|_| rng.random_range(0..tensor.len())).collect()
        };

        let mut entry = InputGradError {
            name: name.to_string(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            probes: coords.len(),
        };
        for &idx in &coords {
            let original = point[slot].data()[idx];
            point[slot].data_mut()[idx] = original + eps;
            let plus = loss(&point)?.value;
            point[slot].data_mut()[idx] = original - eps;
            let minus = loss(&point)?.value;
            point[slot].data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::UnstableProbe {
                    input: name.to_string(),
                    index: idx,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if err >= entry.max_relative_error {
                entry.max_relative_error = err;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.inputs.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn squared_norm(inputs: &[Tensor]) -> Result<LossValue> {
        let x = &inputs[0];
        let value = x.data().iter().map(|v| v * v).sum();
        let mut grad = x.clone();
        grad.scale(2.0);
        Ok(LossValue::new(value).with_gradient("x", grad))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[5, 4], |_| rng.random_range(-2.0..2.0));
        let report = finite_difference_check(squared_norm, &[("x", x)], 1e-5, 100, &mut rng).unwrap();
        assert!(report.max_relative_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[6], |i| 0.5 + i as f64);
        let wrong = |inputs: &[Tensor]| {
            let mut lv = squared_norm(inputs)?;
            lv.gradients.get_mut("x").unwrap().scale(1.01);
            Ok(lv)
        };
        let report = finite_difference_check(wrong, &[("x", x)], 1e-5, 10, &mut rng).unwrap();
        assert!(report.max_relative_error() > 1e-3);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[1], |_| 0.0);
        let blowup = |inputs: &[Tensor]| {
            let v = inputs[0].data()[0];
            let value = if v != 0.0 { f64::INFINITY } else { 0.0 };
            Ok(LossValue::new(value).with_gradient("x", Tensor::zeros(&[1])))
        };
        let err = finite_difference_check(blowup, &[("x", x)], 1e-5, 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::UnstableProbe { .. }));
    }

    #[test]
    fn eps_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::zeros(&[2]);
        assert!(finite_difference_check(squared_norm, &[("x", x)], 1e-2, 1, &mut rng).is_err());
    }
}
