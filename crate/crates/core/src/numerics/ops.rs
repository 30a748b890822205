//! Differentiable vector primitives shared by every loss.

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax over a non-empty slice, overwriting it.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(softmax(v)[k])`, stable for large logits.
pub fn log_softmax_at(v: &[f64], k: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v[k] - lse
}

/// Backprop through softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `d cos(a, b) / d a`, written in terms of the unit vectors of `a` and `b`.
///
/// `a_unit`, `b_unit` are `a/|a|`, `b/|b|`; `cos` their dot product.
pub fn cosine_grad_wrt_first(a_unit: &[f64], b_unit: &[f64], a_norm: f64, cos: f64) -> Vec<f64> {
    a_unit
        .iter()
        .zip(b_unit)
        .map(|(ua, ub)| (ub - cos * ua) / a_norm)
        .collect()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= NORM_EPS {
        return Err(Error::ZeroNormStatistic);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backprop through `u -> u/|u|`: given the unit output, `|u|` and `dL/dU`, returns `dL/du`.
pub fn l2_normalize_backward(unit: &[f64], input_norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let along = dot(grad_unit, unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - along * u) / input_norm)
        .collect()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `d |a - b| / d a`. Zero at coincident points (subgradient).
pub fn euclidean_grad_wrt_first(a: &[f64], b: &[f64], dist: f64) -> Vec<f64> {
    if dist <= NORM_EPS {
        return vec![0.0; a.len()];
    }
    a.iter().zip(b).map(|(x, y)| (x - y) / dist).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!(close(p[0], e / (e + 1.0), 1e-12));
        assert!(close(p[0], 0.7311, 1e-4));
        assert!(close(p[1], 0.2689, 1e-4));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(close(p[0], 1.0, 1e-12) && p[1] < 1e-300);
        assert!(matches!(softmax(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let v = [0.3, -1.2, 2.5];
        let p = softmax(&v).unwrap();
        for (k, pk) in p.iter().enumerate() {
            assert!(close(log_softmax_at(&v, k), pk.ln(), 1e-12));
        }
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -0.7, 1.1];
        assert!(close(cosine_similarity(&a, &a).unwrap(), 1.0, 1e-12));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 1.0, 1e-12));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(u[0], 0.6, 1e-12) && close(u[1], 0.8, 1e-12));
        assert_eq!(l2_normalize(&u).unwrap(), u);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNormStatistic)));
    }

    #[test]
    fn distance_examples() {
        let a = [1.5, -2.0];
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let a = [0.4, -1.3, 0.8];
        let b = [1.1, 0.2, -0.5];
        let h = 1e-6;
        let (na, nb) = (norm(&a), norm(&b));
        let ua: Vec<f64> = a.iter().map(|x| x / na).collect();
        let ub: Vec<f64> = b.iter().map(|x| x / nb).collect();
        let cos = dot(&ua, &ub);
        let g = cosine_grad_wrt_first(&ua, &ub, na, cos);
        let gd = euclidean_grad_wrt_first(&a, &b, euclidean_distance(&a, &b).unwrap());
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine_similarity(&ap, &b).unwrap() - cosine_similarity(&am, &b).unwrap())
                / (2.0 * h);
            assert!(close(g[i], fd, 1e-8));
            let fd = (euclidean_distance(&ap, &b).unwrap() - euclidean_distance(&am, &b).unwrap())
                / (2.0 * h);
            assert!(close(gd[i], fd, 1e-8));
        }
    }
}
