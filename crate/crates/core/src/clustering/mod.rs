//! Target-domain prototype clustering.
//!
//! Pixels are grouped by pseudo-label; inside each group the member with the
//! largest summed cosine similarity to all members becomes the class
//! prototype. The clustering loss is the negative log-likelihood of each
//! pixel's own prototype under a softmax over cosine similarities to all
//! present prototypes.

mod labels;

pub use labels::{confident_pseudo_labels, pseudo_labels, LabelMap};

use crate::error::{Error, Result};
use crate::numerics::{ops, FeatureMap, LossValue, Tensor};

/// Gradient key used by [`clustering_loss`].
pub const FEATURES: &str = "f_t";

/// Relative score margin below which prototype candidates are tied.
pub const PROTOTYPE_TIE_TOLERANCE: f64 = 1e-12;

/// Features of every pixel labelled `k`, in row-major pixel order, paired with
/// their flat pixel index.
pub fn select_class_features<'a>(
    f: &'a FeatureMap,
    y: &LabelMap,
    k: usize,
    num_classes: usize,
) -> Result<Vec<(usize, &'a [f64])>> {
    if k >= num_classes {
        return Err(Error::ClassOutOfRange {
            class: k,
            num_classes,
        });
    }
    let (h, w) = f.grid()?;
    y.expect_grid(h, w)?;
    Ok(y.iter()
        .enumerate()
        .filter(|(_, l)| *l == Some(k))
        .map(|(i, _)| (i, f.row(i)))
        .collect())
}

/// Picks the member maximizing the summed cosine similarity to all members
/// (itself included). Returns the prototype and its position in `features`.
///
/// `sum_m' cos(b_m, b_m') = b_m/|b_m| . sum_m' b_m'/|b_m'|`, so the score of
/// every candidate is one dot product against the sum of unit vectors.
/// Scores within `PROTOTYPE_TIE_TOLERANCE * M` of the best count as ties and
/// resolve to the lowest index, so rounding noise (e.g. from rescaling the
/// features) cannot flip the choice between equally central members.
pub fn select_prototype(features: &[&[f64]]) -> Result<(Vec<f64>, usize)> {
    let first = features.first().ok_or(Error::AbsentClass)?;
    let c = first.len();
    let mut units = Vec::with_capacity(features.len());
    let mut total = vec![0.0; c];
    for (m, b) in features.iter().enumerate() {
        if b.len() != c {
            return Err(Error::LengthMismatch {
                left: c,
                right: b.len(),
            });
        }
        let unit = ops::l2_normalize(b).map_err(|_| Error::DegenerateFeature(m))?;
        for (t, u) in total.iter_mut().zip(&unit) {
            *t += u;
        }
        units.push(unit);
    }
    let tie = PROTOTYPE_TIE_TOLERANCE * features.len() as f64;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (m, unit) in units.iter().enumerate() {
        let score = ops::dot(unit, &total);
        if score > best_score + tie {
            best_score = score;
            best = m;
        }
    }
    Ok((features[best].to_vec(), best))
}

/// One optional prototype per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Option<Vec<f64>>>,
    /// Flat pixel index the prototype was copied from.
    pub source_index: Vec<Option<usize>>,
}

impl PrototypeSet {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            prototypes: vec![None; num_classes],
            source_index: vec![None; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.prototypes.get(k).is_some_and(Option::is_some)
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&k| self.is_present(k)).collect()
    }
}

/// Builds one prototype per class present in `y`.
///
/// When `max_members` is set, classes with more members are first subsampled
/// to that many evenly spaced pixels (in row-major order).
pub fn build_prototypes(
    f: &FeatureMap,
    y: &LabelMap,
    num_classes: usize,
    max_members: Option<usize>,
) -> Result<PrototypeSet> {
    let mut set = PrototypeSet::empty(num_classes);
    for k in 0..num_classes {
        let mut members = select_class_features(f, y, k, num_classes)?;
        if members.is_empty() {
            continue;
        }
        if let Some(cap) = max_members.filter(|&cap| cap > 0 && members.len() > cap) {
            let m = members.len();
            members = (0..cap).map(|j| members[j * m / cap]).collect();
        }
        let vectors: Vec<&[f64]> = members.iter().map(|(_, b)| *b).collect();
        let (proto, alpha) = select_prototype(&vectors).map_err(|e| match e {
            Error::DegenerateFeature(m) => Error::DegenerateFeature(members[m].0),
            other => other,
        })?;
        set.prototypes[k] = Some(proto);
        set.source_index[k] = Some(members[alpha].0);
    }
    Ok(set)
}

/// Softmax over present classes of the cosine similarity between `feature`
/// and each prototype. Returns `(class, probability)` pairs.
pub fn prototype_probability(
    feature: &[f64],
    prototypes: &PrototypeSet,
) -> Result<Vec<(usize, f64)>> {
    let present = prototypes.present_classes();
    if present.is_empty() {
        return Err(Error::NoPrototypes);
    }
    let mut logits = present
        .iter()
        .map(|&k| {
            let proto = prototypes.prototypes[k].as_ref().expect("present");
            ops::cosine_similarity(feature, proto)
        })
        .collect::<Result<Vec<_>>>()?;
    ops::softmax_in_place(&mut logits);
    Ok(present.into_iter().zip(logits).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringLoss {
    /// `L_c` with its gradient under [`FEATURES`].
    pub loss: LossValue,
    /// Pixels contributing to the mean.
    pub counted: usize,
    /// Labelled pixels skipped because their class has no prototype.
    pub skipped_absent: usize,
}

/// Prototype clustering loss: mean over labelled pixels of
/// `-log p(own pseudo-label | feature)`.
///
/// Prototypes are constants here: the gradient is that of the loss with the
/// prototype vectors held fixed. IGNORE pixels are excluded from the sum and
/// the count.
pub fn clustering_loss(
    f: &FeatureMap,
    y_hat: &LabelMap,
    prototypes: &PrototypeSet,
) -> Result<ClusteringLoss> {
    let (h, w) = f.grid()?;
    y_hat.expect_grid(h, w)?;
    let c = f.row_len();
    let present = prototypes.present_classes();
    if present.is_empty() {
        return Err(Error::NoPrototypes);
    }
    // slot of each class inside `present`
    let mut slot = vec![None; prototypes.num_classes()];
    let mut proto_units = Vec::with_capacity(present.len());
    for (s, &k) in present.iter().enumerate() {
        let proto = prototypes.prototypes[k].as_ref().expect("present");
        if proto.len() != c {
            return Err(Error::LengthMismatch {
                left: c,
                right: proto.len(),
            });
        }
        slot[k] = Some(s);
        proto_units.push(ops::l2_normalize(proto).map_err(|_| Error::DegenerateVector)?);
    }

    let mut grad = Tensor::zeros(f.shape());
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped_absent = 0usize;
    let mut logits = vec![0.0; present.len()];
    for i in 0..h * w {
        let Some(k) = y_hat.get(i) else { continue };
        let Some(own) = slot.get(k).copied().flatten() else {
            skipped_absent += 1;
            continue;
        };
        let feature = f.row(i);
        let fnorm = ops::norm(feature);
        if fnorm <= ops::NORM_EPS {
            return Err(Error::DegenerateFeature(i));
        }
        let unit: Vec<f64> = feature.iter().map(|v| v / fnorm).collect();
        for (logit, pu) in logits.iter_mut().zip(&proto_units) {
            *logit = ops::dot(&unit, pu);
        }
        total -= ops::log_softmax_at(&logits, own);
        counted += 1;

        // d(-log q_own)/d s_j = q_j - [j == own]; d s_j / d f = (pu_j - s_j u) / |f|
        let mut q = logits.clone();
        ops::softmax_in_place(&mut q);
        let g = grad.row_mut(i);
        for (j, pu) in proto_units.iter().enumerate() {
            let coeff = q[j] - if j == own { 1.0 } else { 0.0 };
            if coeff == 0.0 {
                continue;
            }
            let s = logits[j];
            for d in 0..c {
                g[d] += coeff * (pu[d] - s * unit[d]) / fnorm;
            }
        }
    }

    let value = if counted > 0 { total / counted as f64 } else { 0.0 };
    if counted > 0 {
        grad.scale(1.0 / counted as f64);
    }
    Ok(ClusteringLoss {
        loss: LossValue::new(value).with_gradient(FEATURES, grad),
        counted,
        skipped_absent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive_alpha(features: &[Vec<f64>]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (m, a) in features.iter().enumerate() {
            let mut score = 0.0;
            for b in features {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                score += dot / (na * nb);
            }
            if score > best_score {
                best_score = score;
                best = m;
            }
        }
        best
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn select_features_examples() {
        let f = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let all = LabelMap::filled(2, 2, 1);
        let got = select_class_features(&f, &all, 1, 3).unwrap();
        assert_eq!(got.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(select_class_features(&f, &all, 0, 3).unwrap().is_empty());
        assert!(select_class_features(&f, &all, 3, 3).is_err());

        let checker = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let even = select_class_features(&f, &checker, 0, 2).unwrap();
        assert_eq!(even, vec![(0, &[0.0, 1.0][..]), (3, &[6.0, 7.0][..])]);
    }

    #[test]
    fn prototype_examples() {
        let same = vec![vec![0.5, 0.5]; 4];
        let refs: Vec<&[f64]> = same.iter().map(Vec::as_slice).collect();
        assert_eq!(select_prototype(&refs).unwrap().1, 0);

        let norm = (1.0f64 + 0.01).sqrt();
        let trio = [vec![1.0, 0.0], vec![1.0 / norm, 0.1 / norm], vec![0.0, 1.0]];
        let refs: Vec<&[f64]> = trio.iter().map(Vec::as_slice).collect();
        // scores: m0 = 1 + 0.995 + 0 = 1.995, m1 = 0.995 + 1 + 0.0995 = 2.0945, m2 = 1.0995
        assert_eq!(exhaustive_alpha(&trio), 1);
        let (proto, alpha) = select_prototype(&refs).unwrap();
        assert_eq!(alpha, 1);
        assert_eq!(proto, trio[1]);

        let doubled: Vec<Vec<f64>> = trio.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        let refs: Vec<&[f64]> = doubled.iter().map(Vec::as_slice).collect();
        assert_eq!(select_prototype(&refs).unwrap().1, 1);

        assert!(matches!(select_prototype(&[]), Err(Error::AbsentClass)));
        let bad = [vec![1.0, 0.0], vec![0.0, 0.0]];
        let refs: Vec<&[f64]> = bad.iter().map(Vec::as_slice).collect();
        assert!(matches!(select_prototype(&refs), Err(Error::DegenerateFeature(1))));
    }

    #[test]
    fn prototype_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let m = rng.random_range(1..=50);
            let c = rng.random_range(1..=8);
            let feats: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            assert_eq!(select_prototype(&refs).unwrap().1, exhaustive_alpha(&feats));
        }
    }

    #[test]
    fn build_prototypes_points_back_to_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_map(&mut rng, 4, 4, 3);
        let y = LabelMap::new(4, 4, (0..16).map(|i| (i % 3) as u32).collect()).unwrap();
        let set = build_prototypes(&f, &y, 4, None).unwrap();
        assert_eq!(set.present_classes(), vec![0, 1, 2]);
        for k in 0..3 {
            let idx = set.source_index[k].unwrap();
            assert_eq!(y.get(idx), Some(k));
            assert_eq!(set.prototypes[k].as_deref().unwrap(), f.row(idx));
        }
        assert!(!set.is_present(3));

        let capped = build_prototypes(&f, &y, 4, Some(2)).unwrap();
        for k in 0..3 {
            let idx = capped.source_index[k].unwrap();
            assert_eq!(capped.prototypes[k].as_deref().unwrap(), f.row(idx));
        }
    }

    #[test]
    fn probability_examples() {
        let mut set = PrototypeSet::empty(2);
        set.prototypes[1] = Some(vec![1.0, 2.0]);
        let p = prototype_probability(&[3.0, -1.0], &set).unwrap();
        assert_eq!(p, vec![(1, 1.0)]);

        let mut set = PrototypeSet::empty(2);
        set.prototypes[0] = Some(vec![1.0, 0.0]);
        set.prototypes[1] = Some(vec![0.0, 1.0]);
        let p = prototype_probability(&[1.0, 0.0], &set).unwrap();
        assert!((p[0].1 - 0.7311).abs() < 1e-4 && (p[1].1 - 0.2689).abs() < 1e-4);

        let p = prototype_probability(&[1.0, 1.0], &set).unwrap();
        assert!((p[0].1 - 0.5).abs() < 1e-12);

        assert!(matches!(
            prototype_probability(&[1.0], &PrototypeSet::empty(3)),
            Err(Error::NoPrototypes)
        ));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_map(&mut rng, 3, 3, 4);
        let y = LabelMap::filled(3, 3, 0);
        let set = build_prototypes(&f, &y, 1, None).unwrap();
        assert_eq!(clustering_loss(&f, &y, &set).unwrap().loss.value, 0.0);
    }

    #[test]
    fn closed_form_two_orthogonal_prototypes() {
        // pixels sit exactly on their prototype; the other prototype is orthogonal
        let f = Tensor::new(vec![1, 4, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        let y = LabelMap::new(1, 4, vec![0, 1, 0, 1]).unwrap();
        let set = build_prototypes(&f, &y, 2, None).unwrap();
        let lc = clustering_loss(&f, &y, &set).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((lc.loss.value - expected).abs() < 1e-12);
        assert!((lc.loss.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn ignore_and_absent_pixels_are_excluded() {
        let f = Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = LabelMap::new(1, 3, vec![0, LabelMap::IGNORE, 1]).unwrap();
        let mut set = PrototypeSet::empty(2);
        set.prototypes[0] = Some(vec![1.0, 0.0]);
        let lc = clustering_loss(&f, &y, &set).unwrap();
        assert_eq!(lc.counted, 1);
        assert_eq!(lc.skipped_absent, 1);
        assert_eq!(lc.loss.value, 0.0);
        assert!(lc.loss.gradient(FEATURES).unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let f = random_map(&mut rng, 4, 4, 8);
            let y = LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let set = build_prototypes(&f, &y, 3, None).unwrap();
            let loss = |inputs: &[Tensor]| clustering_loss(&inputs[0], &y, &set).map(|l| l.loss);
            let report =
                finite_difference_check(loss, &[(FEATURES, f)], 1e-6, 100, &mut rng).unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn loss_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_map(&mut rng, 4, 4, 5);
        let y = LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..3)).collect()).unwrap();
        let set = build_prototypes(&f, &y, 3, None).unwrap();
        let base = clustering_loss(&f, &y, &set).unwrap().loss.value;
        let mut scaled = f.clone();
        scaled.scale(3.7);
        let set2 = build_prototypes(&scaled, &y, 3, None).unwrap();
        let other = clustering_loss(&scaled, &y, &set2).unwrap().loss.value;
        assert!((base - other).abs() < 1e-12);
        assert!(base >= 0.0);
    }
}
