use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ops, FeatureMap, ScoreMap, Tensor};

/// Per-pixel segmenter `C o F`.
///
/// The extractor is `f = W2 tanh(W1 x + b1) + b2`; the classifier produces
/// logits `Wc f + bc` followed by a softmax over classes. Gradients use the
/// same struct.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub wc: Tensor,
    pub bc: Tensor,
}

/// Parameter names, in checkpoint order.
pub const PARAM_NAMES: [&str; 6] = [
    "extractor.w1",
    "extractor.b1",
    "extractor.w2",
    "extractor.b2",
    "classifier.w",
    "classifier.b",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
}

impl Segmenter {
    pub fn zeros(input_channels: usize, hidden: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, input_channels]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[feature_dim, hidden]),
            b2: Tensor::zeros(&[feature_dim]),
            wc: Tensor::zeros(&[num_classes, feature_dim]),
            bc: Tensor::zeros(&[num_classes]),
        }
    }

    /// Uniform Glorot-style initialization with zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_channels: usize,
        hidden: usize,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut seg = Self::zeros(input_channels, hidden, feature_dim, num_classes);
        for w in [&mut seg.w1, &mut seg.w2, &mut seg.wc] {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..limit));
        }
        seg
    }

    /// Extractor that approximately passes its input through
    /// (`f = tanh(eps x) / eps`), with a zero classifier.
    pub fn identity_like(channels: usize, num_classes: usize) -> Self {
        const EPS: f64 = 1e-3;
        let mut seg = Self::zeros(channels, channels, channels, num_classes);
        for i in 0..channels {
            seg.w1.data_mut()[i * channels + i] = EPS;
            seg.w2.data_mut()[i * channels + i] = 1.0 / EPS;
        }
        seg
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Tensor::zeros(self.w1.shape()),
            b1: Tensor::zeros(self.b1.shape()),
            w2: Tensor::zeros(self.w2.shape()),
            b2: Tensor::zeros(self.b2.shape()),
            wc: Tensor::zeros(self.wc.shape()),
            bc: Tensor::zeros(self.bc.shape()),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.wc.shape()[0]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            (PARAM_NAMES[0], &self.w1),
            (PARAM_NAMES[1], &self.b1),
            (PARAM_NAMES[2], &self.w2),
            (PARAM_NAMES[3], &self.b2),
            (PARAM_NAMES[4], &self.wc),
            (PARAM_NAMES[5], &self.bc),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            (PARAM_NAMES[0], &mut self.w1),
            (PARAM_NAMES[1], &mut self.b1),
            (PARAM_NAMES[2], &mut self.w2),
            (PARAM_NAMES[3], &mut self.b2),
            (PARAM_NAMES[4], &mut self.wc),
            (PARAM_NAMES[5], &mut self.bc),
        ]
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("classifier.") {
            ParamGroup::Classifier
        } else {
            ParamGroup::Extractor
        }
    }

    /// Weight matrices receive weight decay; biases do not.
    pub fn is_weight(name: &str) -> bool {
        !name.ends_with(".b") && !name.ends_with(".b1") && !name.ends_with(".b2")
    }

    pub fn from_tensors(mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut take = |name: &str| {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            Ok::<_, Error>(named.swap_remove(pos).1)
        };
        let seg = Self {
            w1: take(PARAM_NAMES[0])?,
            b1: take(PARAM_NAMES[1])?,
            w2: take(PARAM_NAMES[2])?,
            b2: take(PARAM_NAMES[3])?,
            wc: take(PARAM_NAMES[4])?,
            bc: take(PARAM_NAMES[5])?,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        let (hidden, input) = (self.hidden(), self.input_channels());
        let (c, k) = (self.feature_dim(), self.num_classes());
        self.b1.expect_shape(&[hidden])?;
        self.w2.expect_shape(&[c, hidden])?;
        self.b2.expect_shape(&[c])?;
        self.wc.expect_shape(&[k, c])?;
        self.bc.expect_shape(&[k])?;
        self.w1.expect_shape(&[hidden, input])?;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// `self += factor * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Segmenter, factor: f64) -> Result<()> {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, factor)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<ForwardPass> {
        let (h, w) = x.grid()?;
        let input = self.input_channels();
        if x.row_len() != input {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w, input],
                got: x.shape().to_vec(),
            });
        }
        let (hidden, c, k) = (self.hidden(), self.feature_dim(), self.num_classes());
        let mut act = Tensor::zeros(&[h, w, hidden]);
        let mut f = Tensor::zeros(&[h, w, c]);
        let mut logits = Tensor::zeros(&[h, w, k]);
        let mut p = Tensor::zeros(&[h, w, k]);
        for i in 0..h * w {
            let xi = x.row(i);
            let a = act.row_mut(i);
            affine(&self.w1, &self.b1, xi, a);
            a.iter_mut().for_each(|v| *v = v.tanh());
            let a = act.row(i).to_vec();
            affine(&self.w2, &self.b2, &a, f.row_mut(i));
            let fi = f.row(i).to_vec();
            affine(&self.wc, &self.bc, &fi, logits.row_mut(i));
            let pi = p.row_mut(i);
            pi.copy_from_slice(logits.row(i));
            ops::softmax_in_place(pi);
        }
        Ok(ForwardPass {
            hidden: act,
            features: f,
            logits,
            scores: p,
        })
    }

    /// Accumulates parameter gradients for one image into `grads`, given the
    /// upstream gradients with respect to its features and logits.
    pub fn backward(
        &self,
        x: &FeatureMap,
        pass: &ForwardPass,
        grad_features: Option<&Tensor>,
        grad_logits: Option<&Tensor>,
        grads: &mut Segmenter,
    ) -> Result<()> {
        let (h, w) = x.grid()?;
        let (hidden, c, k) = (self.hidden(), self.feature_dim(), self.num_classes());
        let input = self.input_channels();
        if let Some(g) = grad_features {
            g.expect_shape(&[h, w, c])?;
        }
        if let Some(g) = grad_logits {
            g.expect_shape(&[h, w, k])?;
        }
        let mut df = vec![0.0; c];
        let mut da = vec![0.0; hidden];
        for i in 0..h * w {
            df.iter_mut().for_each(|v| *v = 0.0);
            if let Some(gf) = grad_features {
                df.copy_from_slice(gf.row(i));
            }
            if let Some(gl) = grad_logits {
                let dl = gl.row(i);
                let fi = pass.features.row(i);
                for (r, &g) in dl.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grads.bc.data_mut()[r] += g;
                    let wrow = &self.wc.data()[r * c..(r + 1) * c];
                    let grow = &mut grads.wc.data_mut()[r * c..(r + 1) * c];
                    for d in 0..c {
                        grow[d] += g * fi[d];
                        df[d] += g * wrow[d];
                    }
                }
            }
            let ai = pass.hidden.row(i);
            da.iter_mut().for_each(|v| *v = 0.0);
            for (r, &g) in df.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads.b2.data_mut()[r] += g;
                let wrow = &self.w2.data()[r * hidden..(r + 1) * hidden];
                let grow = &mut grads.w2.data_mut()[r * hidden..(r + 1) * hidden];
                for d in 0..hidden {
                    grow[d] += g * ai[d];
                    da[d] += g * wrow[d];
                }
            }
            let xi = x.row(i);
            for (r, &g) in da.iter().enumerate() {
                let dz = g * (1.0 - ai[r] * ai[r]);
                if dz == 0.0 {
                    continue;
                }
                grads.b1.data_mut()[r] += dz;
                let grow = &mut grads.w1.data_mut()[r * input..(r + 1) * input];
                for d in 0..input {
                    grow[d] += dz * xi[d];
                }
            }
        }
        Ok(())
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b.data()[r] + ops::dot(&w.data()[r * cols..(r + 1) * cols], x);
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub hidden: Tensor,
    pub features: FeatureMap,
    pub logits: Tensor,
    pub scores: ScoreMap,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias_features_and_uniform_scores() {
        let mut seg = Segmenter::zeros(3, 4, 2, 5);
        seg.b2.data_mut().copy_from_slice(&[0.5, -1.0]);
        let x = Tensor::filled(&[2, 2, 3], 0.3);
        let pass = seg.forward(&x).unwrap();
        for i in 0..4 {
            assert_eq!(pass.features.row(i), &[0.5, -1.0]);
            assert!(pass.scores.row(i).iter().all(|p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn identity_like_passes_input_through() {
        let seg = Segmenter::identity_like(3, 2);
        let x = Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.1 - 0.5);
        let pass = seg.forward(&x).unwrap();
        assert!(pass.features.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn random_scores_are_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let seg = Segmenter::init(4, 6, 5, 3, &mut rng);
            let x = Tensor::from_fn(&[3, 3, 4], |_| rng.random_range(-3.0..3.0));
            let pass = seg.forward(&x).unwrap();
            for row in pass.scores.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|p| *p > 0.0));
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let seg = Segmenter::zeros(3, 4, 2, 5);
        assert!(seg.forward(&Tensor::zeros(&[2, 2, 4])).is_err());
    }

    #[test]
    fn tensors_round_trip_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = Segmenter::init(2, 3, 4, 2, &mut rng);
        let named = seg
            .tensors()
            .iter()
            .rev()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        assert_eq!(Segmenter::from_tensors(named).unwrap(), seg);
        assert!(Segmenter::is_weight("extractor.w1") && !Segmenter::is_weight("classifier.b"));
        assert_eq!(Segmenter::group_of("classifier.w"), ParamGroup::Classifier);
    }
}
