//! Property checks shared by the `properties` and `acceptance` targets.
//! Each runs a proptest runner and returns the first counterexample as text.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clustalign::alignment::{alignment_loss, cluster_stats};
use clustalign::clustering::{build_prototypes, clustering_loss, prototype_probability};
use clustalign::data::{self, DomainSpec};
use clustalign::graphcut::{affinity_matrix, ncut_loss};
use clustalign::model::checkpoint::{load_checkpoint, save_checkpoint};
use clustalign::model::train::{self, SourceData};
use clustalign::model::{ObjectiveConfig, Segmenter};
use clustalign::numerics::{io, ops};
use clustalign::{FeatureMap, LabelMap, Tensor};

pub const CASES: u32 = 64;

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// `(seed, h, w, c, k)` with maps up to 4x4x8 and up to 4 classes.
fn shapes() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..=4, 1usize..=4, 2usize..=8, 2usize..=4)
}

fn map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
}

fn labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k as u32)).collect()).unwrap()
}

/// Labels whose first pixels cover classes `0..k` (as far as the grid allows).
fn covering_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|i| if i < k { i as u32 } else { rng.random_range(0..k as u32) }).collect()).unwrap()
}

fn simplex_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut p = Tensor::from_fn(&[n, k], |_| rng.random_range(-3.0..3.0));
    for i in 0..n {
        ops::softmax_in_place(p.row_mut(i));
    }
    p
}

fn close(a: f64, b: f64, tol: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
    Ok(())
}

/// Softmax, segmenter scores and prototype probabilities all lie on the simplex.
pub fn simplex_sums() -> Result<(), String> {
    run(shapes(), |(seed, h, w, c, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
        close(ops::softmax(&v).unwrap().iter().sum(), 1.0, 1e-12)?;

        let seg = Segmenter::init(3, 5, c, k, &mut rng);
        let scores = seg.forward(&map(&mut rng, h, w, 3)).unwrap().scores;
        for row in scores.rows() {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            close(row.iter().sum(), 1.0, 1e-12)?;
        }

        let f = map(&mut rng, h, w, c);
        let set = build_prototypes(&f, &labels(&mut rng, h, w, k), k, None).unwrap();
        for row in f.rows() {
            let probs = prototype_probability(row, &set).unwrap();
            close(probs.iter().map(|(_, p)| p).sum(), 1.0, 1e-12)?;
        }
        Ok(())
    })
}

/// Affinity rows sum to one and A is unchanged by positive feature scaling.
pub fn row_stochastic_affinity() -> Result<(), String> {
    run((shapes(), 0.01f64..100.0), |((seed, h, w, c, _), scale)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = map(&mut rng, h, w, c);
        let graph = affinity_matrix(&f, 1).unwrap();
        let n = h * w;
        for i in 0..n {
            close(graph.row(i).iter().sum(), 1.0, 1e-12)?;
            prop_assert!(graph.row(i).iter().all(|&a| a > 0.0));
        }
        let mut scaled = f.clone();
        scaled.scale(scale);
        let other = affinity_matrix(&scaled, 1).unwrap();
        for i in 0..n {
            for j in 0..n {
                close(graph.get(i, j), other.get(i, j), 1e-12)?;
            }
        }
        Ok(())
    })
}

/// `0 <= L_n <= K` for any features and any simplex-valued scores.
pub fn ncut_bounds() -> Result<(), String> {
    run(shapes(), |(seed, h, w, c, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = affinity_matrix(&map(&mut rng, h, w, c), 1).unwrap();
        let p = simplex_rows(&mut rng, h * w, k);
        let value = ncut_loss(&p, &graph).unwrap().value;
        prop_assert!(value >= -1e-12 && value <= k as f64 + 1e-12, "L_n = {value}, K = {k}");
        Ok(())
    })
}

/// L_c and L_a depend only on feature directions.
pub fn scale_invariances() -> Result<(), String> {
    run((shapes(), 0.01f64..100.0), |((seed, h, w, c, k), scale)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = map(&mut rng, h, w, c);
        let y = covering_labels(&mut rng, h, w, k);
        let mut scaled = f.clone();
        scaled.scale(scale);
        let lc = |f: &FeatureMap| {
            let set = build_prototypes(f, &y, k, None).unwrap();
            clustering_loss(f, &y, &set).unwrap().loss.value
        };
        close(lc(&f), lc(&scaled), 1e-10)?;

        let fs = map(&mut rng, h, w, c);
        let ys = covering_labels(&mut rng, h, w, k);
        let source = cluster_stats(&fs, &ys, k).unwrap();
        let la = |f: &FeatureMap| {
            let target = cluster_stats(f, &y, k).unwrap();
            alignment_loss(&target, &source).unwrap().value
        };
        close(la(&f), la(&scaled), 1e-10)?;
        Ok(())
    })
}

/// Generation and training are byte-for-byte reproducible.
pub fn determinism() -> Result<(), String> {
    let spec = DomainSpec {
        height: 6,
        width: 6,
        ..DomainSpec::default()
    };
    run((any::<u64>(), 1usize..4), |(seed, n)| {
        let a = data::generate(&spec, n, seed).unwrap();
        let b = data::generate(&spec, n, seed).unwrap();
        let bytes = |d: &data::Dataset| {
            d.samples
                .iter()
                .flat_map(|s| io::to_bytes(&s.input).into_iter().chain(io::to_bytes(&s.label.to_tensor())))
                .collect::<Vec<u8>>()
        };
        prop_assert_eq!(bytes(&a), bytes(&b));
        Ok(())
    })?;

    let src = data::generate(&spec, 4, 1).map_err(|e| e.to_string())?;
    let tgt = data::generate(&spec, 4, 2).map_err(|e| e.to_string())?;
    let cfg = ObjectiveConfig {
        warmup_iters: 6,
        adapt_iters: 6,
        max_iters: 12,
        ..ObjectiveConfig::toy()
    };
    let log_bytes = || -> Result<Vec<u8>, String> {
        let (xs, ys, xt) = (src.inputs(), src.labels(), tgt.inputs());
        let out = train::train(SourceData { inputs: &xs, labels: &ys }, &xt, &cfg, None).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    if log_bytes()? != log_bytes()? {
        return Err("training metrics differ between identical runs".into());
    }
    Ok(())
}

/// Tensors, datasets and checkpoints survive a save/load cycle exactly.
pub fn round_trips() -> Result<(), String> {
    run(shapes(), |(seed, h, w, c, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = map(&mut rng, h, w, c);
        prop_assert_eq!(&io::from_bytes(&io::to_bytes(&t)).unwrap(), &t);

        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec {
            height: 5,
            width: 5,
            num_classes: k,
            class_means: DomainSpec::default().class_means[..k].to_vec(),
            class_spread: vec![0.5; k],
            ..DomainSpec::default()
        };
        let ds = data::generate(&spec, 2, seed).unwrap();
        data::save_dataset(dir.path().join("data"), &ds).unwrap();
        prop_assert_eq!(data::load_dataset(dir.path().join("data")).unwrap(), ds);

        let seg = Segmenter::init(3, 4, c, k, &mut rng);
        save_checkpoint(dir.path().join("ckpt"), &seg, 7, &ObjectiveConfig::default()).unwrap();
        let (back, manifest) = load_checkpoint(dir.path().join("ckpt")).unwrap();
        prop_assert_eq!(back, seg);
        prop_assert_eq!(manifest.iter, 7);
        Ok(())
    })
}

pub type Property = fn() -> Result<(), String>;

pub const ALL: [(&str, Property); 6] = [
    ("simplex sums", simplex_sums),
    ("row-stochastic A", row_stochastic_affinity),
    ("0 <= L_n <= K", ncut_bounds),
    ("scale invariances", scale_invariances),
    ("determinism byte-equality", determinism),
    ("save/load round-trips", round_trips),
];
