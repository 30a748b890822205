//! Finite-difference suite over every differentiable piece: primitives, the
//! four losses and the routed parameter-group gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{self, cluster_stats};
use crate::clustering::{self, build_prototypes, LabelMap};
use crate::error::Result;
use crate::graphcut::{self, ncut_loss_map};
use crate::model::loss::{segmentation_loss, LOGITS};
use crate::model::{check_objective_gradients, total_objective, Batch, ObjectiveConfig, Segmenter};
use crate::numerics::{finite_difference_check, ops, FeatureMap, LossValue, Tensor};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub instances: usize,
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            probes: 100,
            eps: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
}

/// Labels with every class in `0..k` present (first `k` pixels), the rest random.
fn covering_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    let labels = (0..h * w)
        .map(|i| if i < k { i as u32 } else { rng.random_range(0..k as u32) })
        .collect();
    LabelMap::new(h, w, labels).expect("grid matches")
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("1-d")
}

type CaseFn<'a> = Box<dyn Fn(&mut ChaCha8Rng, usize) -> Result<f64> + 'a>;

struct Case<'a> {
    name: &'a str,
    run: CaseFn<'a>,
}

fn primitive_cases(opts: &SuiteOptions) -> Vec<Case<'_>> {
    let eps = opts.eps;
    let probes = opts.probes;
    vec![
        Case {
            name: "softmax",
            run: Box::new(move |rng, i| {
                let n = 2 + i % 6;
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let loss = |x: &[Tensor]| {
                    let p = ops::softmax(x[0].data())?;
                    let g = ops::softmax_backward(&p, &w);
                    Ok(LossValue::new(ops::dot(&p, &w)).with_gradient("z", Tensor::new(vec![n], g)?))
                };
                Ok(finite_difference_check(loss, &[("z", vector(rng, n))], eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            name: "cosine_similarity",
            run: Box::new(move |rng, i| {
                let n = 2 + i % 7;
                let b = vector(rng, n);
                let loss = |x: &[Tensor]| {
                    let a = x[0].data();
                    let cos = ops::cosine_similarity(a, b.data())?;
                    let (ua, ub) = (ops::l2_normalize(a)?, ops::l2_normalize(b.data())?);
                    let g = ops::cosine_grad_wrt_first(&ua, &ub, ops::norm(a), cos);
                    Ok(LossValue::new(cos).with_gradient("a", Tensor::new(vec![n], g)?))
                };
                Ok(finite_difference_check(loss, &[("a", vector(rng, n))], eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            name: "l2_normalize",
            run: Box::new(move |rng, i| {
                let n = 2 + i % 7;
                let w = vector(rng, n);
                let loss = |x: &[Tensor]| {
                    let v = x[0].data();
                    let u = ops::l2_normalize(v)?;
                    let g = ops::l2_normalize_backward(&u, ops::norm(v), w.data());
                    Ok(LossValue::new(ops::dot(&u, w.data())).with_gradient("v", Tensor::new(vec![n], g)?))
                };
                Ok(finite_difference_check(loss, &[("v", vector(rng, n))], eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            name: "euclidean_distance",
            run: Box::new(move |rng, i| {
                let n = 2 + i % 7;
                let b = vector(rng, n);
                let loss = |x: &[Tensor]| {
                    let a = x[0].data();
                    let d = ops::euclidean_distance(a, b.data())?;
                    let g = ops::euclidean_grad_wrt_first(a, b.data(), d);
                    Ok(LossValue::new(d).with_gradient("a", Tensor::new(vec![n], g)?))
                };
                Ok(finite_difference_check(loss, &[("a", vector(rng, n))], eps, probes, rng)?.max_relative_error())
            }),
        },
    ]
}

fn loss_cases(opts: &SuiteOptions) -> Vec<Case<'_>> {
    let eps = opts.eps;
    let probes = opts.probes;
    vec![
        Case {
            name: "L_seg",
            run: Box::new(move |rng, i| {
                let k = 2 + i % 3;
                let logits = random_map(rng, 4, 4, k);
                let y = covering_labels(rng, 4, 4, k);
                let loss = |x: &[Tensor]| segmentation_loss(&x[0], &y);
                Ok(finite_difference_check(loss, &[(LOGITS, logits)], eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            name: "L_c",
            run: Box::new(move |rng, i| {
                let k = 2 + i % 3;
                let c = 3 + i % 6;
                let f = random_map(rng, 4, 4, c);
                let y = covering_labels(rng, 4, 4, k);
                let set = build_prototypes(&f, &y, k, None)?;
                let loss = |x: &[Tensor]| clustering::clustering_loss(&x[0], &y, &set).map(|l| l.loss);
                Ok(finite_difference_check(loss, &[(clustering::FEATURES, f)], eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            name: "L_a",
            run: Box::new(move |rng, i| {
                let k = 2 + i % 3;
                let c = 3 + i % 6;
                let fs = random_map(rng, 4, 4, c);
                let ys = covering_labels(rng, 4, 4, k);
                let source = cluster_stats(&fs, &ys, k)?;
                let ft = random_map(rng, 4, 4, c);
                let yt = covering_labels(rng, 4, 4, k);
                let loss = |x: &[Tensor]| alignment::alignment_loss_wrt_features(&x[0], &yt, &source);
                Ok(finite_difference_check(loss, &[(alignment::FEATURES, ft)], eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            name: "L_n",
            run: Box::new(move |rng, i| {
                let k = 2 + i % 3;
                let c = 3 + i % 6;
                let f = random_map(rng, 4, 4, c);
                let mut p = random_map(rng, 4, 4, k);
                for row in 0..16 {
                    ops::softmax_in_place(p.row_mut(row));
                }
                let loss = |x: &[Tensor]| ncut_loss_map(&x[0], &x[1], 1);
                let inputs = [(graphcut::FEATURES, f), (graphcut::SCORES, p)];
                Ok(finite_difference_check(loss, &inputs, eps, probes, rng)?.max_relative_error())
            }),
        },
    ]
}

struct RoutedInstance {
    seg: Segmenter,
    xs: Vec<FeatureMap>,
    ys: Vec<LabelMap>,
    xt: Vec<FeatureMap>,
}

fn routed_instance(rng: &mut ChaCha8Rng, i: usize) -> RoutedInstance {
    let k = 2 + i % 3;
    let feature_dim = 4 + i % 5;
    let seg = Segmenter::init(3, 5, feature_dim, k, rng);
    RoutedInstance {
        seg,
        xs: vec![random_map(rng, 4, 4, 3), random_map(rng, 4, 4, 3)],
        ys: vec![covering_labels(rng, 4, 4, k), covering_labels(rng, 4, 4, k)],
        xt: vec![random_map(rng, 4, 4, 3), random_map(rng, 4, 4, 3)],
    }
}

fn routed_config() -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_c: 0.7,
        lambda_a: 0.5,
        lambda_n: 0.9,
        affinity_stride: 1,
        ..ObjectiveConfig::default()
    }
}

fn routed_cases(opts: &SuiteOptions) -> Vec<Case<'_>> {
    let eps = opts.eps;
    let probes = opts.probes;
    vec![
        Case {
            name: "routed parameter groups",
            run: Box::new(move |rng, i| {
                let inst = routed_instance(rng, i);
                let xs: Vec<&FeatureMap> = inst.xs.iter().collect();
                let ys: Vec<&LabelMap> = inst.ys.iter().collect();
                let xt: Vec<&FeatureMap> = inst.xt.iter().collect();
                let batch = Batch {
                    source_inputs: &xs,
                    source_labels: &ys,
                    target_inputs: &xt,
                    target_labels: None,
                };
                Ok(check_objective_gradients(&inst.seg, &batch, &routed_config(), eps, probes, rng)?.max_relative_error())
            }),
        },
        Case {
            // Classifier gradient must not see L_c or L_a: compared exactly
            // against the supervised-only classifier gradient.
            name: "classifier routing (lambda_n = 0)",
            run: Box::new(move |rng, i| {
                let inst = routed_instance(rng, i);
                let xs: Vec<&FeatureMap> = inst.xs.iter().collect();
                let ys: Vec<&LabelMap> = inst.ys.iter().collect();
                let xt: Vec<&FeatureMap> = inst.xt.iter().collect();
                let batch = Batch {
                    source_inputs: &xs,
                    source_labels: &ys,
                    target_inputs: &xt,
                    target_labels: None,
                };
                let with_ca = ObjectiveConfig {
                    lambda_n: 0.0,
                    ..routed_config()
                };
                let seg_only = ObjectiveConfig {
                    lambda_c: 0.0,
                    lambda_a: 0.0,
                    ..with_ca.clone()
                };
                let a = total_objective(&inst.seg, &batch, &with_ca)?;
                let b = total_objective(&inst.seg, &batch, &seg_only)?;
                Ok(a.grads.wc.max_abs_diff(&b.grads.wc).max(a.grads.bc.max_abs_diff(&b.grads.bc)))
            }),
        },
    ]
}

/// Runs every check; each entry reports its worst relative error over all instances.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut cases = primitive_cases(opts);
    cases.extend(loss_cases(opts));
    cases.extend(routed_cases(opts));
    let mut out = Vec::with_capacity(cases.len());
    for (n, case) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(n as u64);
        let mut worst: f64 = 0.0;
        for i in 0..opts.instances {
            worst = worst.max((case.run)(&mut rng, i)?);
        }
        // the routing entry is an exact comparison, not a tolerance check
        let passed = if case.name.starts_with("classifier routing") {
            worst == 0.0
        } else {
            worst < TOLERANCE
        };
        log::info!("{}: max relative error {worst:.3e} over {} instances", case.name, opts.instances);
        out.push(SuiteEntry {
            name: case.name.to_string(),
            instances: opts.instances,
            max_relative_error: worst,
            passed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let opts = SuiteOptions {
            instances: 3,
            probes: 20,
            ..SuiteOptions::default()
        };
        let entries = run_suite(&opts).unwrap();
        assert_eq!(entries.len(), 10);
        for e in &entries {
            assert!(e.passed, "{e:?}");
        }
    }
}
