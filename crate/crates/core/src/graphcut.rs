//! Feature affinity graph over target pixels and the soft normalized-cut loss.
//!
//! `A_ij = softmax_j(cos(f_i, f_j))` over the retained pixels (self term
//! included), `d = A 1`, and
//!
//! `L_n = sum_k p_k^T A (1 - p_k) / (d^T p_k)`
//!
//! where `p_k` is the column of class-`k` probabilities. [`hard_ncut_value`]
//! and [`spectral_cluster`] are independent reference routes used to check it.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ops, FeatureMap, LossValue, ScoreMap, Tensor};

/// Classes whose degree-weighted mass is at or below this are left out of `L_n`.
pub const MIN_CLASS_MASS: f64 = 1e-12;

/// Largest graph the default stride aims for.
pub const MAX_DEFAULT_NODES: usize = 4096;

pub const FEATURES: &str = "f_t";
pub const SCORES: &str = "p_t";

/// Row-stochastic affinity over `n` retained pixels, stored densely row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub n: usize,
    pub a: Vec<f64>,
    pub degree: Vec<f64>,
    /// `(row, col)` of each node in the source feature map.
    pub pixel_index: Vec<(usize, usize)>,
    cache: Option<FeatureCache>,
}

/// Unit features, their norms and pairwise cosines, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
struct FeatureCache {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    cos: Vec<f64>,
}

impl AffinityGraph {
    /// Wraps an explicit `n x n` matrix. Graphs built this way carry no
    /// features, so [`affinity_backward`] is unavailable for them.
    pub fn from_matrix(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::LengthMismatch {
                left: n * n,
                right: a.len(),
            });
        }
        let degree = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(Self {
            n,
            a,
            degree,
            pixel_index: (0..n).map(|i| (0, i)).collect(),
            cache: None,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    /// Flat pixel indices of the nodes for a map of width `w`.
    pub fn flat_indices(&self, w: usize) -> Vec<usize> {
        self.pixel_index.iter().map(|&(r, c)| r * w + c).collect()
    }

    pub fn write_dense_csv<W: Write>(&self, out: W) -> Result<()> {
        let t = Tensor::new(vec![self.n, self.n], self.a.clone())?;
        crate::numerics::io::write_csv(out, &t)
    }

    /// `i,j,a_ij` for every ordered pair.
    pub fn write_edge_list<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "a_ij"])?;
        for i in 0..self.n {
            for j in 0..self.n {
                w.write_record([i.to_string(), j.to_string(), self.get(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Flat indices of the pixels kept at `stride` (every `stride`-th row and column).
pub fn retained_pixels(h: usize, w: usize, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    (0..h)
        .step_by(stride)
        .flat_map(|r| (0..w).step_by(stride).map(move |c| (r, c)))
        .collect()
}

/// Smallest stride keeping at most [`MAX_DEFAULT_NODES`] nodes.
pub fn default_stride(h: usize, w: usize) -> usize {
    (1..)
        .find(|&s| h.div_ceil(s) * w.div_ceil(s) <= MAX_DEFAULT_NODES)
        .expect("stride search terminates")
}

pub fn affinity_matrix(f: &FeatureMap, stride: usize) -> Result<AffinityGraph> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let (h, w) = f.grid()?;
    let pixel_index = retained_pixels(h, w, stride);
    let n = pixel_index.len();
    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for &(r, c) in &pixel_index {
        let v = f.row(r * w + c);
        let nv = ops::norm(v);
        if nv <= ops::NORM_EPS {
            return Err(Error::DegenerateFeature(r * w + c));
        }
        units.push(v.iter().map(|x| x / nv).collect::<Vec<_>>());
        norms.push(nv);
    }
    let mut cos = vec![0.0; n * n];
    for i in 0..n {
        cos[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = ops::dot(&units[i], &units[j]).clamp(-1.0, 1.0);
            cos[i * n + j] = s;
            cos[j * n + i] = s;
        }
    }
    let mut a = cos.clone();
    for row in a.chunks_exact_mut(n) {
        ops::softmax_in_place(row);
    }
    let degree = a.chunks_exact(n).map(|row| row.iter().sum()).collect();
    Ok(AffinityGraph {
        n,
        a,
        degree,
        pixel_index,
        cache: Some(FeatureCache { units, norms, cos }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcutLoss {
    pub value: f64,
    /// `dL/dp`, `[n, K]`.
    pub grad_p: Tensor,
    /// `dL/dA`, dense `n x n`.
    pub grad_a: Vec<f64>,
    /// Classes left out for having (numerically) no mass.
    pub skipped_classes: Vec<usize>,
}

/// Soft normalized cut of `p` (`[n, K]`, rows on the simplex) on `graph`.
pub fn ncut_loss(p: &Tensor, graph: &AffinityGraph) -> Result<NcutLoss> {
    let n = graph.n;
    if p.rank() != 2 || p.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n, p.row_len()],
            got: p.shape().to_vec(),
        });
    }
    let k_count = p.row_len();
    let mut grad_p = Tensor::zeros(p.shape());
    let mut grad_a = vec![0.0; n * n];
    let mut value = 0.0;
    let mut skipped_classes = Vec::new();
    let mut pk = vec![0.0; n];
    let mut a_comp = vec![0.0; n];
    let mut at_p = vec![0.0; n];
    for k in 0..k_count {
        for (i, v) in pk.iter_mut().enumerate() {
            *v = p.data()[i * k_count + k];
        }
        let mass = ops::dot(&graph.degree, &pk);
        if mass <= MIN_CLASS_MASS {
            skipped_classes.push(k);
            continue;
        }
        // A (1 - p) and A^T p
        at_p.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let row = graph.row(i);
            a_comp[i] = row.iter().zip(&pk).map(|(a, pj)| a * (1.0 - pj)).sum();
            for (acc, a) in at_p.iter_mut().zip(row) {
                *acc += pk[i] * a;
            }
        }
        let cut = ops::dot(&pk, &a_comp);
        let term = cut / mass;
        value += term;
        for i in 0..n {
            grad_p.data_mut()[i * k_count + k] = (a_comp[i] - at_p[i] - term * graph.degree[i]) / mass;
            let scale = pk[i] / mass;
            if scale == 0.0 {
                continue;
            }
            let g_row = &mut grad_a[i * n..(i + 1) * n];
            for (g, pj) in g_row.iter_mut().zip(&pk) {
                *g += scale * (1.0 - pj - term);
            }
        }
    }
    Ok(NcutLoss {
        value,
        grad_p,
        grad_a,
        skipped_classes,
    })
}

/// Backprop `dL/dA` through the row softmax and the cosine similarities.
/// Returns `dL/df` for each node as an `[n, c]` tensor.
pub fn affinity_backward(graph: &AffinityGraph, grad_a: &[f64]) -> Result<Tensor> {
    let cache = graph
        .cache
        .as_ref()
        .ok_or_else(|| Error::invalid("graph was not built from features"))?;
    let n = graph.n;
    if grad_a.len() != n * n {
        return Err(Error::LengthMismatch {
            left: n * n,
            right: grad_a.len(),
        });
    }
    let c = cache.units.first().map_or(0, Vec::len);
    // dL/dS through each row softmax
    let mut grad_s = vec![0.0; n * n];
    for i in 0..n {
        let a_row = graph.row(i);
        let g_row = &grad_a[i * n..(i + 1) * n];
        let inner = ops::dot(a_row, g_row);
        for j in 0..n {
            grad_s[i * n + j] = a_row[j] * (g_row[j] - inner);
        }
    }
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let ui = &cache.units[i];
        let mut acc = vec![0.0; c];
        for j in 0..n {
            if j == i {
                continue;
            }
            let weight = grad_s[i * n + j] + grad_s[j * n + i];
            if weight == 0.0 {
                continue;
            }
            let s = cache.cos[i * n + j];
            for (d, a) in acc.iter_mut().enumerate() {
                *a += weight * (cache.units[j][d] - s * ui[d]);
            }
        }
        let inv = 1.0 / cache.norms[i];
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = a * inv;
        }
    }
    Ok(out)
}

/// Rows of `p_t` at the graph's nodes, as an `[n, K]` matrix.
pub fn gather_scores(p_t: &ScoreMap, graph: &AffinityGraph) -> Result<Tensor> {
    let (_, w) = p_t.grid()?;
    let k = p_t.row_len();
    let mut data = Vec::with_capacity(graph.n * k);
    for idx in graph.flat_indices(w) {
        data.extend_from_slice(p_t.row(idx));
    }
    Tensor::new(vec![graph.n, k], data)
}

/// `L_n` for one target image: builds the graph from `f_t` at `stride` and
/// returns gradients with respect to both the features (through `A`) and the
/// score map.
pub fn ncut_loss_map(f_t: &FeatureMap, p_t: &ScoreMap, stride: usize) -> Result<LossValue> {
    let (h, w) = f_t.grid()?;
    if p_t.grid()? != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, p_t.row_len()],
            got: p_t.shape().to_vec(),
        });
    }
    let graph = affinity_matrix(f_t, stride)?;
    let p = gather_scores(p_t, &graph)?;
    let loss = ncut_loss(&p, &graph)?;
    let node_grad_f = affinity_backward(&graph, &loss.grad_a)?;
    let mut grad_f = Tensor::zeros(f_t.shape());
    let mut grad_p = Tensor::zeros(p_t.shape());
    for (node, idx) in graph.flat_indices(w).into_iter().enumerate() {
        grad_f.row_mut(idx).copy_from_slice(node_grad_f.row(node));
        grad_p.row_mut(idx).copy_from_slice(loss.grad_p.row(node));
    }
    Ok(LossValue::new(loss.value)
        .with_gradient(FEATURES, grad_f)
        .with_gradient(SCORES, grad_p))
}

/// Classic K-way normalized cut of a hard labelling, summed edge by edge:
/// `sum_k cut(V_k, V \ V_k) / assoc(V_k, V)`. Empty classes contribute nothing.
pub fn hard_ncut_value(labels: &[usize], graph: &AffinityGraph, num_classes: usize) -> Result<f64> {
    if labels.len() != graph.n {
        return Err(Error::LengthMismatch {
            left: graph.n,
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            num_classes,
        });
    }
    let mut total = 0.0;
    for k in 0..num_classes {
        let mut cut = 0.0;
        let mut assoc = 0.0;
        for i in (0..graph.n).filter(|&i| labels[i] == k) {
            for (j, &lj) in labels.iter().enumerate() {
                let a = graph.get(i, j);
                assoc += a;
                if lj != k {
                    cut += a;
                }
            }
        }
        if assoc > 0.0 {
            total += cut / assoc;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    pub seed: u64,
    pub eigen_tolerance: f64,
    pub max_eigen_iterations: usize,
    pub kmeans_iterations: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eigen_tolerance: 1e-12,
            max_eigen_iterations: 10_000,
            kmeans_iterations: 100,
        }
    }
}

/// K-way spectral clustering of the symmetrized graph `(A + A^T)/2`.
///
/// Embeds each node with the K eigenvectors of the normalized Laplacian
/// having the smallest eigenvalues, normalizes the embedding rows, and runs
/// seeded k-means++ / Lloyd iterations. Labels are renumbered in order of
/// first appearance.
pub fn spectral_cluster(graph: &AffinityGraph, num_classes: usize, opts: SpectralOptions) -> Result<Vec<usize>> {
    let n = graph.n;
    if num_classes == 0 || n < num_classes {
        return Err(Error::invalid(format!(
            "need 1 <= K <= n, got K = {num_classes}, n = {n}"
        )));
    }
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (graph.get(i, j) + graph.get(j, i)));
    let inv_sqrt_deg: Vec<f64> = sym
        .row_iter()
        .map(|r| {
            let d: f64 = r.iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt_deg[i] * sym[(i, j)] * inv_sqrt_deg[j]
    });
    let eig = SymmetricEigen::try_new(laplacian, opts.eigen_tolerance, opts.max_eigen_iterations)
        .ok_or(Error::EigenNonConvergence {
            iterations: opts.max_eigen_iterations,
            n,
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = order[..num_classes]
                .iter()
                .map(|&col| eig.eigenvectors[(i, col)])
                .collect();
            ops::l2_normalize(&row).unwrap_or(row)
        })
        .collect();
    let labels = kmeans(&points, num_classes, opts.seed, opts.kmeans_iterations);
    Ok(canonical_labels(&labels))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iterations: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    labels
}

fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Cosine similarity of pixel `(row, col)` to every pixel, as an `[h, w]` grid.
pub fn feature_affinity_probe(f: &FeatureMap, row: usize, col: usize) -> Result<Tensor> {
    let (h, w) = f.grid()?;
    if row >= h || col >= w {
        return Err(Error::invalid(format!("probe ({row}, {col}) outside {h}x{w}")));
    }
    let probe = f.row(row * w + col);
    let data = (0..h * w)
        .map(|i| ops::cosine_similarity(probe, f.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![h, w], data)
}
