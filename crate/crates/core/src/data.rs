//! Synthetic two-domain pixel-labelled data: Voronoi class layouts, Gaussian
//! class-conditional inputs and an affine domain transform.
//!
//! Datasets persist as a directory holding `manifest.json`, `inputs.catn`
//! (`[n, h, w, c]`) and `labels.catn` (`[n, h, w]`, IGNORE as -1).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::LabelMap;
use crate::error::{Error, Result};
use crate::numerics::{io, FeatureMap, Tensor};

/// `x -> matrix * x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn identity(c: usize) -> Self {
        let matrix = (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            matrix,
            offset: vec![0.0; c],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out.iter_mut().zip(&self.matrix).zip(&self.offset) {
            *o = row.iter().zip(x).map(|(m, v)| m * v).sum::<f64>() + b;
        }
    }

    /// `self` after `inner`: `x -> self(inner(x))`.
    pub fn compose(&self, inner: &Affine) -> Affine {
        let c = self.dim();
        let matrix = (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| (0..c).map(|k| self.matrix[i][k] * inner.matrix[k][j]).sum())
                    .collect()
            })
            .collect();
        let mut offset = vec![0.0; c];
        self.apply(&inner.offset, &mut offset);
        Affine { matrix, offset }
    }

    fn validate(&self) -> Result<()> {
        let c = self.dim();
        if self.matrix.len() != c || self.matrix.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("transform matrix must be square and match the offset length"));
        }
        if self.matrix.iter().flatten().chain(&self.offset).any(|v| !v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        let m = nalgebra::DMatrix::from_fn(c, c, |i, j| self.matrix[i][j]);
        let singular = m.svd(false, false).singular_values;
        let (lo, hi) = singular
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(*s), hi.max(*s)));
        if lo <= 1e-12 * hi.max(1.0) {
            return Err(Error::invalid("transform matrix is not invertible"));
        }
        Ok(())
    }
}

/// Random Voronoi segmentation: `num_classes + extra_sites` sites at distinct
/// pixel centres; the first `num_classes` sites carry a random permutation of
/// the classes (so every class is present), the rest draw classes uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub extra_sites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub input_channels: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_spread: Vec<f64>,
    pub transform: Affine,
    pub layout: Layout,
}

impl Default for DomainSpec {
    /// Five classes on a 16x16 grid with four input channels and spread 0.7.
    /// Each class mean has one coordinate in the rotated channel pair (0-1)
    /// and one in channels 2-3, so the default shift moves every cluster but
    /// leaves each nearest to its own source cluster.
    fn default() -> Self {
        let a = 2.5;
        Self {
            num_classes: 5,
            height: 16,
            width: 16,
            input_channels: 4,
            class_means: vec![
                vec![a, 0.0, a, 0.0],
                vec![0.0, a, a, 0.0],
                vec![-a, 0.0, 0.0, a],
                vec![0.0, -a, 0.0, a],
                vec![0.0, 0.0, -a, -a],
            ],
            class_spread: vec![0.7; 5],
            transform: Affine::identity(4),
            layout: Layout { extra_sites: 3 },
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (k, c) = (self.num_classes, self.input_channels);
        if k == 0 || self.height == 0 || self.width == 0 || c == 0 {
            return Err(Error::invalid("num_classes, grid and input_channels must be positive"));
        }
        if k > self.height * self.width {
            return Err(Error::invalid("more classes than pixels"));
        }
        if k + self.layout.extra_sites > self.height * self.width {
            return Err(Error::invalid("more Voronoi sites than pixels"));
        }
        if self.class_means.len() != k || self.class_means.iter().any(|m| m.len() != c) {
            return Err(Error::invalid(format!("class_means must be {k} vectors of length {c}")));
        }
        if self.class_spread.len() != k || self.class_spread.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid(format!("class_spread must be {k} finite non-negative values")));
        }
        for a in 0..k {
            for b in a + 1..k {
                if self.class_means[a] == self.class_means[b] {
                    return Err(Error::invalid(format!("duplicate class means for classes {a} and {b}")));
                }
            }
        }
        if self.transform.dim() != c {
            return Err(Error::invalid("transform dimension must equal input_channels"));
        }
        self.transform.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Input map with its ground truth. For target data the labels are only ever
/// handed to evaluation code; the trainer takes bare inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: FeatureMap,
    pub label: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<&FeatureMap> {
        self.samples.iter().map(|s| &s.input).collect()
    }

    pub fn labels(&self) -> Vec<&LabelMap> {
        self.samples.iter().map(|s| &s.label).collect()
    }
}

fn voronoi_layout(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let n_sites = k + spec.layout.extra_sites;
    let sites = rand::seq::index::sample(rng, h * w, n_sites).into_vec();
    let mut classes: Vec<u32> = (0..k as u32).collect();
    classes.shuffle(rng);
    classes.extend((0..spec.layout.extra_sites).map(|_| rng.random_range(0..k as u32)));
    let labels = (0..h * w)
        .map(|p| {
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            let nearest = sites
                .iter()
                .enumerate()
                .min_by_key(|(_, &s)| {
                    let (sr, sc) = ((s / w) as i64, (s % w) as i64);
                    (sr - r).pow(2) + (sc - c).pow(2)
                })
                .map(|(i, _)| i)
                .expect("at least one site");
            classes[nearest]
        })
        .collect();
    LabelMap::new(h, w, labels).expect("grid matches")
}

/// Draws `n` samples; a pure function of `(spec, n, seed)`.
pub fn generate(spec: &DomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let c = spec.input_channels;
    let samples = (0..n)
        .map(|i| {
            // per-sample stream so samples are independent of generation order
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = voronoi_layout(spec, &mut rng);
            let mut raw = vec![0.0; c];
            let mut data = vec![0.0; label.len() * c];
            for (p, cls) in label.iter().enumerate() {
                let cls = cls.expect("generated labels are never IGNORE");
                let spread = spec.class_spread[cls];
                for (v, m) in raw.iter_mut().zip(&spec.class_means[cls]) {
                    let noise: f64 = if spread > 0.0 {
                        Normal::new(0.0, spread).expect("finite spread").sample(&mut rng)
                    } else {
                        0.0
                    };
                    *v = m + noise;
                }
                spec.transform.apply(&raw, &mut data[p * c..(p + 1) * c]);
            }
            let input = Tensor::new(vec![spec.height, spec.width, c], data).expect("shape matches");
            Sample { input, label }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

/// Rotation (degrees) in input channels 0-1, uniform scale, then a constant
/// offset on every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shift {
    pub rotation_deg: f64,
    pub scale: f64,
    pub offset: f64,
}

impl Shift {
    pub const NONE: Shift = Shift {
        rotation_deg: 0.0,
        scale: 1.0,
        offset: 0.0,
    };

    pub const DEFAULT: Shift = Shift {
        rotation_deg: 30.0,
        scale: 1.0,
        offset: 1.0,
    };

    /// Half-turn in channels 0-1: every target class lands outside its own
    /// source decision region, so source-only predictions are near chance.
    pub const EXTREME: Shift = Shift {
        rotation_deg: 180.0,
        scale: 1.0,
        offset: 0.0,
    };

    pub fn affine(&self, c: usize) -> Result<Affine> {
        if ![self.rotation_deg, self.scale, self.offset].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("shift parameters must be finite"));
        }
        let mut a = Affine::identity(c);
        if c >= 2 {
            let (s, co) = self.rotation_deg.to_radians().sin_cos();
            a.matrix[0][0] = co;
            a.matrix[0][1] = -s;
            a.matrix[1][0] = s;
            a.matrix[1][1] = co;
        }
        for row in &mut a.matrix {
            for v in row.iter_mut() {
                *v *= self.scale;
            }
        }
        a.offset = vec![self.offset; c];
        Ok(a)
    }
}

impl Default for Shift {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Target spec: `base` with the shift applied after its own transform.
pub fn shifted_spec(base: &DomainSpec, shift: Shift) -> Result<DomainSpec> {
    let mut spec = base.clone();
    spec.transform = shift.affine(base.input_channels)?.compose(&base.transform);
    Ok(spec)
}

/// Source and target datasets drawn from `base` and its shifted copy.
pub fn make_domain_pair(
    base: &DomainSpec,
    shift: Shift,
    n_source: usize,
    n_target: usize,
    source_seed: u64,
    target_seed: u64,
) -> Result<(Dataset, Dataset)> {
    let target_spec = shifted_spec(base, shift)?;
    Ok((
        generate(base, n_source, source_seed)?,
        generate(&target_spec, n_target, target_seed)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub input_channels: usize,
    pub samples: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub spec: DomainSpec,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INPUTS_FILE: &str = "inputs.catn";
pub const LABELS_FILE: &str = "labels.catn";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let s = &data.spec;
    let (h, w, c) = (s.height, s.width, s.input_channels);
    let mut inputs = Vec::with_capacity(data.len() * h * w * c);
    let mut labels = Vec::with_capacity(data.len() * h * w);
    for sample in &data.samples {
        sample.input.expect_shape(&[h, w, c])?;
        sample.label.expect_grid(h, w)?;
        inputs.extend_from_slice(sample.input.data());
        labels.extend(sample.label.to_tensor().into_data());
    }
    let inputs = io::to_bytes(&Tensor::new(vec![data.len(), h, w, c], inputs)?);
    let labels = io::to_bytes(&Tensor::new(vec![data.len(), h, w], labels)?);
    let manifest = DatasetManifest {
        num_classes: s.num_classes,
        height: h,
        width: w,
        input_channels: c,
        samples: data.len(),
        seed: data.seed,
        spec_hash: s.hash(),
        spec: s.clone(),
        files: BTreeMap::from([
            (INPUTS_FILE.to_string(), sha256_hex(&inputs)),
            (LABELS_FILE.to_string(), sha256_hex(&labels)),
        ]),
    };
    std::fs::write(dir.join(INPUTS_FILE), &inputs)?;
    std::fs::write(dir.join(LABELS_FILE), &labels)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_container(path: &Path) -> Result<(Vec<u8>, Tensor)> {
    let bytes = std::fs::read(path)?;
    let tensor = io::from_bytes(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => format_error(path, format!("parse error at byte {offset}: {message}")),
        other => other,
    })?;
    Ok((bytes, tensor))
}

/// Loads a dataset directory, verifying shapes, content hashes and the spec hash.
/// Nothing is returned unless every check passes.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    manifest.spec.validate()?;
    if manifest.spec.hash() != manifest.spec_hash {
        return Err(format_error(&manifest_path, "spec hash does not match the recorded spec"));
    }
    let (n, h, w, c) = (manifest.samples, manifest.height, manifest.width, manifest.input_channels);
    let s = &manifest.spec;
    if (s.height, s.width, s.input_channels, s.num_classes) != (h, w, c, manifest.num_classes) {
        return Err(format_error(&manifest_path, "manifest header disagrees with its spec"));
    }
    let mut tensors = Vec::new();
    for (name, shape) in [(INPUTS_FILE, vec![n, h, w, c]), (LABELS_FILE, vec![n, h, w])] {
        let path = dir.join(name);
        let (bytes, tensor) = read_container(&path)?;
        if tensor.shape() != shape.as_slice() {
            return Err(format_error(&path, format!("expected shape {shape:?}, got {:?}", tensor.shape())));
        }
        match manifest.files.get(name) {
            Some(hash) if *hash == sha256_hex(&bytes) => {}
            Some(_) => return Err(format_error(&path, "content hash mismatch")),
            None => return Err(format_error(&manifest_path, format!("no hash recorded for {name}"))),
        }
        tensors.push(tensor);
    }
    let (labels, inputs) = (tensors.pop().expect("two"), tensors.pop().expect("two"));
    let samples = inputs
        .data()
        .chunks_exact(h * w * c)
        .zip(labels.data().chunks_exact(h * w))
        .map(|(x, y)| {
            let label = LabelMap::from_tensor(&Tensor::new(vec![h, w], y.to_vec())?)?;
            label.validate(manifest.num_classes)?;
            Ok(Sample {
                input: Tensor::new(vec![h, w, c], x.to_vec())?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: manifest.spec,
        seed: manifest.seed,
        samples,
    })
}

/// Bundles imported samples into a dataset. Only the shape fields of the
/// attached spec are meaningful; the generator fields are placeholders.
pub fn dataset_from_samples(samples: Vec<Sample>, num_classes: usize) -> Result<Dataset> {
    let first = samples.first().ok_or(Error::EmptyInput)?;
    let (h, w) = first.input.grid()?;
    let c = first.input.row_len();
    for s in &samples {
        s.input.expect_shape(&[h, w, c])?;
        s.label.expect_grid(h, w)?;
        s.label.validate(num_classes)?;
    }
    let spec = DomainSpec {
        num_classes,
        height: h,
        width: w,
        input_channels: c,
        class_means: (0..num_classes)
            .map(|k| (0..c).map(|j| if j == 0 { k as f64 } else { 0.0 }).collect())
            .collect(),
        class_spread: vec![0.0; num_classes],
        transform: Affine::identity(c),
        layout: Layout { extra_sites: 0 },
    };
    spec.validate()?;
    Ok(Dataset { spec, seed: 0, samples })
}

/// Imports one sample from CSV with header `row,col,label,x0,x1,...`.
///
/// Every pixel of the `h x w` grid (inferred from the largest row/col) must
/// appear exactly once; a label of `-1` or an empty field marks IGNORE.
pub fn import_csv_sample<R: Read>(input: R, num_classes: usize) -> Result<Sample> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let expected_prefix = ["row", "col", "label"];
    if headers.len() < 4 || headers.iter().take(3).ne(expected_prefix) {
        return Err(Error::invalid("CSV header must start with row,col,label followed by x0.."));
    }
    let c = headers.len() - 3;
    for (i, name) in headers.iter().skip(3).enumerate() {
        if name != format!("x{i}") {
            return Err(Error::invalid(format!("expected column x{i}, found `{name}`")));
        }
    }
    let parse_f = |s: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("line {line}: `{s}` is not a number")))
    };
    let mut pixels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let idx = |j: usize| {
            record[j]
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("line {line}: `{}` is not a grid index", &record[j])))
        };
        let (r, col) = (idx(0)?, idx(1)?);
        let label = match &record[2] {
            "" | "-1" => LabelMap::IGNORE,
            s => {
                let v: u32 = s
                    .parse()
                    .map_err(|_| Error::invalid(format!("line {line}: `{s}` is not a label")))?;
                if v as usize >= num_classes {
                    return Err(Error::ClassOutOfRange {
                        class: v as usize,
                        num_classes,
                    });
                }
                v
            }
        };
        let x = (3..3 + c).map(|j| parse_f(&record[j], line)).collect::<Result<Vec<_>>>()?;
        pixels.push((r, col, label, x));
    }
    if pixels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let h = pixels.iter().map(|p| p.0).max().expect("non-empty") + 1;
    let w = pixels.iter().map(|p| p.1).max().expect("non-empty") + 1;
    let mut seen = vec![false; h * w];
    let mut labels = vec![LabelMap::IGNORE; h * w];
    let mut data = vec![0.0; h * w * c];
    for (r, col, label, x) in pixels {
        let p = r * w + col;
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!("pixel ({r}, {col}) listed twice")));
        }
        labels[p] = label;
        data[p * c..(p + 1) * c].copy_from_slice(&x);
    }
    if let Some(p) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("pixel ({}, {}) missing", p / w, p % w)));
    }
    Ok(Sample {
        input: Tensor::new(vec![h, w, c], data)?,
        label: LabelMap::new(h, w, labels)?,
    })
}
