//! `compare`: seed-averaged metric deltas between completed runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::run::{RunSummary, VariantSummary};
use crate::error::{Error, Result};
use crate::experiment::column_stats;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub variant: String,
    /// `class_k` or `mIoU`.
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub delta: f64,
}

/// Mean and sample std over seeds of one metric; `None` if no seed defines it.
fn metric_stats(v: &VariantSummary, metric: Option<usize>) -> Option<(f64, f64, usize)> {
    let values: Vec<Vec<f64>> = v
        .per_seed
        .iter()
        .filter_map(|s| match metric {
            Some(k) => s.per_class[k],
            None => Some(s.miou),
        })
        .map(|x| vec![x])
        .collect();
    if values.is_empty() {
        return None;
    }
    let (m, s) = column_stats(&values);
    Some((m[0], s[0], values.len()))
}

/// Rows for every variant of every run. Deltas are taken against the
/// same-labelled variant of the first run, or its first variant when that
/// label is absent there.
pub fn compare_summaries(runs: &[(String, RunSummary)]) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::invalid("compare needs at least two runs"));
    }
    let (ref_name, reference) = &runs[0];
    let mut mismatched = Vec::new();
    for (name, s) in &runs[1..] {
        if s.num_classes != reference.num_classes {
            mismatched.push(format!(
                "num_classes: {ref_name} has {}, {name} has {}",
                reference.num_classes, s.num_classes
            ));
        }
        if s.variants.is_empty() {
            mismatched.push(format!("variants: {name} has no results"));
        }
    }
    if reference.variants.is_empty() {
        mismatched.push(format!("variants: {ref_name} has no results"));
    }
    if !mismatched.is_empty() {
        return Err(Error::invalid(format!("incompatible runs: {}", mismatched.join("; "))));
    }
    let k = reference.num_classes;
    let metrics: Vec<Option<usize>> = (0..k).map(Some).chain(std::iter::once(None)).collect();
    let mut rows = Vec::new();
    for (name, s) in runs {
        for v in &s.variants {
            let base = reference
                .variants
                .iter()
                .find(|r| r.label == v.label)
                .unwrap_or(&reference.variants[0]);
            for &m in &metrics {
                let Some((mean, std, n)) = metric_stats(v, m) else { continue };
                let delta = metric_stats(base, m).map_or(f64::NAN, |(b, _, _)| mean - b);
                rows.push(CompareRow {
                    run: name.clone(),
                    variant: v.label.clone(),
                    metric: m.map_or_else(|| "mIoU".to_string(), |k| format!("class_{k}")),
                    mean,
                    std,
                    seeds: n,
                    delta,
                });
            }
        }
    }
    Ok(rows)
}

pub fn compare_dirs(dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    let runs = dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), RunSummary::load(d).map_err(|e| with_path(d, e))?)))
        .collect::<Result<Vec<_>>>()?;
    compare_summaries(&runs)
}

fn with_path(dir: &Path, e: Error) -> Error {
    Error::Format {
        path: dir.to_path_buf(),
        message: format!("cannot read run summary: {e}"),
    }
}

pub fn write_compare_csv<W: Write>(out: W, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "variant", "metric", "mean", "std", "seeds", "delta"])?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.variant.clone(),
            r.metric.clone(),
            r.mean.to_string(),
            r.std.to_string(),
            r.seeds.to_string(),
            r.delta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
