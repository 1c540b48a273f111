//! Loading datasets, statistics caches and Fisher vectors named by an index.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array2, Axis};
use noniid::descriptors::{decode_descriptor_set, project, DatasetIndex, DescriptorSet, IndexEntry, PcaModel, Split};
use noniid::encoder::{decode_fisher_vector, FisherVector};
use noniid::eval::Labels;
use noniid::gmm::{decode_stats, SufficientStats};
use rayon::prelude::*;

use crate::manifest::Manifest;

pub fn load_index(m: &mut Manifest, path: &Path) -> Result<DatasetIndex> {
    let text = m.read_string(path)?;
    let mut index = DatasetIndex::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut index.entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(index)
}

pub fn entries(index: &DatasetIndex, split: Option<Split>) -> Vec<IndexEntry> {
    index
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .cloned()
        .collect()
}

/// Reads every file in order, recording hashes, then decodes in parallel.
fn read_all<T: Send>(
    m: &mut Manifest,
    paths: &[PathBuf],
    decode: impl Fn(&[u8], usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let bytes: Vec<Vec<u8>> = paths.iter().map(|p| m.read(p)).collect::<Result<_>>()?;
    bytes
        .par_iter()
        .enumerate()
        .map(|(i, b)| decode(b, i).with_context(|| format!("decoding {}", paths[i].display())))
        .collect()
}

pub fn load_sets(m: &mut Manifest, entries: &[IndexEntry], pca: Option<&PcaModel>) -> Result<Vec<DescriptorSet>> {
    let paths: Vec<PathBuf> = entries.iter().map(|e| e.path.clone()).collect();
    read_all(m, &paths, |b, i| {
        let set = decode_descriptor_set(b, &entries[i].image_id)?;
        Ok(match pca {
            Some(p) => project(p, &set)?,
            None => set,
        })
    })
}

pub fn stats_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.nifs"))
}

pub fn fv_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.nifv"))
}

pub fn load_stats(m: &mut Manifest, dir: &Path, entries: &[IndexEntry]) -> Result<Vec<SufficientStats>> {
    let paths: Vec<PathBuf> = entries.iter().map(|e| stats_path(dir, &e.image_id)).collect();
    read_all(m, &paths, |b, _| Ok(decode_stats(b)?))
}

pub fn load_fvs(m: &mut Manifest, dir: &Path, entries: &[IndexEntry]) -> Result<Vec<FisherVector>> {
    let paths: Vec<PathBuf> = entries.iter().map(|e| fv_path(dir, &e.image_id)).collect();
    read_all(m, &paths, |b, _| Ok(decode_fisher_vector(b)?))
}

/// Evenly spaced rows of the stacked descriptors, at most `cap` of them.
pub fn sample_rows(sets: &[DescriptorSet], cap: usize) -> Result<Array2<f64>> {
    let views: Vec<_> = sets.iter().map(|s| s.data()).collect();
    if views.is_empty() {
        bail!("no descriptors in the selected split");
    }
    let all = ndarray::concatenate(Axis(0), &views)?;
    let n = all.nrows();
    if n <= cap {
        return Ok(all);
    }
    let rows: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    Ok(all.select(Axis(0), &rows))
}

/// Labels of `entries` over the sorted class names of the whole index.
/// Images with exactly one label each give single-label data.
pub fn labels(entries: &[IndexEntry], classes: &[String]) -> Result<Labels> {
    let position = |l: &String| {
        classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| anyhow!("label '{l}' is not among the model's classes"))
    };
    if entries.iter().all(|e| e.labels.len() == 1) {
        let idx: Vec<usize> = entries.iter().map(|e| position(&e.labels[0])).collect::<Result<_>>()?;
        return Ok(Labels::single_label(&idx, classes.len())?);
    }
    let mut matrix = Array2::from_elem((entries.len(), classes.len()), false);
    for (i, e) in entries.iter().enumerate() {
        for l in &e.labels {
            matrix[[i, position(l)?]] = true;
        }
    }
    Ok(Labels::multi_label(matrix))
}

pub fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: noniid::Error| anyhow!(e))
}
