//! Local descriptor sets, PCA projection, and the on-disk descriptor and
//! dataset-index formats.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::{par_blocks, BLOCK_ROWS};

/// Descriptors of one image: an `N × D` matrix plus optional normalized patch
/// centers used for spatial pyramids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub image_id: String,
    data: Array2<f64>,
    coords: Option<Array2<f64>>,
}

impl DescriptorSet {
    /// Builds a set, checking that all values are finite and coordinates lie
    /// in the unit square. Empty sets (`N = 0`) are allowed; they arise when a
    /// spatial cell receives no patches.
    pub fn new(
        image_id: impl Into<String>,
        data: Array2<f64>,
        coords: Option<Array2<f64>>,
    ) -> Result<Self> {
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite descriptor value {v} at flat index {i}"
            )));
        }
        if let Some(c) = &coords {
            if c.nrows() != data.nrows() || c.ncols() != 2 {
                return Err(Error::invalid(format!(
                    "coords must be {}x2, got {}x{}",
                    data.nrows(),
                    c.nrows(),
                    c.ncols()
                )));
            }
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain("patch coordinates outside [0,1]^2".into()));
            }
        }
        Ok(DescriptorSet {
            image_id: image_id.into(),
            data,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn coords(&self) -> Option<ArrayView2<'_, f64>> {
        self.coords.as_ref().map(|c| c.view())
    }

    /// Subset of rows, keeping coordinates aligned.
    pub fn select(&self, rows: &[usize]) -> DescriptorSet {
        DescriptorSet {
            image_id: self.image_id.clone(),
            data: self.data.select(Axis(0), rows),
            coords: self.coords.as_ref().map(|c| c.select(Axis(0), rows)),
        }
    }
}

/// PCA rotation fitted on a descriptor sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D0 × D0` orthonormal basis, row-major; column `j` is the `j`-th
    /// principal axis.
    pub basis: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub keep: usize,
    /// Empirical variances of the discarded coordinates `keep..D0`.
    pub residual_variances: Vec<f64>,
}

/// Eigenvalues below this are clamped when the sample covariance is rank
/// deficient.
pub const PCA_VARIANCE_FLOOR: f64 = 1e-10;

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn basis_matrix(&self) -> Array2<f64> {
        let d0 = self.input_dim();
        Array2::from_shape_fn((d0, d0), |(i, j)| self.basis[i][j])
    }

    /// Full rotation `Uᵀ(x − mean)` without truncation.
    pub fn rotate(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let d0 = self.input_dim();
        if x.len() != d0 {
            return Err(Error::DimensionMismatch {
                expected: d0,
                got: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(Array1::from_shape_fn(d0, |j| {
            (0..d0).map(|i| self.basis[i][j] * centered[i]).sum()
        }))
    }

    /// Same model keeping a different number of leading coordinates.
    pub fn with_keep(&self, keep: usize) -> Result<PcaModel> {
        let d0 = self.input_dim();
        if keep == 0 || keep > d0 {
            return Err(Error::invalid(format!("keep must be in [1, {d0}], got {keep}")));
        }
        Ok(PcaModel {
            keep,
            residual_variances: self.eigenvalues[keep..].to_vec(),
            ..self.clone()
        })
    }
}

/// Fits PCA on an `M × D0` sample, keeping `keep` leading axes.
///
/// The covariance uses the biased (`1/M`) normalization, matching the
/// maximum-likelihood variances used by the mixture models.
pub fn fit_pca(samples: ArrayView2<f64>, keep: usize) -> Result<PcaModel> {
    let (m, d0) = samples.dim();
    if m <= d0 {
        return Err(Error::invalid(format!(
            "PCA needs more samples than dimensions ({m} <= {d0})"
        )));
    }
    if keep == 0 || keep > d0 {
        return Err(Error::invalid(format!("keep must be in [1, {d0}], got {keep}")));
    }
    let sum = par_blocks(m, BLOCK_ROWS, |r| samples.slice(s![r, ..]).sum_axis(Axis(0)))
        .expect("non-empty sample");
    let mean = sum / m as f64;
    let cov = par_blocks(m, BLOCK_ROWS, |r| {
        let centered = &samples.slice(s![r, ..]) - &mean;
        centered.t().dot(&centered)
    })
    .expect("non-empty sample")
        / m as f64;

    let sym = DMatrix::from_fn(d0, d0, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d0).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut eigenvalues = Vec::with_capacity(d0);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d0);
    let mut clamped = 0;
    for &j in &order {
        let mut lambda = eig.eigenvalues[j];
        if lambda < PCA_VARIANCE_FLOOR {
            lambda = PCA_VARIANCE_FLOOR;
            clamped += 1;
        }
        eigenvalues.push(lambda);
        let mut col: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| {
                if v.abs() > best.1.abs() {
                    (i, *v)
                } else {
                    best
                }
            })
            .1;
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.iter_mut().for_each(|v| *v /= norm);
        columns.push(col);
    }
    if clamped > 0 {
        log::warn!("PCA covariance is rank deficient: {clamped} eigenvalue(s) clamped to {PCA_VARIANCE_FLOOR}");
    }
    let basis = (0..d0)
        .map(|i| (0..d0).map(|j| columns[j][i]).collect())
        .collect();
    Ok(PcaModel {
        mean: mean.to_vec(),
        basis,
        residual_variances: eigenvalues[keep..].to_vec(),
        eigenvalues,
        keep,
    })
}

/// Projects descriptors onto the first `keep` principal axes.
pub fn project(pca: &PcaModel, set: &DescriptorSet) -> Result<DescriptorSet> {
    let d0 = pca.input_dim();
    if set.dim() != d0 {
        return Err(Error::DimensionMismatch {
            expected: d0,
            got: set.dim(),
        });
    }
    let basis = pca.basis_matrix();
    let kept = basis.slice(s![.., ..pca.keep]);
    let mean = ArrayView1::from(&pca.mean[..]);
    let centered = &set.data - &mean;
    Ok(DescriptorSet {
        image_id: set.image_id.clone(),
        data: centered.dot(&kept),
        coords: set.coords.clone(),
    })
}

const DESC_MAGIC: &[u8; 4] = b"NIFD";
const DESC_VERSION: u32 = 1;
const DESC_HEADER: usize = 24;

/// Serializes a descriptor set to the binary descriptor format.
///
/// Layout (little-endian): `"NIFD"`, `u32` version, `u64` N, `u32` D,
/// `u8` flags (bit 0: coordinates present), zero padding to 24 bytes, then
/// `N × D` `f32` row-major, then optionally `N × 2` `f32` coordinates.
pub fn encode_descriptor_set(set: &DescriptorSet) -> Vec<u8> {
    let (n, d) = set.data.dim();
    let has_coords = set.coords.is_some();
    let mut buf = Vec::with_capacity(DESC_HEADER + 4 * n * (d + 2));
    buf.extend_from_slice(DESC_MAGIC);
    buf.extend_from_slice(&DESC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.push(u8::from(has_coords));
    buf.resize(DESC_HEADER, 0);
    for v in set.data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(c) = &set.coords {
        for v in c.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

/// Parses the binary descriptor format.
pub fn decode_descriptor_set(bytes: &[u8], image_id: &str) -> Result<DescriptorSet> {
    if bytes.len() < 4 || &bytes[..4] != DESC_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    if bytes.len() < DESC_HEADER {
        return Err(Error::parse(bytes.len() as u64, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DESC_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let flags = bytes[20];
    let has_coords = flags & 1 == 1;

    let mut offset = DESC_HEADER;
    let mut read_block = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let end = offset + 4;
            if end > bytes.len() {
                return Err(Error::parse(offset as u64, "truncated payload"));
            }
            let v = f32::from_le_bytes(bytes[offset..end].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::parse(offset as u64, "non-finite value"));
            }
            out.push(v as f64);
            offset = end;
        }
        Ok(out)
    };
    let values = read_block(n * d)?;
    let coords = if has_coords {
        let c = read_block(n * 2)?;
        Some(Array2::from_shape_vec((n, 2), c).expect("shape checked"))
    } else {
        None
    };
    let data = Array2::from_shape_vec((n, d), values).expect("shape checked");
    DescriptorSet::new(image_id, data, coords)
}

pub fn write_descriptor_file(set: &DescriptorSet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_descriptor_set(set))?;
    Ok(())
}

/// Reads a descriptor file; the image id is the file stem.
pub fn read_descriptor_file(path: &Path) -> Result<DescriptorSet> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_descriptor_set(&bytes, &id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub split: Split,
    pub labels: Vec<String>,
}

/// List of images with their descriptor files, split and labels.
///
/// Text form: one `image_id<TAB>path<TAB>split<TAB>label[,label…]` line per
/// image. Relative paths resolve against the index file's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id '{}'", e.image_id)));
            }
        }
        Ok(DatasetIndex { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let content = line.trim_end_matches(['\n', '\r']);
            if !content.trim().is_empty() {
                let fields: Vec<&str> = content.split('\t').collect();
                if fields.len() != 4 {
                    return Err(Error::parse(
                        offset,
                        format!("expected 4 tab-separated fields, got {}", fields.len()),
                    ));
                }
                let split = fields[2]
                    .parse()
                    .map_err(|_| Error::parse(offset, format!("bad split '{}'", fields[2])))?;
                let labels = fields[3]
                    .split(',')
                    .filter(|l| !l.is_empty())
                    .map(str::to_owned)
                    .collect();
                entries.push(IndexEntry {
                    image_id: fields[0].to_owned(),
                    path: PathBuf::from(fields[1]),
                    split,
                    labels,
                });
            }
            offset += line.len() as u64;
        }
        DatasetIndex::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.image_id,
                e.path.display(),
                e.split,
                e.labels.join(",")
            ));
        }
        out
    }

    /// Reads an index file, resolving relative descriptor paths against the
    /// index's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut index = DatasetIndex::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut index.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| e.labels.iter().cloned())
            .collect();
        c.sort();
        c.dedup();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn pca_on_a_line_recovers_direction() {
        let samples = Array2::from_shape_fn((50, 2), |(i, j)| {
            let t = i as f64 - 25.0;
            if j == 0 {
                3.0 * t
            } else {
                4.0 * t
            }
        });
        let pca = fit_pca(samples.view(), 1).unwrap();
        assert!((pca.basis[0][0] - 0.6).abs() < 1e-10);
        assert!((pca.basis[1][0] - 0.8).abs() < 1e-10);
        assert!(pca.eigenvalues[1] <= 1e-9);
    }

    #[test]
    fn full_rank_projection_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = random_matrix(&mut rng, 200, 4);
        let pca = fit_pca(samples.view(), 4).unwrap();
        let u = pca.basis_matrix();
        let gram = u.t().dot(&u);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-8);
            }
        }
        for w in pca.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let set = DescriptorSet::new("a", samples.clone(), None).unwrap();
        let proj = project(&pca, &set).unwrap();
        let mean = Array1::from(pca.mean.clone());
        for (x, z) in samples.rows().into_iter().zip(proj.data().rows()) {
            let back = &mean + &u.dot(&z);
            for (a, b) in back.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
            let n0 = (&x - &mean).mapv(|v| v * v).sum().sqrt();
            let n1 = z.mapv(|v| v * v).sum().sqrt();
            assert!((n0 - n1).abs() < 1e-8);
        }
    }

    #[test]
    fn projection_of_mean_is_zero_and_matches_dense_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = random_matrix(&mut rng, 100, 4);
        let pca = fit_pca(samples.view(), 2).unwrap();
        let at_mean =
            DescriptorSet::new("m", Array2::from_shape_vec((1, 4), pca.mean.clone()).unwrap(), None)
                .unwrap();
        let z = project(&pca, &at_mean).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(z.dim(), 2);

        let x = random_matrix(&mut rng, 3, 4);
        let set = DescriptorSet::new("x", x.clone(), None).unwrap();
        let got = project(&pca, &set).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for d in 0..4 {
                    acc += pca.basis[d][j] * (x[[i, d]] - pca.mean[d]);
                }
                assert!((got.data()[[i, j]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anisotropic_variances_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sd = [2.0, 1.0, 0.5];
        let samples = Array2::from_shape_fn((100_000, 3), |(_, j)| {
            sd[j] * rng.sample::<f64, _>(StandardNormal)
        });
        let pca = fit_pca(samples.view(), 3).unwrap();
        for (got, want) in pca.eigenvalues.iter().zip([4.0, 1.0, 0.25]) {
            assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
        }
    }

    #[test]
    fn projection_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pca = fit_pca(random_matrix(&mut rng, 20, 3).view(), 2).unwrap();
        let set = DescriptorSet::new("x", random_matrix(&mut rng, 2, 4), None).unwrap();
        assert!(matches!(
            project(&pca, &set),
            Err(Error::DimensionMismatch { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn descriptor_file_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_matrix(&mut rng, 100, 16).mapv(|v| v as f32 as f64);
        let coords = Array2::from_shape_fn((100, 2), |_| rng.random::<f32>() as f64);
        let set = DescriptorSet::new("img", data, Some(coords)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.nifd");
        write_descriptor_file(&set, &path).unwrap();
        let back = read_descriptor_file(&path).unwrap();
        assert_eq!(back, set);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(encode_descriptor_set(&back), bytes);
    }

    #[test]
    fn descriptor_parse_errors() {
        let err = decode_descriptor_set(&[], "x").unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let set = DescriptorSet::new("x", array![[1.0, 2.0], [3.0, 4.0]], None).unwrap();
        let bytes = encode_descriptor_set(&set);
        let truncated = &bytes[..DESC_HEADER + 8];
        let err = decode_descriptor_set(truncated, "x").unwrap_err();
        assert!(
            err.to_string().contains("truncated payload at offset 32"),
            "{err}"
        );

        let mut bad = bytes.clone();
        bad[DESC_HEADER + 4..DESC_HEADER + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_descriptor_set(&bad, "x").unwrap_err() {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 28);
                assert_eq!(msg, "non-finite value");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dataset_index_round_trip_and_validation() {
        let text = "a\tdesc/a.nifd\ttrain\tcat,dog\nb\tdesc/b.nifd\ttest\tdog\n";
        let idx = DatasetIndex::parse(text).unwrap();
        assert_eq!(idx.entries.len(), 2);
        assert_eq!(idx.entries[0].labels, vec!["cat", "dog"]);
        assert_eq!(idx.to_text(), text);
        assert_eq!(idx.classes(), vec!["cat", "dog"]);
        assert!(DatasetIndex::parse("a\tp\ttrain\tx\na\tq\ttest\ty\n").is_err());
        assert!(DatasetIndex::parse("a\tp\tholdout\tx\n").is_err());
    }
}
