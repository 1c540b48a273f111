//! Final image representations: per-cell model scores concatenated over a
//! spatial pyramid, then whitened, power-normalized and ℓ2-normalized.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::count_models::{bow_fisher_score, polya_fisher_score, CountVector, MultinomialModel, PolyaModel};
use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::gmm::{image_stats, GaussianMixture, SufficientStats};
use crate::latent_mog::{
    infer_from_stats, infer_latent_mog, latent_mog_fisher_score, latent_mog_layout, mog_fisher_score,
    mog_layout, InferOptions, LatentMogModel,
};
use crate::reduce::pairwise_sum;
use crate::topic_models::{lda_fisher_score, lda_infer, plsa_fisher_score, LdaModel, LdaOptions, PlsaModel};

/// Floor on whitening standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A named slice of a Fisher vector. `stride` is the number of dimensions
/// per component (1 for per-component blocks), so entry `i` of the block
/// belongs to component `i / stride`, dimension `i % stride`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutBlock {
    pub name: String,
    /// Spatial cell the block was computed on (0 without a pyramid).
    pub model_id: u32,
    pub offset: usize,
    pub length: usize,
    pub stride: usize,
}

impl LayoutBlock {
    pub fn new(name: &str, offset: usize, length: usize, stride: usize) -> Self {
        LayoutBlock {
            name: name.to_string(),
            model_id: 0,
            offset,
            length,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Array1<f64>,
    pub layout: Vec<LayoutBlock>,
}

impl FisherVector {
    pub fn new(values: Array1<f64>, layout: Vec<LayoutBlock>) -> Result<Self> {
        let mut next = 0;
        for b in &layout {
            if b.offset != next {
                return Err(Error::invalid(format!(
                    "layout block {} starts at {} instead of {next}",
                    b.name, b.offset
                )));
            }
            if b.stride == 0 || b.length % b.stride != 0 {
                return Err(Error::invalid(format!("layout block {} has a bad stride", b.name)));
            }
            next += b.length;
        }
        if next != values.len() {
            return Err(Error::DimensionMismatch {
                expected: next,
                got: values.len(),
            });
        }
        Ok(FisherVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str, model_id: u32) -> Option<ArrayView1<'_, f64>> {
        self.layout
            .iter()
            .find(|b| b.name == name && b.model_id == model_id)
            .map(|b| self.values.slice(s![b.offset..b.offset + b.length]))
    }
}

/// Per-dimension standardization learned on training vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Mean and (population) standard deviation of every column.
pub fn fit_whitening(train: ArrayView2<f64>) -> Result<WhitenStats> {
    let n = train.nrows();
    if n < 2 {
        return Err(Error::invalid("whitening needs at least two training vectors"));
    }
    let mut mean = Array1::zeros(train.ncols());
    let mut std = Array1::zeros(train.ncols());
    let mut floored = 0usize;
    let mut col = vec![0.0; n];
    for (j, c) in train.columns().into_iter().enumerate() {
        col.iter_mut().zip(c.iter()).for_each(|(o, v)| *o = *v);
        let mu = pairwise_sum(&col) / n as f64;
        col.iter_mut().for_each(|v| *v = (*v - mu) * (*v - mu));
        let sd = (pairwise_sum(&col) / n as f64).sqrt();
        mean[j] = mu;
        std[j] = if sd < STD_FLOOR {
            floored += 1;
            STD_FLOOR
        } else {
            sd
        };
    }
    if floored > 0 {
        log::warn!("{floored} constant dimension(s) floored during whitening");
    }
    Ok(WhitenStats { mean, std })
}

pub fn whiten(stats: &WhitenStats, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.len() != stats.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.mean.len(),
            got: v.len(),
        });
    }
    Ok((&v - &stats.mean) / &stats.std)
}

/// `sign(x)|x|^ρ` elementwise, with `0 ↦ 0` for every `ρ`.
pub fn power_normalize(v: ArrayView1<f64>, rho: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    Ok(v.mapv(|x| if x == 0.0 { 0.0 } else { x.signum() * x.abs().powf(rho) }))
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        &v / norm
    } else {
        v.to_owned()
    }
}

/// Axis-aligned cell `[x0, x1) × [y0, y1)` in normalized image coordinates.
/// A cell whose upper edge is 1 also contains that edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Cell {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let inside = |v: f64, lo: f64, hi: f64| v >= lo && (v < hi || (hi >= 1.0 && v <= hi));
        inside(x, self.x0, self.x1) && inside(y, self.y0, self.y1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpmGrid {
    pub cells: Vec<Cell>,
}

impl SpmGrid {
    /// Concatenation of regular grids given as `(columns, rows)`.
    pub fn from_levels(levels: &[(usize, usize)]) -> Result<Self> {
        let mut cells = Vec::new();
        for &(nx, ny) in levels {
            if nx == 0 || ny == 0 {
                return Err(Error::invalid("grid levels need at least one row and column"));
            }
            for r in 0..ny {
                for c in 0..nx {
                    cells.push(Cell {
                        x0: c as f64 / nx as f64,
                        x1: (c + 1) as f64 / nx as f64,
                        y0: r as f64 / ny as f64,
                        y1: (r + 1) as f64 / ny as f64,
                    });
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::invalid("empty grid"));
        }
        Ok(SpmGrid { cells })
    }

    /// The whole image only.
    pub fn single() -> Self {
        SpmGrid::from_levels(&[(1, 1)]).expect("valid grid")
    }

    /// Descriptor rows falling in each cell.
    pub fn assign(&self, coords: ArrayView2<f64>) -> Vec<Vec<usize>> {
        self.cells
            .iter()
            .map(|cell| {
                (0..coords.nrows())
                    .filter(|&i| cell.contains(coords[[i, 0]], coords[[i, 1]]))
                    .collect()
            })
            .collect()
    }
}

impl Default for SpmGrid {
    /// Whole image, 2×2 quadrants and three horizontal stripes.
    fn default() -> Self {
        SpmGrid::from_levels(&[(1, 1), (2, 2), (1, 3)]).expect("valid grid")
    }
}

/// Model whose score is used as the (raw) image signature.
#[derive(Debug, Clone)]
pub enum ScoreModel {
    Bow(MultinomialModel),
    Polya(PolyaModel),
    Plsa(PlsaModel),
    Lda(LdaModel, LdaOptions),
    Mog,
    /// With `infer_assignments` the descriptor-to-component assignments are
    /// optimized per image; otherwise the vocabulary posteriors are kept.
    LatMog {
        model: LatentMogModel,
        infer_assignments: bool,
    },
}

impl ScoreModel {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreModel::Bow(_) => "bow",
            ScoreModel::Polya(_) => "polya",
            ScoreModel::Plsa(_) => "plsa",
            ScoreModel::Lda(..) => "lda",
            ScoreModel::Mog => "mog",
            ScoreModel::LatMog { .. } => "latmog",
        }
    }

    /// Layout of one cell's score for a vocabulary of size `k` in `d`
    /// dimensions.
    pub fn layout(&self, k: usize, d: usize) -> Vec<LayoutBlock> {
        match self {
            ScoreModel::Bow(_) => vec![LayoutBlock::new("bow.gamma", 0, k, 1)],
            ScoreModel::Polya(_) => vec![LayoutBlock::new("polya.alpha", 0, k, 1)],
            ScoreModel::Plsa(m) => {
                let t = m.n_topics();
                vec![
                    LayoutBlock::new("plsa.theta", 0, t, 1),
                    LayoutBlock::new("plsa.pi", t, t * k, k),
                ]
            }
            ScoreModel::Lda(m, _) => {
                let t = m.n_topics();
                vec![
                    LayoutBlock::new("lda.alpha", 0, t, 1),
                    LayoutBlock::new("lda.eta", t, t * k, k),
                ]
            }
            ScoreModel::Mog => mog_layout(k, d),
            ScoreModel::LatMog { .. } => latent_mog_layout(k, d),
        }
    }

    /// Score from the vocabulary statistics of a set of descriptors. Count
    /// models use the zero-order statistics as (soft) word counts.
    pub fn score_from_stats(&self, vocab: Option<&GaussianMixture>, stats: &SufficientStats) -> Result<Array1<f64>> {
        let counts = || CountVector::new(stats.s0.clone());
        match self {
            ScoreModel::Bow(m) => bow_fisher_score(m, &counts()?),
            ScoreModel::Polya(m) => polya_fisher_score(m, &counts()?),
            ScoreModel::Plsa(m) => plsa_fisher_score(m, &counts()?),
            ScoreModel::Lda(m, opts) => {
                let post = lda_infer(m, &counts()?, *opts)?;
                Ok(lda_fisher_score(m, &post))
            }
            ScoreModel::Mog => {
                let vocab = vocab.ok_or_else(|| Error::invalid("the MoG score needs the vocabulary"))?;
                mog_fisher_score(vocab, stats)
            }
            ScoreModel::LatMog { model, .. } => {
                let post = infer_from_stats(model, stats)?;
                Ok(latent_mog_fisher_score(model, &post.params))
            }
        }
    }
}

/// Everything needed to turn a descriptor set into a final representation.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub vocab: GaussianMixture,
    pub model: ScoreModel,
    /// Keep only the `K'` largest posteriors of every descriptor.
    pub clip: Option<usize>,
    pub spm: Option<SpmGrid>,
    pub whitening: Option<WhitenStats>,
    pub rho: f64,
}

impl Pipeline {
    fn cell_score(&self, set: &DescriptorSet) -> Result<Array1<f64>> {
        if let ScoreModel::LatMog {
            model,
            infer_assignments: true,
        } = &self.model
        {
            let post = infer_latent_mog(model, set, InferOptions::default())?;
            return Ok(latent_mog_fisher_score(model, &post.params));
        }
        let stats = image_stats(&self.vocab, set, self.clip)?;
        self.model.score_from_stats(Some(&self.vocab), &stats)
    }

    /// Concatenated per-cell scores, before any normalization.
    pub fn raw_signature(&self, set: &DescriptorSet) -> Result<FisherVector> {
        let base = self.model.layout(self.vocab.n_components(), self.vocab.dim());
        let base_len: usize = base.iter().map(|b| b.length).sum();
        let cells: Vec<DescriptorSet> = match (&self.spm, set.coords()) {
            (None, _) => vec![set.clone()],
            (Some(_), None) => {
                log::warn!(
                    "image {} has no patch coordinates; using the whole image only",
                    set.image_id
                );
                vec![set.clone()]
            }
            (Some(grid), Some(coords)) => grid
                .assign(coords)
                .iter()
                .map(|rows| set.select(rows))
                .collect(),
        };
        let mut values = Array1::zeros(base_len * cells.len());
        let mut layout = Vec::with_capacity(base.len() * cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let offset = c * base_len;
            // Empty cells keep a zero block.
            if !cell.is_empty() {
                let score = self.cell_score(cell)?;
                values.slice_mut(s![offset..offset + base_len]).assign(&score);
            }
            for b in &base {
                layout.push(LayoutBlock {
                    model_id: c as u32,
                    offset: offset + b.offset,
                    ..b.clone()
                });
            }
        }
        FisherVector::new(values, layout)
    }

    /// Whitening (when fitted), then power normalization, then ℓ2.
    pub fn finalize(&self, raw: FisherVector) -> Result<FisherVector> {
        let whitened = match &self.whitening {
            Some(w) => whiten(w, raw.values.view())?,
            None => raw.values,
        };
        let powered = power_normalize(whitened.view(), self.rho)?;
        Ok(FisherVector {
            values: l2_normalize(powered.view()),
            layout: raw.layout,
        })
    }
}

pub fn encode_image(pipeline: &Pipeline, set: &DescriptorSet) -> Result<FisherVector> {
    pipeline.finalize(pipeline.raw_signature(set)?)
}

/// Stacks the values of several vectors into rows.
pub fn stack(vectors: &[FisherVector]) -> Result<Array2<f64>> {
    let len = vectors.first().map_or(0, FisherVector::len);
    let mut out = Array2::zeros((vectors.len(), len));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: v.len(),
            });
        }
        out.row_mut(i).assign(&v.values);
    }
    Ok(out)
}

const FV_MAGIC: &[u8; 4] = b"NIFV";
const FV_VERSION: u32 = 1;

/// Binary vector file (little-endian): `"NIFV"`, `u32` version, `u32`
/// length, `u32` block count, then per block `u32` name length, UTF-8 name,
/// `u32` model id, `u32` offset, `u32` length, `u32` stride; then `length`
/// `f32` values.
pub fn encode_fisher_vector(fv: &FisherVector) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * fv.len());
    buf.extend_from_slice(FV_MAGIC);
    for w in [FV_VERSION, fv.len() as u32, fv.layout.len() as u32] {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for b in &fv.layout {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        for w in [b.model_id, b.offset as u32, b.length as u32, b.stride as u32] {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    for v in fv.values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_fisher_vector(bytes: &[u8]) -> Result<FisherVector> {
    if bytes.len() < 4 || &bytes[..4] != FV_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let mut pos = 4;
    let word = |pos: &mut usize| -> Result<u32> {
        let end = *pos + 4;
        if end > bytes.len() {
            return Err(Error::parse(*pos as u64, "truncated header"));
        }
        let w = u32::from_le_bytes(bytes[*pos..end].try_into().unwrap());
        *pos = end;
        Ok(w)
    };
    let version = word(&mut pos)?;
    if version != FV_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let len = word(&mut pos)? as usize;
    let n_blocks = word(&mut pos)? as usize;
    let mut layout = Vec::with_capacity(n_blocks.min(1 << 16));
    for _ in 0..n_blocks {
        let name_len = word(&mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(Error::parse(pos as u64, "truncated header"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| Error::parse(pos as u64, "block name is not UTF-8"))?
            .to_string();
        pos += name_len;
        let model_id = word(&mut pos)?;
        let offset = word(&mut pos)? as usize;
        let length = word(&mut pos)? as usize;
        let stride = word(&mut pos)? as usize;
        layout.push(LayoutBlock {
            name,
            model_id,
            offset,
            length,
            stride,
        });
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        if pos + 4 > bytes.len() {
            return Err(Error::parse(pos as u64, "truncated payload"));
        }
        let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(pos as u64, "non-finite value"));
        }
        values.push(v as f64);
        pos += 4;
    }
    FisherVector::new(Array1::from(values), layout)
}

pub fn write_fisher_vector(fv: &FisherVector, path: &Path) -> Result<()> {
    fs::write(path, encode_fisher_vector(fv))?;
    Ok(())
}

pub fn read_fisher_vector(path: &Path) -> Result<FisherVector> {
    decode_fisher_vector(&fs::read(path)?)
}

/// CSV with one row per coordinate: `index,block,model_id,component,dim,value`.
pub fn fisher_vector_csv(fv: &FisherVector) -> String {
    let mut out = String::from("index,block,model_id,component,dim,value\n");
    for b in &fv.layout {
        for i in 0..b.length {
            let idx = b.offset + i;
            let _ = writeln!(
                out,
                "{idx},{},{},{},{},{}",
                b.name,
                b.model_id,
                i / b.stride,
                i % b.stride,
                fv.values[idx]
            );
        }
    }
    out
}
