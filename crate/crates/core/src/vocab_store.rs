//! Vocabulary embedding matrices (VEM1 files and synthetic generators) and
//! the item embedding table.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const VEM1_MAGIC: &[u8; 4] = b"VEM1";
const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabSource {
    File,
    SyntheticClustered,
    SyntheticRandom,
}

impl fmt::Display for VocabSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabSource::File => "file",
            VocabSource::SyntheticClustered => "synthetic-clustered",
            VocabSource::SyntheticRandom => "synthetic-random",
        })
    }
}

impl FromStr for VocabSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(VocabSource::File),
            "synthetic-clustered" => Ok(VocabSource::SyntheticClustered),
            "synthetic-random" => Ok(VocabSource::SyntheticRandom),
            other => Err(Error::Format(format!("unknown vocabulary source {other:?}"))),
        }
    }
}

/// A frozen `V×d_llm` token embedding matrix.
#[derive(Clone, Debug)]
pub struct VocabEmbedding {
    pub matrix: Arc<Mat>,
    pub name: String,
    pub source: VocabSource,
    pub cluster_labels: Option<Vec<usize>>,
}

impl VocabEmbedding {
    pub fn new(matrix: Mat, name: impl Into<String>, source: VocabSource) -> Result<Self> {
        let v = Self {
            matrix: Arc::new(matrix),
            name: name.into(),
            source,
            cluster_labels: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size() == 0 || self.dim() == 0 {
            return Err(Error::Validation("vocabulary must be at least 1×1".into()));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("vocabulary {} has non-finite entries", self.name)));
        }
        if let Some(labels) = &self.cluster_labels {
            if labels.len() != self.vocab_size() {
                return Err(Error::Validation("cluster_labels length must equal V".into()));
            }
        }
        Ok(())
    }

    /// Mean of all token rows, `1×d_llm`.
    pub fn mean_row(&self) -> Mat {
        self.matrix
            .mean_axis(ndarray::Axis(0))
            .expect("V >= 1")
            .insert_axis(ndarray::Axis(0))
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Serializes a matrix as VEM1 (values narrowed to `f32`).
pub fn encode_vem1(matrix: &Mat) -> Result<Vec<u8>> {
    let (rows, cols) = matrix.dim();
    let rows32 = u32::try_from(rows).map_err(|_| Error::Format("too many rows".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Format("too many columns".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    buf.extend_from_slice(VEM1_MAGIC);
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    for &v in matrix.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_vem1(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != VEM1_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected VEM1",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("VEM1 payload has non-finite values".into()));
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn write_matrix(path: &Path, matrix: &Mat) -> Result<()> {
    fs::write(path, encode_vem1(matrix)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    decode_vem1(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a VEM1 file plus its optional `<path>.meta` sidecar.
pub fn load_vocab(path: &Path) -> Result<VocabEmbedding> {
    let matrix = read_matrix(path)?;
    if matrix.nrows() == 0 || matrix.ncols() == 0 {
        return Err(Error::Validation("vocabulary must be at least 1×1".into()));
    }
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "vocab".into());
    let mut source = VocabSource::File;
    let meta = meta_path(path);
    if meta.exists() {
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("name=") {
                name = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("source=") {
                source = v.trim().parse()?;
            }
        }
    }
    VocabEmbedding::new(matrix, name, source)
}

pub fn save_vocab(path: &Path, vocab: &VocabEmbedding) -> Result<()> {
    write_matrix(path, &vocab.matrix)?;
    let meta = meta_path(path);
    fs::write(&meta, format!("name={}\nsource={}\n", vocab.name, vocab.source))
        .map_err(|e| Error::io(&meta, e))
}

fn gaussian(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Clustered synthetic vocabulary: token `v` belongs to cluster
/// `v % n_clusters` and equals its unit-norm centroid plus Gaussian noise
/// with expected norm `spread`.
pub fn synth_vocab(
    vocab_size: usize,
    dim: usize,
    n_clusters: usize,
    spread: f64,
    seed: u64,
) -> Result<VocabEmbedding> {
    if vocab_size == 0 || dim == 0 {
        return Err(Error::Config("vocabulary size and dimension must be positive".into()));
    }
    if n_clusters == 0 || n_clusters > vocab_size {
        return Err(Error::Config(format!(
            "n_clusters must be in [1, {vocab_size}], got {n_clusters}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config("spread must be finite and nonnegative".into()));
    }
    let mut rng = rng::stream(seed, &[tag::INIT, 0]);
    let centroids = unit_rows(&mut rng, n_clusters, dim);
    let noise_sd = spread / (dim as f64).sqrt();
    let labels: Vec<usize> = (0..vocab_size).map(|v| v % n_clusters).collect();
    let matrix = Mat::from_shape_fn((vocab_size, dim), |(v, j)| {
        centroids[[labels[v], j]] + noise_sd * gaussian(&mut rng)
    });
    let mut vocab = VocabEmbedding::new(
        matrix,
        format!("synth-clustered-{seed}"),
        VocabSource::SyntheticClustered,
    )?;
    vocab.cluster_labels = Some(labels);
    Ok(vocab)
}

/// `n` unit-norm Gaussian directions.
pub fn unit_rows(rng: &mut rng::Rng, n: usize, dim: usize) -> Mat {
    let mut m = Mat::from_shape_fn((n, dim), |_| gaussian(rng));
    for mut row in m.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        } else {
            row[0] = 1.0;
        }
    }
    m
}

pub const DEFAULT_RANDOM_SCALE: f64 = 0.02;
pub const ITEM_INIT_STD: f64 = 0.02;

/// I.i.d. `N(0, scale²)` token embeddings.
pub fn random_vocab(vocab_size: usize, dim: usize, scale: f64, seed: u64) -> Result<VocabEmbedding> {
    if vocab_size == 0 || dim == 0 {
        return Err(Error::Config("vocabulary size and dimension must be positive".into()));
    }
    let mut rng = rng::stream(seed, &[tag::INIT, 1]);
    let matrix = Mat::from_shape_fn((vocab_size, dim), |_| scale * gaussian(&mut rng));
    VocabEmbedding::new(matrix, format!("synth-random-{seed}"), VocabSource::SyntheticRandom)
}

/// Item embedding table; row 0 is padding and stays zero.
#[derive(Clone, Debug)]
pub struct ItemTable {
    pub matrix: Arc<Mat>,
    pub trainable: bool,
}

impl ItemTable {
    pub fn init(n_items: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tag::INIT, 2]);
        let mut m = Mat::from_shape_fn((n_items + 1, dim), |_| std * gaussian(&mut rng));
        m.row_mut(0).fill(0.0);
        Self {
            matrix: Arc::new(m),
            trainable: true,
        }
    }

    pub fn from_matrix(matrix: Arc<Mat>) -> Self {
        Self {
            matrix,
            trainable: true,
        }
    }

    pub fn n_items(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn row(&self, item: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(item)
    }
}
