//! Text and image encoders that share one embedding space.
//!
//! The text side maps labels to unit vectors (hashed, pinned from a lookup
//! table, or loaded from an external encoder's dump). The image side is a
//! small convolutional backbone ending at stride `2^stages`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::concepts::normalize_label;
use crate::data_synth::{render_swatch, Image, ShapePalette, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One unit-norm row per category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEmbeddingTable<T> {
    pub vectors: Tensor<T>,
    pub labels: Vec<String>,
}

impl<T: Scalar> CategoryEmbeddingTable<T> {
    pub fn new(vectors: Tensor<T>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() || vectors.rows() != labels.len() {
            return Err(Error::invalid(format!("embedding table has {} rows for {} labels", vectors.rows(), labels.len())));
        }
        let tol = if T::BYTES == 4 { 1e-5 } else { 1e-6 };
        for r in 0..vectors.rows() {
            let n = row_norm(vectors.row(r));
            if (n - 1.0).abs() > tol {
                return Err(Error::invalid(format!("embedding row {r} has norm {n}")));
            }
        }
        Ok(CategoryEmbeddingTable { vectors, labels })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `ids` in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("category {bad} outside embedding table of {}", self.len())));
        }
        Ok(CategoryEmbeddingTable { vectors: self.vectors.gather_rows(ids), labels: ids.iter().map(|&i| self.labels[i].clone()).collect() })
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

fn normalized<T: Scalar>(v: &[f64]) -> Result<Vec<T>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Numerical("embedding vector has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| T::lit(x / n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TextEncoderMode {
    /// Pseudo-random unit vector seeded by `(hash(label), seed)`.
    SyntheticHash,
    /// Pinned vectors keyed by normalised label; unknown labels optionally fall
    /// back to the hash encoder.
    LookupTable {
        vectors: BTreeMap<String, Vec<f64>>,
        #[serde(default)]
        hash_fallback: bool,
    },
    /// Vectors dumped by an external encoder; every label must be covered.
    ExternalAdapter {
        path: PathBuf,
        #[serde(skip)]
        vectors: BTreeMap<String, Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderSpec {
    pub mode: TextEncoderMode,
    pub dim: usize,
    pub seed: u64,
}

impl TextEncoderSpec {
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        TextEncoderSpec { mode: TextEncoderMode::SyntheticHash, dim, seed }
    }

    pub fn lookup(vectors: BTreeMap<String, Vec<f64>>, dim: usize, seed: u64, hash_fallback: bool) -> Self {
        let vectors = vectors.into_iter().map(|(k, v)| (normalize_label(&k), v)).collect();
        TextEncoderSpec { mode: TextEncoderMode::LookupTable { vectors, hash_fallback }, dim, seed }
    }

    pub fn external(path: &Path, dim: usize) -> Result<Self> {
        let vectors = load_embedding_file(path)?;
        Ok(TextEncoderSpec { mode: TextEncoderMode::ExternalAdapter { path: path.to_path_buf(), vectors }, dim, seed: 0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 || self.dim % 2 != 0 {
            return Err(Error::config("text_encoder.dim", format!("must be even and at least 4, got {}", self.dim)));
        }
        let check = |vectors: &BTreeMap<String, Vec<f64>>| -> Result<()> {
            for (k, v) in vectors {
                if v.len() != self.dim {
                    return Err(Error::config("text_encoder.vectors", format!("`{k}` has {} entries, expected {}", v.len(), self.dim)));
                }
            }
            Ok(())
        };
        match &self.mode {
            TextEncoderMode::SyntheticHash => Ok(()),
            TextEncoderMode::LookupTable { vectors, .. } | TextEncoderMode::ExternalAdapter { vectors, .. } => check(vectors),
        }
    }

    fn hashed(&self, label: &str) -> Vec<f64> {
        let digest = Sha256::digest(label.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        for (i, b) in self.seed.to_le_bytes().iter().enumerate() {
            seed[i] ^= b;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn raw(&self, label: &str) -> Result<Vec<f64>> {
        match &self.mode {
            TextEncoderMode::SyntheticHash => Ok(self.hashed(label)),
            TextEncoderMode::LookupTable { vectors, hash_fallback } => match vectors.get(label) {
                Some(v) => Ok(v.clone()),
                None if *hash_fallback => Ok(self.hashed(label)),
                None => Err(Error::Lookup(label.to_string())),
            },
            TextEncoderMode::ExternalAdapter { vectors, .. } => vectors.get(label).cloned().ok_or_else(|| Error::Lookup(label.to_string())),
        }
    }
}

/// Encode labels into a unit-norm table. Labels are case-folded and trimmed
/// before lookup or hashing.
pub fn encode_text<T: Scalar>(labels: &[String], spec: &TextEncoderSpec) -> Result<CategoryEmbeddingTable<T>> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::invalid("no labels to encode"));
    }
    let mut data = Vec::with_capacity(labels.len() * spec.dim);
    for l in labels {
        let key = normalize_label(l);
        if key.is_empty() {
            return Err(Error::invalid("blank label"));
        }
        data.extend(normalized::<T>(&spec.raw(&key)?)?);
    }
    CategoryEmbeddingTable::new(Tensor::from_vec(labels.len(), spec.dim, data), labels.to_vec())
}

/// JSON object mapping label to vector. Keys are normalised on load.
pub fn load_embedding_file(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    Ok(raw.into_iter().map(|(k, v)| (normalize_label(&k), v)).collect())
}

pub fn save_embedding_file(path: &Path, vectors: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let text = serde_json::to_string_pretty(vectors).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Spatial features `[height * width, dim]` at `stride` pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub features: Tensor<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, stride: usize, features: Tensor<T>) -> Result<Self> {
        if features.rows() != height * width {
            return Err(Error::invalid(format!("feature grid {height}x{width} has {} rows", features.rows())));
        }
        if !features.all_finite() {
            return Err(Error::Numerical("feature grid contains non-finite values".into()));
        }
        Ok(FeatureGrid { height, width, stride, features })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stage; the stride is `2^stages`.
    pub channels: Vec<usize>,
    pub dim: usize,
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }
}

/// Stages of (3x3 convolution, GELU, 2x2 average pooling) followed by a
/// per-position linear projection into the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Linear>,
    pub proj: Linear,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() > 4 {
            return Err(Error::config("model.backbone_channels", "need between 1 and 4 stages"));
        }
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            stages.push(Linear::new(store, &format!("backbone.stage{i}"), 9 * cin, c, rng));
            cin = c;
        }
        let proj = Linear::new(store, "backbone.proj", cin, config.dim, rng);
        Ok(Backbone { config, stages, proj })
    }

    pub fn set_frozen<T: Scalar>(&self, store: &mut ParamStore<T>, frozen: bool) {
        for l in self.stages.iter().chain(std::iter::once(&self.proj)) {
            store.set_frozen(l.weight, frozen);
            store.set_frozen(l.bias, frozen);
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let s = self.config.stride();
        (height.div_ceil(s), width.div_ceil(s))
    }

    /// Image into the graph as a centred `[H*W, 3]` constant, through every stage.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: &Image) -> (Var, usize, usize) {
        let (mut h, mut w) = (image.height, image.width);
        let px = Tensor::from_vec(h * w, 3, image.pixels.iter().map(|&v| T::lit(v - 0.5)).collect());
        let mut x = g.constant(px);
        for stage in &self.stages {
            let cols = g.im2col3(x, h, w);
            let y = stage.forward(g, store, cols);
            let y = g.gelu(y);
            x = g.avg_pool2(y, h, w);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (self.proj.forward(g, store, x), h, w)
    }

    /// Shift the projection bias so the mean feature over random flat-colour
    /// swatches is zero. Centred features make cosine similarity discriminative.
    pub fn center<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, samples: usize) {
        let mut mean = vec![0.0; self.config.dim];
        for _ in 0..samples {
            let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let img = Image { image_id: "c".into(), height: 8, width: 8, pixels: (0..64).flat_map(|_| c).collect() };
            let mut g = Graph::new();
            let (f, _, _) = self.forward(&mut g, store, &img);
            let v = g.value(f);
            for r in 0..v.rows() {
                for (m, x) in mean.iter_mut().zip(v.row(r)) {
                    *m += x.as_f64() / (v.rows() * samples) as f64;
                }
            }
        }
        let b = store.get(self.proj.bias).clone();
        let nb = Tensor::from_fn(1, b.cols(), |_, c| b.get(0, c) - T::lit(mean[c]));
        store.set(self.proj.bias, nb);
    }
}

/// Run the backbone on one image.
pub fn encode_image<T: Scalar>(image: &Image, backbone: &Backbone, store: &ParamStore<T>, model_dim: usize) -> Result<FeatureGrid<T>> {
    image.validate()?;
    if backbone.config.dim != model_dim {
        return Err(Error::config("model.dim", format!("backbone emits {} channels but the model expects {model_dim}", backbone.config.dim)));
    }
    let mut g = Graph::new();
    let (f, h, w) = backbone.forward(&mut g, store, image);
    FeatureGrid::new(h, w, backbone.config.stride(), g.value(f).clone())
}

/// Text vectors aligned with the backbone: the label of each category maps to
/// the normalised mean feature of a swatch rendered from its recipe. This is
/// the stand-in for a contrastively aligned image/text encoder pair.
pub fn appearance_vectors<T: Scalar>(
    vocab: &Vocabulary,
    palette: &ShapePalette,
    backbone: &Backbone,
    store: &ParamStore<T>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for c in vocab.categories() {
        let recipe = palette.get(&c.id).ok_or_else(|| Error::config("palette", format!("no recipe for category {}", c.id)))?;
        let swatch = render_swatch(recipe, 32, 32);
        let grid = encode_image(&swatch, backbone, store, backbone.config.dim)?;
        let mut mean = vec![0.0; grid.dim()];
        for r in 0..grid.positions() {
            for (m, v) in mean.iter_mut().zip(grid.features.row(r)) {
                *m += v.as_f64();
            }
        }
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.insert(normalize_label(&c.label), mean.iter().map(|x| x / n).collect());
    }
    Ok(out)
}
