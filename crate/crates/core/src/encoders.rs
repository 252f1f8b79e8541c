//! Modality feature providers.
//!
//! The toy encoders are deliberately shallow (embedding or projection only):
//! any cross-modal interaction in a model comes from the fusion layer.
//!
//! Feature file layout (UTF-8): a header line `L d`, then `L` lines of `d`
//! whitespace-separated decimal numbers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::FeatureRef;
use crate::error::{Error, Result};
use crate::layers::{glorot, Linear};
use crate::tensor::Tensor;

/// Default maximum number of text tokens.
pub const DEFAULT_MAX_TOKENS: usize = 256;

/// An `L x d` sequence of feature vectors for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Tensor,
}

impl FeatureSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "feature sequence must be L x d, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(FeatureSequence { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Parses the feature-file text layout. `expected_dim`, when given, must
/// match the declared width.
pub fn parse_feature_text(text: &str, expected_dim: Option<usize>) -> Result<FeatureSequence> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("feature file is empty".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data(format!("bad feature header `{header}`")))?;
    let &[l, d] = dims.as_slice() else {
        return Err(Error::Data(format!("feature header must be `L d`, got `{header}`")));
    };
    if l == 0 || d == 0 {
        return Err(Error::Data("feature header dims must be positive".into()));
    }
    if let Some(e) = expected_dim {
        if e != d {
            return Err(Error::Shape(format!("feature dim mismatch: expected {e}, file declares {d}")));
        }
    }
    let mut data = Vec::with_capacity(l * d);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("feature row {}: {e}", i + 1)))?;
        if row.len() != d {
            return Err(Error::Shape(format!(
                "feature dim mismatch: header declares {d}, row {} has {}",
                i + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {}", i + 1)));
        }
        data.extend(row);
        rows += 1;
    }
    if rows != l {
        return Err(Error::Shape(format!("header declares {l} rows, found {rows}")));
    }
    FeatureSequence::new(Tensor::matrix(l, d, data))
}

pub fn read_feature_file(path: &Path, expected_dim: Option<usize>) -> Result<FeatureSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_text(&text, expected_dim)
}

pub fn format_feature_text(seq: &FeatureSequence) -> String {
    let v = seq.values();
    let mut s = format!("{} {}\n", seq.len(), seq.dim());
    for i in 0..seq.len() {
        let row: Vec<String> = v.row(i).iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Loads precomputed features, resolving relative paths against `base_dir`.
pub fn load_precomputed(
    source: &FeatureRef,
    base_dir: &Path,
    expected_dim: Option<usize>,
) -> Result<FeatureSequence> {
    let seq = match source {
        FeatureRef::Inline(rows) => FeatureSequence::from_rows(rows)?,
        FeatureRef::File(p) => read_feature_file(&base_dir.join(p), expected_dim)?,
    };
    if let Some(e) = expected_dim {
        if seq.dim() != e {
            return Err(Error::Shape(format!(
                "feature dim mismatch: expected {e}, got {}",
                seq.dim()
            )));
        }
    }
    Ok(seq)
}

/// Whitespace tokenizer with per-character fallback for unknown words.
/// Id 0 is reserved for unknown symbols.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl Vocabulary {
    /// Words seen at least `min_count` times plus every character seen.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut chars = std::collections::BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
                chars.extend(w.chars());
            }
        }
        let mut words: Vec<&str> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .map(|(w, _)| w)
            .collect();
        words.sort_unstable();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(words.iter().map(|w| w.to_string()));
        tokens.extend(chars.iter().map(|c| c.to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuilds from an ordered token list whose first entry is [`UNK`].
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        Vocabulary { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            match self.index.get(w) {
                Some(&id) => ids.push(id),
                None => ids.extend(w.chars().map(|c| {
                    let mut buf = [0u8; 4];
                    self.index.get(&*c.encode_utf8(&mut buf)).copied().unwrap_or(0)
                })),
            }
        }
        ids.truncate(max_len);
        ids
    }
}

/// Token embedding followed by a linear projection to the shared dim.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub embedding: ParamId,
    pub projection: Linear,
    pub max_tokens: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: Vocabulary,
        embed_dim: usize,
        out_dim: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add("text.embedding", glorot(vocab.len(), embed_dim, rng));
        let projection = Linear::new(store, "text.projection", embed_dim, out_dim, true, rng);
        TextEncoder {
            vocab,
            embedding,
            projection,
            max_tokens,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("text needs at least one token".into()));
        }
        let v = store.get(self.embedding).rows();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {v}"
            )));
        }
        let tokens = &tokens[..tokens.len().min(self.max_tokens)];
        let table = g.param(store, self.embedding);
        let emb = g.gather_rows(table, tokens);
        Ok(self.projection.forward(g, store, emb))
    }
}

/// Encodes a token sequence outside any training graph.
pub fn encode_text(tokens: &[usize], enc: &TextEncoder, store: &ParamStore) -> Result<FeatureSequence> {
    let mut g = Graph::new();
    let v = enc.forward(&mut g, store, tokens)?;
    FeatureSequence::new(g.value(v).clone().with_requires_grad(false))
}

/// An `H x W x C` image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageGrid::new(height, width, channels, vec![0.0; height * width * channels]).unwrap()
    }

    /// Non-overlapping `patch x patch` tiles, each flattened to one row, in
    /// row-major tile order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        let (ph, pw) = (self.height / patch, self.width / patch);
        let row_len = patch * patch * self.channels;
        let mut out = Vec::with_capacity(ph * pw * row_len);
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..patch {
                    let start = ((py * patch + y) * self.width + px * patch) * self.channels;
                    out.extend_from_slice(&self.data[start..start + patch * self.channels]);
                }
            }
        }
        Ok(Tensor::matrix(ph * pw, row_len, out))
    }
}

/// Loads an image file, resized to `size x size` RGB with values in [0,1].
pub fn load_image(path: &Path, size: u32) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        size,
        size,
        image::imageops::FilterType::Triangle,
    );
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImageGrid::new(size as usize, size as usize, 3, data)
}

/// Flatten-patch plus linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub patch: usize,
    pub channels: usize,
    pub projection: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        patch: usize,
        channels: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let projection = Linear::new(
            store,
            "image.projection",
            patch * patch * channels,
            out_dim,
            true,
            rng,
        );
        ImageEncoder {
            patch,
            channels,
            projection,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grid: &ImageGrid) -> Result<Var> {
        if grid.channels != self.channels {
            return Err(Error::Shape(format!(
                "image has {} channels, encoder expects {}",
                grid.channels, self.channels
            )));
        }
        let patches = g.constant(grid.patches(self.patch)?);
        Ok(self.projection.forward(g, store, patches))
    }
}

pub fn encode_image(grid: &ImageGrid, enc: &ImageEncoder, store: &ParamStore) -> Result<FeatureSequence> {
    let mut g = Graph::new();
    let v = enc.forward(&mut g, store, grid)?;
    FeatureSequence::new(g.value(v).clone().with_requires_grad(false))
}

/// Linear projection of precomputed features to the shared dim.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjector {
    pub projection: Linear,
}

impl FeatureProjector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        FeatureProjector {
            projection: Linear::new(store, name, in_dim, out_dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: &FeatureSequence) -> Result<Var> {
        if seq.dim() != self.projection.in_dim {
            return Err(Error::Shape(format!(
                "feature dim {} does not match projector input {}",
                seq.dim(),
                self.projection.in_dim
            )));
        }
        let x = g.constant(seq.values().clone());
        Ok(self.projection.forward(g, store, x))
    }
}
