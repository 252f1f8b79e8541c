//! Fusion architectures and their shared classifier head.
//!
//! | strategy     | fused vector                                           |
//! |--------------|--------------------------------------------------------|
//! | `early`      | `[s_t; s_v]`                                           |
//! | `late`       | mean of two unimodal linear classifiers' probabilities |
//! | `clip_style` | `[u; v; u*v]`, `u`,`v` projected and L2-normalised     |
//! | `cross_t2i`  | `[pool(Att(text -> image)); s_v]`                      |
//! | `cross_i2t`  | `[pool(Att(image -> text)); s_t]`                      |
//! | `mcfm`       | `[c_t; c_v; s_t; s_v]` from bidirectional co-attention |
//!
//! `s_*` are mean-pooled encoder outputs (modality-specific features), `c_*`
//! are mean-pooled co-attended sequences (combined features). `Att(a -> b)`
//! means `a` supplies the queries and attends over `b`'s keys and values.
//! All strategies except `late` end in `GELU MLP (2 layers) -> Dropout ->
//! Linear(3)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::MultiHeadAttention;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::NUM_CLASSES;
use crate::encoders::{
    FeatureProjector, FeatureSequence, ImageEncoder, ImageGrid, TextEncoder, Vocabulary,
    DEFAULT_MAX_TOKENS,
};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Early,
    Late,
    ClipStyle,
    CrossT2I,
    CrossI2T,
    Mcfm,
    /// Unimodal baseline over text features only.
    TextOnly,
    /// Unimodal baseline over image features only.
    ImageOnly,
}

impl Strategy {
    pub const FUSION: [Strategy; 6] = [
        Strategy::Early,
        Strategy::Late,
        Strategy::ClipStyle,
        Strategy::CrossT2I,
        Strategy::CrossI2T,
        Strategy::Mcfm,
    ];
    pub const UNIMODAL: [Strategy; 2] = [Strategy::TextOnly, Strategy::ImageOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Early => "early",
            Strategy::Late => "late",
            Strategy::ClipStyle => "clip_style",
            Strategy::CrossT2I => "cross_t2i",
            Strategy::CrossI2T => "cross_i2t",
            Strategy::Mcfm => "mcfm",
            Strategy::TextOnly => "text_only",
            Strategy::ImageOnly => "image_only",
        }
    }

    pub fn is_fusion(self) -> bool {
        !Self::UNIMODAL.contains(&self)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::FUSION
            .iter()
            .chain(&Self::UNIMODAL)
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown strategy `{s}`; allowed {{early, late, clip_style, cross_t2i, cross_i2t, mcfm}} \
                     (unimodal baselines: text_only, image_only)"
                ))
            })
    }
}

/// How late fusion merges its two unimodal classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LateCombine {
    /// Arithmetic mean of the probability vectors.
    #[default]
    MeanProb,
    /// Mean of the logits.
    MeanLogit,
    /// Elementwise maximum of the probabilities, renormalised.
    MaxProb,
}

impl LateCombine {
    pub fn as_str(self) -> &'static str {
        match self {
            LateCombine::MeanProb => "mean",
            LateCombine::MeanLogit => "logit_mean",
            LateCombine::MaxProb => "max",
        }
    }
}

impl FromStr for LateCombine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LateCombine::MeanProb),
            "logit_mean" => Ok(LateCombine::MeanLogit),
            "max" => Ok(LateCombine::MaxProb),
            _ => Err(Error::InvalidArgument(format!(
                "unknown late combination `{s}`; allowed {{mean, logit_mean, max}}"
            ))),
        }
    }
}

/// What the text encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInputSpec {
    Features { dim: usize },
    Tokens { embed_dim: usize, max_tokens: usize },
}

/// What the image encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInputSpec {
    Features { dim: usize },
    Patches { patch: usize, channels: usize, image_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Shared model dim `d`.
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Number of stacked (co-)attention layers.
    pub depth: usize,
    pub late_combine: LateCombine,
    pub freeze_encoders: bool,
    pub text_input: TextInputSpec,
    pub image_input: ImageInputSpec,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: Strategy::Mcfm,
            dim: 64,
            heads: 8,
            mlp_hidden: 64,
            dropout: 0.5,
            depth: 1,
            late_combine: LateCombine::MeanProb,
            freeze_encoders: false,
            text_input: TextInputSpec::Features { dim: 64 },
            image_input: ImageInputSpec::Features { dim: 64 },
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim == 0 || self.mlp_hidden == 0 {
            return bad("dims must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if let TextInputSpec::Tokens { max_tokens: 0, .. } = self.text_input {
            return bad("max_tokens must be positive".into());
        }
        if let ImageInputSpec::Patches {
            patch,
            image_size,
            channels,
        } = self.image_input
        {
            if patch == 0 || channels == 0 || image_size % patch != 0 {
                return bad(format!("image size {image_size} not divisible by patch {patch}"));
            }
        }
        Ok(())
    }
}

/// Input for one sample, before modality encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(Vec<usize>),
    Features(FeatureSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Grid(ImageGrid),
    Features(FeatureSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub text: TextInput,
    pub image: ImageInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

impl ModelInput {
    /// Copy with one modality's raw input replaced by zeros.
    pub fn with_zeroed(&self, modality: Modality) -> Result<ModelInput> {
        let zero_seq = |s: &FeatureSequence| FeatureSequence::new(Tensor::zeros(s.values().shape()));
        let mut out = self.clone();
        match (modality, &self.text, &self.image) {
            (Modality::Text, TextInput::Features(s), _) => out.text = TextInput::Features(zero_seq(s)?),
            (Modality::Text, TextInput::Tokens(_), _) => {
                return Err(Error::InvalidArgument("cannot zero token input".into()))
            }
            (Modality::Image, _, ImageInput::Features(s)) => out.image = ImageInput::Features(zero_seq(s)?),
            (Modality::Image, _, ImageInput::Grid(g)) => {
                out.image = ImageInput::Grid(ImageGrid::zeros(g.height, g.width, g.channels))
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TextEncoderKind {
    Projector(FeatureProjector),
    Tokens(TextEncoder),
}

#[derive(Debug, Clone, PartialEq)]
enum ImageEncoderKind {
    Projector(FeatureProjector),
    Patches(ImageEncoder),
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

/// Output of a standalone fusion forward in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionOutput {
    Logits(Tensor),
    Probabilities(Tensor),
}

/// A fusion model: configuration, parameters and layer bindings.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub store: ParamStore,
    text_encoder: TextEncoderKind,
    image_encoder: ImageEncoderKind,
    /// MCFM: `[t->v, v->t]` per layer; cross-attention: one block per layer.
    attention: Vec<MultiHeadAttention>,
    clip: Option<(Linear, Linear)>,
    late: Option<(Linear, Linear)>,
    head: Option<Head>,
}

impl FusionModel {
    /// Builds a freshly initialised model. `vocab` is required for token
    /// text input.
    pub fn new(config: FusionConfig, vocab: Option<Vocabulary>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;

        let text_encoder = match config.text_input {
            TextInputSpec::Features { dim } => {
                TextEncoderKind::Projector(FeatureProjector::new(&mut store, "text.projection", dim, d, &mut rng))
            }
            TextInputSpec::Tokens {
                embed_dim,
                max_tokens,
            } => {
                let vocab = vocab.ok_or_else(|| {
                    Error::InvalidArgument("token text input needs a vocabulary".into())
                })?;
                TextEncoderKind::Tokens(TextEncoder::new(&mut store, vocab, embed_dim, d, max_tokens, &mut rng))
            }
        };
        let image_encoder = match config.image_input {
            ImageInputSpec::Features { dim } => ImageEncoderKind::Projector(FeatureProjector::new(
                &mut store,
                "image.projection",
                dim,
                d,
                &mut rng,
            )),
            ImageInputSpec::Patches { patch, channels, .. } => {
                ImageEncoderKind::Patches(ImageEncoder::new(&mut store, patch, channels, d, &mut rng))
            }
        };
        let encoder_params = store.len();

        let mut attention = Vec::new();
        match config.strategy {
            Strategy::Mcfm => {
                for l in 0..config.depth {
                    for dir in ["t2v", "v2t"] {
                        attention.push(MultiHeadAttention::new(
                            &mut store,
                            &format!("coatt{l}.{dir}"),
                            d,
                            config.heads,
                            &mut rng,
                        )?);
                    }
                }
            }
            Strategy::CrossT2I | Strategy::CrossI2T => {
                for l in 0..config.depth {
                    attention.push(MultiHeadAttention::new(
                        &mut store,
                        &format!("crossatt{l}"),
                        d,
                        config.heads,
                        &mut rng,
                    )?);
                }
            }
            _ => {}
        }

        let clip = (config.strategy == Strategy::ClipStyle).then(|| {
            (
                Linear::new(&mut store, "clip.text", d, d, true, &mut rng),
                Linear::new(&mut store, "clip.image", d, d, true, &mut rng),
            )
        });
        let late = (config.strategy == Strategy::Late).then(|| {
            (
                Linear::new(&mut store, "late.text", d, NUM_CLASSES, true, &mut rng),
                Linear::new(&mut store, "late.image", d, NUM_CLASSES, true, &mut rng),
            )
        });
        let fused_dim = match config.strategy {
            Strategy::Early | Strategy::CrossT2I | Strategy::CrossI2T => 2 * d,
            Strategy::ClipStyle => 3 * d,
            Strategy::Mcfm => 4 * d,
            Strategy::TextOnly | Strategy::ImageOnly => d,
            Strategy::Late => 0,
        };
        let head = (fused_dim > 0).then(|| Head {
            fc1: Linear::new(&mut store, "mlp.fc1", fused_dim, config.mlp_hidden, true, &mut rng),
            fc2: Linear::new(&mut store, "mlp.fc2", config.mlp_hidden, config.mlp_hidden, true, &mut rng),
            out: Linear::new(&mut store, "head.out", config.mlp_hidden, NUM_CLASSES, true, &mut rng),
        });

        if config.freeze_encoders {
            for id in store.ids().take(encoder_params) {
                store.set_trainable(id, false);
            }
        }

        Ok(FusionModel {
            config,
            store,
            text_encoder,
            image_encoder,
            attention,
            clip,
            late,
            head,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    /// Vocabulary of a token text encoder.
    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        match &self.text_encoder {
            TextEncoderKind::Tokens(t) => Some(&t.vocab),
            TextEncoderKind::Projector(_) => None,
        }
    }

    pub fn max_tokens(&self) -> usize {
        match &self.text_encoder {
            TextEncoderKind::Tokens(t) => t.max_tokens,
            TextEncoderKind::Projector(_) => DEFAULT_MAX_TOKENS,
        }
    }

    /// The model's attention blocks (co-attention pairs for MCFM).
    pub fn attention_blocks(&self) -> &[MultiHeadAttention] {
        &self.attention
    }

    fn encode(&self, g: &mut Graph, s: &ParamStore, input: &ModelInput) -> Result<(Var, Var)> {
        let t = match (&self.text_encoder, &input.text) {
            (TextEncoderKind::Projector(p), TextInput::Features(f)) => p.forward(g, s, f)?,
            (TextEncoderKind::Tokens(e), TextInput::Tokens(ids)) => e.forward(g, s, ids)?,
            _ => return Err(Error::InvalidArgument("text input kind does not match the model".into())),
        };
        let v = match (&self.image_encoder, &input.image) {
            (ImageEncoderKind::Projector(p), ImageInput::Features(f)) => p.forward(g, s, f)?,
            (ImageEncoderKind::Patches(e), ImageInput::Grid(grid)) => e.forward(g, s, grid)?,
            _ => return Err(Error::InvalidArgument("image input kind does not match the model".into())),
        };
        Ok((t, v))
    }

    /// Full forward from raw input to a `1 x 3` score row whose softmax is
    /// the class distribution: logits for most strategies, log-probabilities
    /// for late fusion. `rng == None` is evaluation mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        self.forward_with(&self.store, g, input, rng)
    }

    /// [`FusionModel::forward`] reading parameters from `store`, which must
    /// have the layout of `self.store`.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        input: &ModelInput,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let (t, v) = self.encode(g, store, input)?;
        self.fuse_with(store, g, t, v, rng)
    }

    /// Forward from already-encoded `L x d` sequences.
    pub fn fuse<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        text: Var,
        image: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        self.fuse_with(&self.store, g, text, image, rng)
    }

    fn fuse_with<R: Rng + ?Sized>(
        &self,
        s: &ParamStore,
        g: &mut Graph,
        text: Var,
        image: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let d = self.config.dim;
        for (name, v) in [("text", text), ("image", image)] {
            if g.value(v).cols() != d {
                return Err(Error::Shape(format!(
                    "{name} sequence has dim {}, model dim is {d}",
                    g.value(v).cols()
                )));
            }
        }
        let fused = match self.config.strategy {
            Strategy::Late => return Ok(self.late_scores(g, s, text, image)),
            Strategy::TextOnly => g.mean_rows(text),
            Strategy::ImageOnly => g.mean_rows(image),
            Strategy::Early => {
                let st = g.mean_rows(text);
                let sv = g.mean_rows(image);
                g.concat_cols(&[st, sv])
            }
            Strategy::ClipStyle => {
                let (u, w) = self.clip_project(g, s, text, image);
                let uw = g.mul(u, w);
                g.concat_cols(&[u, w, uw])
            }
            Strategy::CrossT2I | Strategy::CrossI2T => {
                let (query, other) = if self.config.strategy == Strategy::CrossT2I {
                    (text, image)
                } else {
                    (image, text)
                };
                let mut a = query;
                for block in &self.attention {
                    a = block.forward(g, s, a, other)?.output;
                }
                let pooled = g.mean_rows(a);
                let so = g.mean_rows(other);
                g.concat_cols(&[pooled, so])
            }
            Strategy::Mcfm => {
                let (mut t, mut v) = (text, image);
                for pair in self.attention.chunks(2) {
                    let t_next = pair[0].forward(g, s, t, v)?.output;
                    let v_next = pair[1].forward(g, s, v, t)?.output;
                    (t, v) = (t_next, v_next);
                }
                let ct = g.mean_rows(t);
                let cv = g.mean_rows(v);
                let st = g.mean_rows(text);
                let sv = g.mean_rows(image);
                g.concat_cols(&[ct, cv, st, sv])
            }
        };
        let head = self.head.as_ref().expect("classifier head");
        let h = head.fc1.forward(g, s, fused);
        let h = g.gelu(h);
        let h = head.fc2.forward(g, s, h);
        let h = g.gelu(h);
        let h = g.dropout(h, self.config.dropout, rng);
        Ok(head.out.forward(g, s, h))
    }

    fn clip_project(&self, g: &mut Graph, s: &ParamStore, text: Var, image: Var) -> (Var, Var) {
        let (pt, pv) = self.clip.as_ref().expect("clip projections");
        let st = g.mean_rows(text);
        let sv = g.mean_rows(image);
        let u = pt.forward(g, s, st);
        let w = pv.forward(g, s, sv);
        (g.l2_normalize(u), g.l2_normalize(w))
    }

    /// The normalised joint-space embeddings `(u, v)` of a CLIP-style model.
    pub fn clip_embeddings(&self, text: &FeatureSequence, image: &FeatureSequence) -> Result<(Tensor, Tensor)> {
        require(self, &[Strategy::ClipStyle])?;
        let mut g = Graph::new();
        let t = g.constant(text.values().clone());
        let v = g.constant(image.values().clone());
        let (u, w) = self.clip_project(&mut g, &self.store, t, v);
        Ok((g.value(u).clone(), g.value(w).clone()))
    }

    fn late_scores(&self, g: &mut Graph, s: &ParamStore, text: Var, image: Var) -> Var {
        let (ct, cv) = self.late.as_ref().expect("late classifiers");
        let st = g.mean_rows(text);
        let sv = g.mean_rows(image);
        let zt = ct.forward(g, s, st);
        let zv = cv.forward(g, s, sv);
        match self.config.late_combine {
            LateCombine::MeanLogit => {
                let z = g.add(zt, zv);
                g.scale(z, 0.5)
            }
            LateCombine::MeanProb => {
                let pt = g.softmax(zt);
                let pv = g.softmax(zv);
                let p = g.add(pt, pv);
                let p = g.scale(p, 0.5);
                g.log(p)
            }
            LateCombine::MaxProb => {
                let pt = g.softmax(zt);
                let pv = g.softmax(zv);
                let p = g.maximum(pt, pv);
                g.log(p)
            }
        }
    }

    /// Class probabilities for one sample in evaluation mode.
    pub fn predict_proba(&self, input: &ModelInput) -> Result<[f64; NUM_CLASSES]> {
        let mut g = Graph::new();
        let scores = self.forward::<ChaCha8Rng>(&mut g, input, None)?;
        probabilities(g.value(scores))
    }

    /// Evaluation-mode forward on encoded sequences. Late fusion returns
    /// probabilities, every other strategy logits.
    pub fn fusion_forward(&self, text: &FeatureSequence, image: &FeatureSequence) -> Result<FusionOutput> {
        let mut g = Graph::new();
        let t = g.constant(text.values().clone());
        let v = g.constant(image.values().clone());
        let out = self.fuse::<ChaCha8Rng>(&mut g, t, v, None)?;
        let out = g.value(out).clone();
        Ok(if self.config.strategy == Strategy::Late {
            FusionOutput::Probabilities(tensor::softmax(&out, out.rank() - 1)?)
        } else {
            FusionOutput::Logits(out)
        })
    }
}

fn probabilities(scores: &Tensor) -> Result<[f64; NUM_CLASSES]> {
    let p = tensor::softmax(&Tensor::vector(scores.data().to_vec()), 0)?;
    Ok([p.data()[0], p.data()[1], p.data()[2]])
}

fn require(model: &FusionModel, allowed: &[Strategy]) -> Result<()> {
    if allowed.contains(&model.strategy()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "model strategy {} is not one of {allowed:?}",
            model.strategy()
        )))
    }
}

/// Co-attention fusion logits for encoded sequences.
pub fn mcfm_forward(text: &FeatureSequence, image: &FeatureSequence, m: &FusionModel) -> Result<Tensor> {
    require(m, &[Strategy::Mcfm])?;
    match m.fusion_forward(text, image)? {
        FusionOutput::Logits(t) | FusionOutput::Probabilities(t) => Ok(t),
    }
}

/// Unidirectional cross-attention logits; the direction is the model's.
pub fn cross_attention_forward(text: &FeatureSequence, image: &FeatureSequence, m: &FusionModel) -> Result<Tensor> {
    require(m, &[Strategy::CrossT2I, Strategy::CrossI2T])?;
    match m.fusion_forward(text, image)? {
        FusionOutput::Logits(t) | FusionOutput::Probabilities(t) => Ok(t),
    }
}

/// Early, late or CLIP-style fusion.
pub fn simple_fusion_forward(text: &FeatureSequence, image: &FeatureSequence, m: &FusionModel) -> Result<FusionOutput> {
    require(m, &[Strategy::Early, Strategy::Late, Strategy::ClipStyle])?;
    m.fusion_forward(text, image)
}
