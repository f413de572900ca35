//! Dual-branch visual encoder.
//!
//! Two small ViT-style encoders stand in for the semantic (CLIP-like) and
//! self-supervised (DINO-like) branches. Both are randomly initialised from
//! branch-specific seeds and then frozen; only the per-branch adapters that
//! map raw tokens into the text embedding space are trainable. The
//! self-supervised branch also exposes its attention maps, which the fusion
//! block turns into an attention bias.
//!
//! There is no class token: token `i` is patch `i` in row-major order, so
//! attention-map rows line up one-to-one with the adapted tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{impl_parameters, normal_tensor, Block, LayerNorm, Linear, Mlp};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image side {got} does not match configured side {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("image pixel count {got} does not match side {side}")]
    PixelCount { side: usize, got: usize },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f32),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Single-channel square image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub side: usize,
    pub values: Vec<f32>,
}

impl SyntheticImage {
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self> {
        let img = Self { side, values };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.side * self.side {
            return Err(EncoderError::PixelCount {
                side: self.side,
                got: self.values.len(),
            });
        }
        if let Some(&v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EncoderError::PixelRange(v));
        }
        Ok(())
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.side + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// CLIP stand-in.
    Semantic,
    /// DINO stand-in.
    Selfsup,
}

impl Branch {
    fn seed_stream(self) -> u64 {
        match self {
            Branch::Semantic => 0xC11F,
            Branch::Selfsup => 0xD140,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub token_dim: usize,
    /// Text embedding width `d` that adapters project into.
    pub text_dim: usize,
    /// Gain on the frozen query/key projections; larger values give
    /// sharper, less uniform attention maps.
    pub qk_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_size: 4,
            layers: 2,
            heads: 4,
            token_dim: 32,
            text_dim: 32,
            qk_gain: 2.0,
        }
    }
}

impl EncoderConfig {
    pub fn num_tokens(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return bad("image side must be divisible by patch size");
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return bad("token_dim must be divisible by heads");
        }
        if !self.text_dim.is_multiple_of(self.heads) {
            return bad("text_dim must be divisible by heads");
        }
        if self.layers == 0 {
            return bad("encoder needs at least one layer");
        }
        Ok(())
    }
}

/// Raw (pre-adapter) encoder output.
#[derive(Debug, Clone)]
pub struct VisualTokens<T: Scalar> {
    /// `[n, L, token_dim]`
    pub tokens: Tensor<T>,
    /// `[n, H, L, L]`, self-supervised branch only.
    pub attention_maps: Option<Tensor<T>>,
}

/// Frozen patch-embedding transformer.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub patch_embed: Linear<T>,
    pub position: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    branch: Branch,
    config: EncoderConfig,
}
impl_parameters!(Encoder {
    patch_embed,
    position,
    blocks,
    norm
});

impl<T: Scalar> Encoder<T> {
    pub fn new(branch: Branch, config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed).fork(branch.seed_stream());
        let p2 = config.patch_size * config.patch_size;
        let patch_embed = Linear::new(p2, config.token_dim, 2.0, false, &mut rng);
        let position = normal_tensor(vec![config.num_tokens(), config.token_dim], 0.5, false, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block::new(config.token_dim, config.heads, config.qk_gain, false, &mut rng))
            .collect();
        Ok(Self {
            patch_embed,
            position,
            blocks,
            norm: LayerNorm::new(config.token_dim, false),
            branch,
            config: config.clone(),
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// `[n, L, patch_size^2]`, patches row-major, pixels row-major within.
    fn patchify(&self, images: &[SyntheticImage]) -> Result<Tensor<T>> {
        let (s, p) = (self.config.image_side, self.config.patch_size);
        let per_side = s / p;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.side != s {
                return Err(EncoderError::ImageSize {
                    expected: s,
                    got: img.side,
                });
            }
            img.validate()?;
            for pr in 0..per_side {
                for pc in 0..per_side {
                    for r in 0..p {
                        for c in 0..p {
                            data.push(T::of(img.at(pr * p + r, pc * p + c) as f64));
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![images.len(), per_side * per_side, p * p], data)?)
    }

    /// Encodes a batch. Attention maps come from `attention_layer`
    /// (0-based; defaults to the last layer) and are returned for the
    /// self-supervised branch only.
    pub fn encode(&self, images: &[SyntheticImage], attention_layer: Option<usize>) -> Result<VisualTokens<T>> {
        let layer = attention_layer.unwrap_or(self.blocks.len() - 1);
        if layer >= self.blocks.len() {
            return Err(EncoderError::Config(format!(
                "attention layer {layer} out of range for {} layers",
                self.blocks.len()
            )));
        }
        let mut x = self.patch_embed.forward(&self.patchify(images)?)?.add(&self.position)?;
        let mut maps = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, probs) = block.forward(&x, None)?;
            x = y;
            if i == layer {
                maps = Some(probs);
            }
        }
        let tokens = self.norm.forward(&x)?;
        Ok(VisualTokens {
            tokens,
            attention_maps: match self.branch {
                Branch::Selfsup => maps,
                Branch::Semantic => None,
            },
        })
    }
}

/// Branch-specific MLP mapping raw tokens into the text embedding space.
#[derive(Debug, Clone)]
pub struct Adapter<T: Scalar> {
    pub mlp: Mlp<T>,
    branch: Branch,
}
impl_parameters!(Adapter { mlp });

impl<T: Scalar> Adapter<T> {
    pub fn new(branch: Branch, config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed).fork(0xADA0 + branch.seed_stream());
        Self {
            mlp: Mlp::new(config.token_dim, config.text_dim, config.text_dim, true, &mut rng),
            branch,
        }
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Zeroes the output layer, making the adapter output identically zero.
    pub fn zero_output_layer(&mut self) {
        let (i, o) = (self.mlp.fc2.input_dim(), self.mlp.fc2.output_dim());
        self.mlp.fc2 = Linear::zeros(i, o, true);
    }

    /// `[n, L, token_dim] -> [n, L, d]`
    pub fn adapt(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = self.mlp.fc1.input_dim();
        if raw.shape().last() != Some(&expected) {
            return Err(EncoderError::Config(format!(
                "{:?} adapter expects token dim {expected}, got shape {:?}",
                self.branch,
                raw.shape()
            )));
        }
        Ok(self.mlp.forward(raw)?)
    }
}

/// The adapter pair `A_C`, `A_D` with disjoint parameters.
#[derive(Debug, Clone)]
pub struct Adapters<T: Scalar> {
    pub semantic: Adapter<T>,
    pub selfsup: Adapter<T>,
}
impl_parameters!(Adapters { semantic, selfsup });

impl<T: Scalar> Adapters<T> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Self {
        Self {
            semantic: Adapter::new(Branch::Semantic, config, seed),
            selfsup: Adapter::new(Branch::Selfsup, config, seed),
        }
    }

    pub fn adapt(&self, branch: Branch, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let adapter = match branch {
            Branch::Semantic => &self.semantic,
            Branch::Selfsup => &self.selfsup,
        };
        if adapter.branch() != branch {
            return Err(EncoderError::Config(format!(
                "adapter for {:?} registered under {branch:?}",
                adapter.branch()
            )));
        }
        adapter.adapt(raw)
    }
}

/// Both frozen encoders.
#[derive(Debug, Clone)]
pub struct DualEncoder<T: Scalar> {
    pub semantic: Encoder<T>,
    pub selfsup: Encoder<T>,
}
impl_parameters!(DualEncoder { semantic, selfsup });

impl<T: Scalar> DualEncoder<T> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            semantic: Encoder::new(Branch::Semantic, config, seed)?,
            selfsup: Encoder::new(Branch::Selfsup, config, seed)?,
        })
    }

    pub fn encode(
        &self,
        branch: Branch,
        images: &[SyntheticImage],
        attention_layer: Option<usize>,
    ) -> Result<VisualTokens<T>> {
        match branch {
            Branch::Semantic => self.semantic.encode(images, attention_layer),
            Branch::Selfsup => self.selfsup.encode(images, attention_layer),
        }
    }
}
