//! Full detector: frozen dual encoder, adapters, fusion and decoder.

use serde::{Deserialize, Serialize};

use crate::encoders::{Adapters, Branch, DualEncoder, EncoderConfig, SyntheticImage};
use crate::error::{Error, Result};
use crate::faff::FusionParams;
use crate::lm::{Decoder, DecoderConfig, GenerateOptions, Generation, Logits, SequenceBatch, Vocabulary};
use crate::nn::{impl_parameters, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{no_grad, Scalar, Tensor};

/// How the two branches reach the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Semantic tokens only.
    ClipOnly,
    /// Both adapted token sets, semantic first, as one prefix of `2L` tokens.
    Interleave,
    /// Fusion block without the attention bias.
    CrossAttention,
    /// Fusion block with the bias derived from self-supervised attention.
    CrossAttentionBias,
}

impl FusionMode {
    pub fn uses_fusion_block(self) -> bool {
        matches!(self, FusionMode::CrossAttention | FusionMode::CrossAttentionBias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Hidden width of the bias MLP over the head channel.
    pub bias_hidden: usize,
    pub max_positions: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_layers: 2,
            decoder_heads: 4,
            bias_hidden: 16,
            max_positions: 320,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub architecture: Architecture,
    pub fusion: FusionMode,
    /// Encoder layer whose attention feeds the bias; `None` is the last.
    pub bias_layer: Option<usize>,
}

/// Frozen encoder outputs for one image, computed once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage<T> {
    /// `[L, token_dim]`
    pub semantic: Vec<T>,
    /// `[L, token_dim]`
    pub selfsup: Vec<T>,
    /// `[H, L, L]`
    pub maps: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForgeryReasoner<T: Scalar> {
    pub encoders: DualEncoder<T>,
    pub adapters: Adapters<T>,
    pub fusion: Option<FusionParams<T>>,
    pub decoder: Decoder<T>,
    config: ModelConfig,
    vocab: Vocabulary,
}
impl_parameters!(ForgeryReasoner {
    encoders,
    adapters,
    fusion,
    decoder
});

const ENCODE_CHUNK: usize = 64;

impl<T: Scalar> ForgeryReasoner<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        let arch = &config.architecture;
        arch.encoder.validate()?;
        if let Some(layer) = config.bias_layer {
            if layer >= arch.encoder.layers {
                return Err(Error::Config(format!(
                    "bias layer {layer} out of range for {} encoder layers",
                    arch.encoder.layers
                )));
            }
        }
        let mut rng = SplitMix64::new(config.seed).fork(0xF00D);
        let d = arch.encoder.text_dim;
        let fusion = config.fusion.uses_fusion_block().then(|| {
            let hidden = (config.fusion == FusionMode::CrossAttentionBias).then_some(arch.bias_hidden);
            FusionParams::new(d, arch.encoder.heads, hidden, &mut rng)
        });
        let decoder = Decoder::new(
            DecoderConfig {
                d_model: d,
                heads: arch.decoder_heads,
                layers: arch.decoder_layers,
                vocab_size: vocab.len(),
                max_positions: arch.max_positions,
            },
            &mut rng,
        )?;
        Ok(Self {
            encoders: DualEncoder::new(&arch.encoder, config.seed)?,
            adapters: Adapters::new(&arch.encoder, config.seed),
            fusion,
            decoder,
            config,
            vocab,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Runs both frozen encoders.
    pub fn encode_images(&self, images: &[SyntheticImage]) -> Result<Vec<EncodedImage<T>>> {
        let enc = &self.config.architecture.encoder;
        let (l, td, h) = (enc.num_tokens(), enc.token_dim, enc.heads);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let (sem, ss) = no_grad(|| -> Result<_> {
                Ok((
                    self.encoders.encode(Branch::Semantic, chunk, None)?,
                    self.encoders.encode(Branch::Selfsup, chunk, self.config.bias_layer)?,
                ))
            })?;
            let maps = ss.attention_maps.expect("self-supervised branch returns maps");
            for i in 0..chunk.len() {
                out.push(EncodedImage {
                    semantic: sem.tokens.data()[i * l * td..(i + 1) * l * td].to_vec(),
                    selfsup: ss.tokens.data()[i * l * td..(i + 1) * l * td].to_vec(),
                    maps: maps.data()[i * h * l * l..(i + 1) * h * l * l].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Decoder prefix `[n, L', d]` for a batch of encoded images.
    pub fn visual_tokens(&self, batch: &[&EncodedImage<T>]) -> Result<Tensor<T>> {
        let enc = &self.config.architecture.encoder;
        let (n, l, td, h) = (batch.len(), enc.num_tokens(), enc.token_dim, enc.heads);
        let stack = |f: &dyn Fn(&EncodedImage<T>) -> &[T], shape: Vec<usize>| -> Result<Tensor<T>> {
            let data = batch.iter().flat_map(|e| f(e).iter().copied()).collect();
            Ok(Tensor::new(shape, data)?)
        };
        let semantic = stack(&|e| &e.semantic, vec![n, l, td])?;
        let fc = self.adapters.adapt(Branch::Semantic, &semantic)?;
        if self.config.fusion == FusionMode::ClipOnly {
            return Ok(fc);
        }
        let selfsup = stack(&|e| &e.selfsup, vec![n, l, td])?;
        let fd = self.adapters.adapt(Branch::Selfsup, &selfsup)?;
        match &self.fusion {
            None => Ok(Tensor::concat(&[fc, fd], 1)?),
            Some(fusion) => {
                let maps = if fusion.has_bias() {
                    Some(stack(&|e| &e.maps, vec![n, h, l, l])?)
                } else {
                    None
                };
                Ok(fusion.fuse(&fc, &fd, maps.as_ref())?)
            }
        }
    }

    pub fn forward(&self, batch: &[&EncodedImage<T>], seq: &SequenceBatch) -> Result<Logits<T>> {
        let visual = self.visual_tokens(batch)?;
        Ok(self.decoder.forward_teacher_forced(&visual, seq)?)
    }

    /// Generation for one encoded image, without recording gradients.
    pub fn generate(&self, image: &EncodedImage<T>, prompt: &[usize], opts: &GenerateOptions) -> Result<Generation<T>> {
        no_grad(|| {
            let visual = self.visual_tokens(&[image])?;
            Ok(self.decoder.generate(&visual, prompt, opts)?)
        })
    }

    /// Parameter count, split into (trainable, frozen).
    pub fn parameter_counts(&self) -> (usize, usize) {
        let (mut t, mut f) = (0, 0);
        self.for_each_param("", &mut |_, p| {
            if p.requires_grad() {
                t += p.numel();
            } else {
                f += p.numel();
            }
        });
        (t, f)
    }
}
