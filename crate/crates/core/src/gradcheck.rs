//! Module-by-module gradient suite in f64 on a deliberately tiny model.
//!
//! Every trainable tensor is redrawn from a normal distribution first, so
//! zero-initialised layers (the bias MLP output, adapter tails) do not hide
//! gradients behind exact zeros.

use std::time::{Duration, Instant};

use crate::cot::Label;
use crate::cpm::{classification_loss, ClassTokens, DEFAULT_TAU};
use crate::encoders::{Branch, EncoderConfig, SyntheticImage};
use crate::error::Result;
use crate::lm::{lm_loss, SequenceBatch, Vocabulary};
use crate::model::{Architecture, EncodedImage, ForgeryReasoner, FusionMode, ModelConfig};
use crate::nn::{normal_tensor, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{grad_check_with, GradCheckOptions, Tensor};

/// The fixture's shapes are fixed, so the module calls inside the checked
/// closures cannot fail.
const FIXED: &str = "fixture shapes are consistent";

/// Acceptance bound on the max relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn tiny_architecture() -> Architecture {
    Architecture {
        encoder: EncoderConfig {
            image_side: 8,
            patch_size: 4,
            layers: 1,
            heads: 2,
            token_dim: 6,
            text_dim: 8,
            qk_gain: 1.0,
        },
        decoder_layers: 1,
        decoder_heads: 2,
        bias_hidden: 3,
        max_positions: 16,
    }
}

struct Fixture {
    model: ForgeryReasoner<f64>,
    encoded: Vec<EncodedImage<f64>>,
    seq: SequenceBatch,
    rng: SplitMix64,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let mut rng = SplitMix64::new(seed);
    let vocab = Vocabulary::new(["a", "bright", "dark", "disk"]);
    let config = ModelConfig {
        seed,
        architecture: tiny_architecture(),
        fusion: FusionMode::CrossAttentionBias,
        bias_layer: None,
    };
    let mut model = ForgeryReasoner::<f64>::new(config, vocab.clone())?;
    let redrawn: Vec<Tensor<f64>> = model
        .trainable_params()
        .iter()
        .map(|p| normal_tensor(p.shape().to_vec(), 0.5, true, &mut rng))
        .collect();
    model.replace_trainable(&redrawn);
    let images = (0..2)
        .map(|_| SyntheticImage::new(8, (0..64).map(|_| rng.next_f64() as f32).collect()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let encoded = model.encode_images(&images)?;
    let v = vocab.len();
    let rows: Vec<(Vec<usize>, Vec<bool>)> = [6usize, 5]
        .iter()
        .map(|&len| {
            let ids = (0..len).map(|_| rng.below(v)).collect();
            let mask = (0..len).map(|t| t >= 2).collect();
            (ids, mask)
        })
        .collect();
    let seq = SequenceBatch::from_rows(&rows, vocab.pad())?;
    Ok(Fixture {
        model,
        encoded,
        seq,
        rng,
    })
}

fn random(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f64> {
    normal_tensor(shape, 1.0, false, rng)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<f64>) -> Result<GradCheckEntry> {
    let start = Instant::now();
    let max_rel_error = f()?;
    Ok(GradCheckEntry {
        name,
        max_rel_error,
        elapsed: start.elapsed(),
    })
}

/// Runs the five checks: adapters, compute_bias, fuse,
/// forward_teacher_forced + lm_loss, and classification_loss.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let Fixture {
        model,
        encoded,
        seq,
        mut rng,
    } = fixture(seed)?;
    let opts = GradCheckOptions::default();
    // The model-level losses have gradients near 1e-8, where a plain 1e-5
    // step leaves roundoff at the 1e-4 level. Extrapolated central
    // differences tolerate a step large enough to push it below 1e-5.
    let model_opts = GradCheckOptions {
        step: 1e-2,
        richardson: true,
        ..Default::default()
    };
    let arch = tiny_architecture();
    let (l, td, d, h) = (
        arch.encoder.num_tokens(),
        arch.encoder.token_dim,
        arch.encoder.text_dim,
        arch.encoder.heads,
    );
    let n = encoded.len();
    let refs: Vec<&EncodedImage<f64>> = encoded.iter().collect();
    let mut out = Vec::new();

    let raw_c = random(vec![n, l, td], &mut rng).detach_with_grad(true);
    let raw_d = random(vec![n, l, td], &mut rng).detach_with_grad(true);
    let w = random(vec![n, l, d], &mut rng);
    out.push(timed("adapters", || {
        let mut inputs = vec![raw_c.clone(), raw_d.clone()];
        inputs.extend(model.adapters.trainable_params());
        Ok(grad_check_with(
            |xs| {
                let mut a = model.adapters.clone();
                a.replace_trainable(&xs[2..]);
                let c = a.adapt(Branch::Semantic, &xs[0]).expect(FIXED).mul(&w)?;
                let s = a.adapt(Branch::Selfsup, &xs[1]).expect(FIXED).mul(&w)?;
                Ok(c.add(&s)?.sum())
            },
            &inputs,
            opts,
        )?)
    })?);

    let fusion = model.fusion.clone().expect("bias mode has a fusion block");
    let maps = Tensor::new(
        vec![n, h, l, l],
        encoded.iter().flat_map(|e| e.maps.iter().copied()).collect(),
    )?
    .detach_with_grad(true);
    let wb = random(vec![n, h, l, l], &mut rng);
    out.push(timed("compute_bias", || {
        let mut inputs = vec![maps.clone()];
        inputs.extend(fusion.trainable_params());
        Ok(grad_check_with(
            |xs| {
                let mut f = fusion.clone();
                f.replace_trainable(&xs[1..]);
                Ok(f.compute_bias(&xs[0])?.mul(&wb)?.sum())
            },
            &inputs,
            opts,
        )?)
    })?);

    let fc = random(vec![n, l, d], &mut rng).detach_with_grad(true);
    let fd = random(vec![n, l, d], &mut rng).detach_with_grad(true);
    out.push(timed("fuse", || {
        let mut inputs = vec![fc.clone(), fd.clone()];
        inputs.extend(fusion.trainable_params());
        Ok(grad_check_with(
            |xs| {
                let mut f = fusion.clone();
                f.replace_trainable(&xs[2..]);
                Ok(f.fuse(&xs[0], &xs[1], Some(&maps.detach_with_grad(false)))?
                    .mul(&w)?
                    .sum())
            },
            &inputs,
            opts,
        )?)
    })?);

    out.push(timed("forward_teacher_forced+lm_loss", || {
        Ok(grad_check_with(
            |xs| {
                let mut m = model.clone();
                m.replace_trainable(xs);
                Ok(lm_loss(&m.forward(&refs, &seq).expect(FIXED), &seq).expect(FIXED))
            },
            &model.trainable_params(),
            model_opts,
        )?)
    })?);

    let tokens = ClassTokens::from_vocab(model.vocab());
    let ks = [3usize, 4];
    let labels = [Label::Fake, Label::Real];
    out.push(timed("classification_loss", || {
        Ok(grad_check_with(
            |xs| {
                let mut m = model.clone();
                m.replace_trainable(xs);
                Ok(
                    classification_loss(&m.forward(&refs, &seq).expect(FIXED), &ks, &labels, tokens, DEFAULT_TAU)
                        .expect(FIXED),
                )
            },
            &model.trainable_params(),
            model_opts,
        )?)
    })?);

    Ok(out)
}
