//! Joint training, evaluation and ablation drivers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cot::{self, extract_template_verdict, extract_verdict, CoTDocument, Label, Outcome, Stage};
use crate::cpm::{
    classification_loss, classification_score, find_classification_index, score_row, ClassTokens, ClassificationPattern,
};
use crate::error::{Error, Result};
use crate::eval::{build_report, consistency_analysis, BagEmbedder, EvalReport, SampleResult};
use crate::lm::{lm_loss, Checkpoint, GenerateOptions, SequenceBatch, Vocabulary};
use crate::model::{Architecture, EncodedImage, ForgeryReasoner, FusionMode, ModelConfig};
use crate::nn::Parameters;
use crate::rng::SplitMix64;
use crate::synth::{self, Sample};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Joint,
    LmOnly,
    CeOnly,
}

/// What the decoder is trained to write after the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// `This image is <label>.`
    BinaryAnswer,
    /// Interpretation sentences, then the answer, without stage tags.
    InterpretationNoCot,
    /// The full tagged document.
    FullCot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub loss_mode: LossMode,
    pub fusion_mode: FusionMode,
    pub supervision: Supervision,
    /// Encoder layer feeding the attention bias; `None` is the last layer.
    pub bias_layer: Option<usize>,
    /// Rescales the update when the global gradient norm exceeds this.
    pub grad_clip: Option<f64>,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch_size: 8,
            learning_rate: 0.1,
            tau: crate::cpm::DEFAULT_TAU,
            loss_mode: LossMode::Joint,
            fusion_mode: FusionMode::CrossAttentionBias,
            supervision: Supervision::FullCot,
            bias_layer: None,
            grad_clip: Some(1.0),
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self
            .grad_clip
            .is_some_and(|c| c.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
        {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            architecture: self.architecture.clone(),
            fusion: self.fusion_mode,
            bias_layer: self.bias_layer,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Answer text for `doc` under `mode`.
pub fn answer_text(doc: &CoTDocument, mode: Supervision) -> Result<String> {
    Ok(match mode {
        Supervision::FullCot => cot::serialize(doc)?,
        Supervision::InterpretationNoCot => format!("{} {}", cot::interpretation_text(doc), doc.conclusion.text),
        Supervision::BinaryAnswer => doc.conclusion.text.clone(),
    })
}

pub fn pattern_for(vocab: &Vocabulary, mode: Supervision) -> ClassificationPattern {
    match mode {
        Supervision::FullCot => ClassificationPattern::conclusion(vocab),
        _ => ClassificationPattern::template(vocab),
    }
}

/// Verdict read from generated text under `mode`.
pub fn text_verdict(text: &str, mode: Supervision) -> Outcome {
    match mode {
        Supervision::FullCot => extract_verdict(text),
        _ => extract_template_verdict(text),
    }
}

fn strip_markers(s: &str) -> String {
    cot::normalize_ws(&s.replace(cot::LOW_MARKER, " ").replace(cot::HIGH_MARKER, " "))
}

/// Reasoning portion of generated text, comparable with
/// [`cot::interpretation_text`] of the reference.
pub fn reasoning_of(text: &str, mode: Supervision) -> String {
    match mode {
        Supervision::FullCot => cot::lenient_stage_body(text, Stage::Reasoning)
            .map(|b| strip_markers(&b))
            .unwrap_or_default(),
        _ => {
            let end = text.find(cot::ANSWER_TEMPLATE).unwrap_or(text.len());
            strip_markers(&text[..end])
        }
    }
}

pub fn prompt_ids(vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode(synth::PROMPT)?);
    Ok(ids)
}

/// Token ids, loss mask and classification index for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub k: usize,
    pub label: Label,
}

pub fn prepare(sample: &Sample, vocab: &Vocabulary, mode: Supervision) -> Result<PreparedSample> {
    let integrity = |reason: String| Error::DatasetIntegrity {
        id: sample.id.clone(),
        reason,
    };
    let mut ids = prompt_ids(vocab)?;
    let prompt_len = ids.len();
    let answer = answer_text(&sample.annotation, mode).map_err(|e| integrity(e.to_string()))?;
    ids.extend(vocab.encode(&answer).map_err(|e| integrity(e.to_string()))?);
    ids.push(vocab.eos());
    let mask = (0..ids.len()).map(|i| i >= prompt_len).collect();
    let k =
        find_classification_index(&ids, &pattern_for(vocab, mode)).map_err(|e| integrity(format!("{e} in target")))?;
    if k >= ids.len() {
        return Err(integrity("classification pattern ends the target".into()));
    }
    Ok(PreparedSample {
        ids,
        mask,
        k,
        label: sample.label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub ce_loss: f64,
    pub total: f64,
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: ForgeryReasoner<f32>,
    pub trace: Vec<LossRecord>,
}

/// One optimisation step. Returns the recorded losses.
fn train_step(
    model: &mut ForgeryReasoner<f32>,
    config: &TrainConfig,
    batch: &[(&PreparedSample, &EncodedImage<f32>)],
    tokens: ClassTokens,
    pad: usize,
) -> Result<(f64, f64)> {
    let rows: Vec<(Vec<usize>, Vec<bool>)> = batch.iter().map(|(p, _)| (p.ids.clone(), p.mask.clone())).collect();
    let seq = SequenceBatch::from_rows(&rows, pad)?;
    let images: Vec<&EncodedImage<f32>> = batch.iter().map(|(_, e)| *e).collect();
    let logits = model.forward(&images, &seq)?;
    let lm = lm_loss(&logits, &seq)?;
    let ks: Vec<usize> = batch.iter().map(|(p, _)| p.k).collect();
    let labels: Vec<Label> = batch.iter().map(|(p, _)| p.label).collect();
    let ce = classification_loss(&logits, &ks, &labels, tokens, config.tau)?;
    let objective = match config.loss_mode {
        LossMode::Joint => lm.add(&ce)?,
        LossMode::LmOnly => lm.clone(),
        LossMode::CeOnly => ce.clone(),
    };
    objective.backward()?;
    sgd_update(model, config.learning_rate, config.grad_clip)?;
    Ok((lm.item() as f64, ce.item() as f64))
}

fn sgd_update(model: &mut ForgeryReasoner<f32>, lr: f64, clip: Option<f64>) -> Result<()> {
    let params = model.trainable_params();
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Config("non-finite gradient".into()));
    }
    let factor = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let step = (lr * factor) as f32;
    let updated = params
        .iter()
        .zip(&grads)
        .map(|(p, g)| {
            let data = p.data().iter().zip(g).map(|(&w, &gw)| w - step * gw).collect();
            Tensor::param(p.shape().to_vec(), data)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    model.replace_trainable(&updated);
    Ok(())
}

/// Trains a fresh model on `data` and returns it with the per-step loss
/// trace. Deterministic for a fixed config.
pub fn train(config: &TrainConfig, data: &[Sample]) -> Result<TrainOutcome> {
    train_with_progress(config, data, |_, _| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    data: &[Sample],
    mut progress: impl FnMut(&LossRecord, &ForgeryReasoner<f32>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let vocab = synth::vocabulary();
    let mut model = ForgeryReasoner::<f32>::new(config.model_config(), vocab.clone())?;
    let prepared = data
        .iter()
        .map(|s| prepare(s, &vocab, config.supervision))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let encoded = model.encode_images(&images)?;
    let tokens = ClassTokens::from_vocab(&vocab);
    let shuffle_rng = SplitMix64::new(config.seed).fork(0x5EED);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                shuffle_rng.fork(epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            batch.push((&prepared[i], &encoded[i]));
        }
        let (lm, ce) = train_step(&mut model, config, &batch, tokens, vocab.pad())?;
        let total = match config.loss_mode {
            LossMode::Joint => lm + ce,
            LossMode::LmOnly => lm,
            LossMode::CeOnly => ce,
        };
        let record = LossRecord {
            step,
            lm_loss: lm,
            ce_loss: ce,
            total,
        };
        progress(&record, &model);
        trace.push(record);
    }
    Ok(TrainOutcome { model, trace })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub temperature: f64,
    pub seed: u64,
    pub max_len: usize,
    pub tau: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            temperature: crate::lm::DEFAULT_TEMPERATURE,
            seed: 0,
            max_len: 256,
            tau: crate::cpm::DEFAULT_TAU,
        }
    }
}

/// Generation plus both verdicts for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub text: String,
    pub text_verdict: Outcome,
    pub cpm_verdict: Outcome,
    pub p_fake: Option<f64>,
    pub k: Option<usize>,
}

pub fn infer(
    model: &ForgeryReasoner<f32>,
    image: &EncodedImage<f32>,
    mode: Supervision,
    opts: &EvalOptions,
    seed: u64,
) -> Result<Inference> {
    let vocab = model.vocab();
    let gen = model.generate(
        image,
        &prompt_ids(vocab)?,
        &GenerateOptions {
            max_len: opts.max_len,
            temperature: opts.temperature,
            seed,
            stop_token: Some(vocab.eos()),
        },
    )?;
    let text = vocab.decode(&gen.tokens)?;
    let k = find_classification_index(&gen.tokens, &pattern_for(vocab, mode))
        .ok()
        .filter(|&k| k < gen.tokens.len());
    let score = match k {
        Some(k) => Some(score_row(
            &gen.step_logits[k],
            k,
            ClassTokens::from_vocab(vocab),
            opts.tau,
        )?),
        None => None,
    };
    Ok(Inference {
        text_verdict: text_verdict(&text, mode),
        cpm_verdict: score.map_or(Outcome::Fail, |s| s.verdict),
        p_fake: score.map(|s| s.p_fake),
        k,
        text,
    })
}

pub fn embedder(vocab: &Vocabulary) -> BagEmbedder {
    BagEmbedder::new(vocab.tokens())
}

/// Generates for every sample and scores the outputs. Sample `i` uses
/// sampling seed `round_seed(opts.seed, i, 0)`.
pub fn evaluate_model(
    model: &ForgeryReasoner<f32>,
    data: &[Sample],
    mode: Supervision,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<SampleResult>)> {
    check_vocabulary(model, data, mode)?;
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let encoded = model.encode_images(&images)?;
    let mut results = Vec::with_capacity(data.len());
    for (i, (sample, enc)) in data.iter().zip(&encoded).enumerate() {
        let inf = infer(model, enc, mode, opts, crate::eval::round_seed(opts.seed, i, 0))?;
        results.push(SampleResult {
            id: sample.id.clone(),
            label: sample.label,
            text_verdict: inf.text_verdict,
            cpm_verdict: inf.cpm_verdict,
            p_fake: inf.p_fake,
            reasoning: reasoning_of(&inf.text, mode),
            reference_reasoning: cot::interpretation_text(&sample.annotation),
            output: inf.text,
        });
    }
    let report = build_report(&results, &embedder(model.vocab()))?;
    Ok((report, results))
}

/// Percent of samples whose mapper verdict, read at the target-located `k`
/// under teacher forcing, matches the label. Involves no generation, so it
/// is defined even for a model that cannot yet write the format.
pub fn teacher_forced_accuracy(
    model: &ForgeryReasoner<f32>,
    data: &[Sample],
    mode: Supervision,
    tau: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let vocab = model.vocab();
    let tokens = ClassTokens::from_vocab(vocab);
    let mut correct = 0usize;
    for chunk in data.chunks(16) {
        let prepared = chunk
            .iter()
            .map(|s| prepare(s, vocab, mode))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let encoded = model.encode_images(&images)?;
        let rows: Vec<_> = prepared.iter().map(|p| (p.ids.clone(), p.mask.clone())).collect();
        let seq = SequenceBatch::from_rows(&rows, vocab.pad())?;
        let refs: Vec<_> = encoded.iter().collect();
        let logits = no_grad(|| model.forward(&refs, &seq))?;
        for (i, p) in prepared.iter().enumerate() {
            let outcome = classification_score(&logits, i, p.k, tokens, tau)?;
            correct += usize::from(outcome.verdict == Outcome::from(p.label));
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Inconsistency (%) of text verdicts over `rounds` sampled generations.
pub fn consistency(
    model: &ForgeryReasoner<f32>,
    data: &[Sample],
    mode: Supervision,
    rounds: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let encoded = model.encode_images(&images)?;
    let opts = EvalOptions {
        temperature,
        ..Default::default()
    };
    let mut failure = None;
    let pct = consistency_analysis(
        |i, _, round_seed| match infer(model, &encoded[i], mode, &opts, round_seed) {
            Ok(inf) => inf.text_verdict,
            Err(e) => {
                failure.get_or_insert(e);
                Outcome::Fail
            }
        },
        data.len(),
        rounds,
        temperature,
        seed,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(pct?)
}

/// Writes the model and its training config into one checkpoint file.
pub fn save_model(path: impl AsRef<Path>, model: &ForgeryReasoner<f32>, config: &TrainConfig) -> Result<()> {
    Checkpoint {
        config: serde_json::to_value(config)?,
        vocabulary: model.vocab().clone(),
        tensors: model.named_params(),
    }
    .save(path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(TrainConfig, ForgeryReasoner<f32>)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let config: TrainConfig = serde_json::from_value(ck.config.clone())?;
    config.validate()?;
    let mut model = ForgeryReasoner::new(config.model_config(), ck.vocabulary.clone())?;
    ck.restore_into(&mut model)?;
    Ok((config, model))
}

/// Checks that `data` only uses words the model knows.
pub fn check_vocabulary(model: &ForgeryReasoner<f32>, data: &[Sample], mode: Supervision) -> Result<()> {
    for s in data {
        let answer = answer_text(&s.annotation, mode)?;
        model
            .vocab()
            .encode(&answer)
            .map_err(|e| Error::Config(format!("sample {}: {e}", s.id)))?;
    }
    Ok(())
}

/// A named override of the base training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub loss_mode: LossMode,
    pub fusion_mode: FusionMode,
    pub supervision: Supervision,
}

impl Variant {
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            loss_mode: self.loss_mode,
            fusion_mode: self.fusion_mode,
            supervision: self.supervision,
            ..base.clone()
        }
    }

    /// Full model plus one-change ablations of the loss, fusion and
    /// supervision.
    pub fn standard_grid() -> Vec<Variant> {
        let full = Variant {
            name: "full".into(),
            loss_mode: LossMode::Joint,
            fusion_mode: FusionMode::CrossAttentionBias,
            supervision: Supervision::FullCot,
        };
        let with = |name: &str, f: &dyn Fn(&mut Variant)| {
            let mut v = full.clone();
            v.name = name.into();
            f(&mut v);
            v
        };
        vec![
            full.clone(),
            with("lm_only", &|v| v.loss_mode = LossMode::LmOnly),
            with("cross_attention", &|v| v.fusion_mode = FusionMode::CrossAttention),
            with("interleave", &|v| v.fusion_mode = FusionMode::Interleave),
            with("clip_only", &|v| v.fusion_mode = FusionMode::ClipOnly),
            with("binary_answer", &|v| v.supervision = Supervision::BinaryAnswer),
            with("interpretation_no_cot", &|v| {
                v.supervision = Supervision::InterpretationNoCot
            }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_accuracy_percent: f64,
    pub mean_cpm_accuracy_percent: f64,
    pub mean_fail_rate_percent: f64,
    pub mean_bleu1: f64,
    pub mean_rouge_l: f64,
}

/// Trains and evaluates every variant on every seed, with the same data
/// for all of them.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_data: &[Sample],
    test_data: &[Sample],
    opts: &EvalOptions,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let cfg = v.apply(base, seed);
            let outcome = train(&cfg, train_data)?;
            let (report, _) = evaluate_model(&outcome.model, test_data, cfg.supervision, opts)?;
            let run = AblationRun {
                variant: v.name.clone(),
                seed,
                report,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

pub fn summarize(runs: &[AblationRun]) -> Vec<AblationSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&EvalReport> = runs.iter().filter(|r| r.variant == name).map(|r| &r.report).collect();
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationSummary {
                variant: name.to_string(),
                runs: rs.len(),
                mean_accuracy_percent: mean(&|r| r.accuracy_percent),
                mean_cpm_accuracy_percent: mean(&|r| r.cpm_accuracy_percent),
                mean_fail_rate_percent: mean(&|r| r.fail_rate_percent),
                mean_bleu1: mean(&|r| r.bleu1),
                mean_rouge_l: mean(&|r| r.rouge_l),
            }
        })
        .collect()
}

pub fn render_summary(rows: &[AblationSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>4} {:>9} {:>9} {:>8} {:>8} {:>8}",
        "variant", "runs", "acc (%)", "cpm (%)", "fail (%)", "BLEU-1", "ROUGE-L"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>4} {:>9.2} {:>9.2} {:>8.2} {:>8.4} {:>8.4}",
            r.variant,
            r.runs,
            r.mean_accuracy_percent,
            r.mean_cpm_accuracy_percent,
            r.mean_fail_rate_percent,
            r.mean_bleu1,
            r.mean_rouge_l
        );
    }
    out
}
