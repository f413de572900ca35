//! Word-level vocabulary and a small causal decoder conditioned on visual
//! tokens.
//!
//! The decoder input is `[visual tokens (L) ; text embeddings (N)]`. Logit
//! row `t` of the returned `[n, N, V]` tensor is the prediction for text
//! token `t`, read from the hidden state one position earlier, so it sees
//! the visual prefix and text tokens `< t` only.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cot::all_tags;
use crate::nn::{causal_mask, impl_parameters, normal_tensor, Block, LayerNorm, Linear, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{gelu_fwd, Precision, Scalar, Tensor, TensorError, LAYER_NORM_EPS};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Id of [`EOS`] in every [`Vocabulary`] (reserved tokens come first).
pub const EOS_ID: usize = 2;
/// Sampling temperature for evaluation and inference unless overridden.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const PUNCTUATION: [char; 6] = ['.', ',', ':', '?', ';', '!'];

#[derive(Debug, Error)]
pub enum LmError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;

/// Splits on whitespace, then peels leading and trailing punctuation off
/// each word as separate tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let core_start = word.find(|c: char| !PUNCTUATION.contains(&c)).unwrap_or(word.len());
        let core_end = word
            .rfind(|c: char| !PUNCTUATION.contains(&c))
            .map_or(core_start, |i| i + word[i..].chars().next().map_or(1, char::len_utf8));
        for i in 0..core_start {
            out.push(&word[i..i + 1]);
        }
        if core_end > core_start {
            out.push(&word[core_start..core_end]);
        }
        for i in core_end.max(core_start)..word.len() {
            out.push(&word[i..i + 1]);
        }
    }
    out
}

/// Inverse of [`tokenize`] on canonical text: punctuation attaches to the
/// preceding token, everything else is space-separated.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let is_punct = tok.len() == 1 && tok.chars().all(|c| PUNCTUATION.contains(&c));
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens every vocabulary starts with, in id order.
    pub fn reserved() -> Vec<&'static str> {
        let mut r = vec![PAD, BOS, EOS];
        r.extend(all_tags().iter().map(|(t, _)| *t));
        r.extend(["real", "fake", "This", "image", "is", ".", ",", ":", "?", ";", "!"]);
        r
    }

    /// Reserved tokens followed by `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in Self::reserved().into_iter().chain(words) {
            v.push(w);
        }
        v
    }

    /// Vocabulary covering every token of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new([]);
        for t in texts {
            for tok in tokenize(t) {
                v.push(tok);
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| LmError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(LmError::TokenOutOfRange { id, size: self.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn real(&self) -> usize {
        self.index["real"]
    }

    pub fn fake(&self) -> usize {
        self.index["fake"]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Text of `ids`, dropping pad/bos and stopping at the first eos.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let (pad, bos, eos) = (self.pad(), self.bos(), self.eos());
        let mut toks = Vec::new();
        for &id in ids {
            if id == eos {
                break;
            }
            if id != pad && id != bos {
                toks.push(self.token(id)?);
            }
        }
        Ok(detokenize(&toks))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_map(self.tokens.iter().enumerate().map(|(i, t)| (t, i)))
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = HashMap::<String, usize>::deserialize(d)?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in &map {
            match tokens.get_mut(*id) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                _ => {
                    return Err(D::Error::custom(format!(
                        "ids must be a permutation of 0..{}",
                        map.len()
                    )))
                }
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        for r in Self::reserved() {
            if !map.contains_key(r) {
                return Err(D::Error::custom(format!("missing reserved token {r:?}")));
            }
        }
        Ok(Self { tokens, index: map })
    }
}

/// Padded token ids `[n, N]` with a loss mask over answer positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub token_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl SequenceBatch {
    pub fn new(token_ids: Vec<usize>, loss_mask: Vec<bool>, batch: usize, len: usize) -> Result<Self> {
        if token_ids.len() != batch * len || loss_mask.len() != batch * len {
            return Err(LmError::Batch(format!(
                "expected {batch}x{len} ids and mask, got {} and {}",
                token_ids.len(),
                loss_mask.len()
            )));
        }
        Ok(Self {
            token_ids,
            loss_mask,
            batch,
            len,
        })
    }

    /// Right-pads `(ids, mask)` rows to a common length with `pad`.
    pub fn from_rows(rows: &[(Vec<usize>, Vec<bool>)], pad: usize) -> Result<Self> {
        let len = rows.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(rows.len() * len);
        let mut loss_mask = Vec::with_capacity(rows.len() * len);
        for (ids, mask) in rows {
            if ids.len() != mask.len() {
                return Err(LmError::Batch("ids and mask lengths differ".into()));
            }
            token_ids.extend(ids.iter().copied().chain(std::iter::repeat(pad)).take(len));
            loss_mask.extend(mask.iter().copied().chain(std::iter::repeat(false)).take(len));
        }
        Self::new(token_ids, loss_mask, rows.len(), len)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.len..(i + 1) * self.len]
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Decoder output `Z: [n, N, V]`.
#[derive(Debug, Clone)]
pub struct Logits<T: Scalar> {
    pub z: Tensor<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab(&self) -> usize {
        self.z.shape()[2]
    }

    /// Logit row for sample `i`, position `t`.
    pub fn row(&self, i: usize, t: usize) -> &[T] {
        let (n, v) = (self.len(), self.vocab());
        let start = (i * n + t) * v;
        &self.z.data()[start..start + v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    /// Upper bound on visual plus text positions.
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(LmError::Config("d_model must be divisible by heads".into()));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(LmError::Config(
                "layers, vocab_size and max_positions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    pub token_embed: Tensor<T>,
    pub position: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
    config: DecoderConfig,
}
impl_parameters!(Decoder {
    token_embed,
    position,
    blocks,
    norm,
    head
});

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_len: usize,
    /// 0 is greedy; otherwise sample from `softmax(Z / temperature)`.
    pub temperature: f64,
    pub seed: u64,
    /// Usually the vocabulary's eos id.
    pub stop_token: Option<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_len: 256,
            temperature: 0.0,
            seed: 0,
            stop_token: Some(EOS_ID),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    /// Generated ids after the prompt, including the final eos if emitted.
    pub tokens: Vec<usize>,
    /// `step_logits[j]` produced `tokens[j]`.
    pub step_logits: Vec<Vec<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: DecoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            token_embed: normal_tensor(vec![config.vocab_size, d], 0.5, true, rng),
            position: normal_tensor(vec![config.max_positions, d], 0.1, true, rng),
            blocks: (0..config.layers)
                .map(|_| Block::new(d, config.heads, 1.0, true, rng))
                .collect(),
            norm: LayerNorm::new(d, true),
            head: Linear::new(d, config.vocab_size, 1.0, true, rng),
            config,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(&id) => Err(LmError::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Logits for every text position given the visual prefix `[n, L, d]`.
    pub fn forward_teacher_forced(&self, visual: &Tensor<T>, seq: &SequenceBatch) -> Result<Logits<T>> {
        self.check_ids(&seq.token_ids)?;
        let s = visual.shape();
        if visual.rank() != 3 || s[0] != seq.batch || s[2] != self.config.d_model || s[1] == 0 {
            return Err(LmError::Batch(format!(
                "visual tokens {s:?} incompatible with batch {} and d_model {}",
                seq.batch, self.config.d_model
            )));
        }
        let (l, n) = (s[1], seq.len);
        let total = l + n;
        if total > self.config.max_positions {
            return Err(LmError::Batch(format!(
                "{total} positions exceed the limit of {}",
                self.config.max_positions
            )));
        }
        let text = Tensor::embedding(&self.token_embed, &seq.token_ids, &[seq.batch, n])?;
        let mut x = Tensor::concat(&[visual.clone(), text], 1)?.add(&self.position.narrow(0, 0, total)?)?;
        let mask = causal_mask(total);
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?.0;
        }
        let h = self.norm.forward(&x.narrow(1, l - 1, n)?)?;
        Ok(Logits {
            z: self.head.forward(&h)?,
        })
    }

    /// Greedy or temperature-sampled decoding with a key/value cache.
    /// `visual` is `[L, d]` or `[1, L, d]`.
    pub fn generate(&self, visual: &Tensor<T>, prompt: &[usize], opts: &GenerateOptions) -> Result<Generation<T>> {
        self.check_ids(prompt)?;
        let d = self.config.d_model;
        let l = match visual.shape() {
            [l, dd] | [1, l, dd] if *dd == d && *l > 0 => *l,
            s => {
                return Err(LmError::Batch(format!(
                    "visual tokens {s:?} must be [L, {d}] or [1, L, {d}]"
                )))
            }
        };
        let budget = self.config.max_positions.saturating_sub(l + prompt.len());
        let max_len = opts.max_len.min(budget);
        let mut rng = SplitMix64::new(opts.seed);
        let mut cache = KvCache::new(self.blocks.len());
        let mut hidden = Vec::new();
        for row in visual.data().chunks(d) {
            hidden = self.step(&mut cache, row)?;
        }
        let embed = self.token_embed.data();
        for &id in prompt {
            hidden = self.step(&mut cache, &embed[id * d..(id + 1) * d])?;
        }
        let mut out = Generation {
            tokens: Vec::new(),
            step_logits: Vec::new(),
        };
        for j in 0..max_len {
            let logits = self.project(&hidden);
            let next = pick_token(&logits, opts.temperature, &mut rng);
            out.tokens.push(next);
            out.step_logits.push(logits);
            if Some(next) == opts.stop_token || j + 1 == max_len {
                break;
            }
            hidden = self.step(&mut cache, &embed[next * d..(next + 1) * d])?;
        }
        Ok(out)
    }

    /// Advances the cache by one position and returns the final hidden
    /// state (before the output norm).
    fn step(&self, cache: &mut KvCache<T>, input: &[T]) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let pos = cache.len;
        if pos >= self.config.max_positions {
            return Err(LmError::Batch("position limit reached".into()));
        }
        let p = &self.position.data()[pos * d..(pos + 1) * d];
        let mut x: Vec<T> = input.iter().zip(p).map(|(&a, &b)| a + b).collect();
        for (layer, block) in self.blocks.iter().enumerate() {
            let h = layer_norm_row(&x, &block.ln1);
            let attn = &block.attn;
            let q = linear_row(&h, &attn.query);
            let k = linear_row(&h, &attn.key);
            let v = linear_row(&h, &attn.value);
            cache.keys[layer].extend_from_slice(&k);
            cache.values[layer].extend_from_slice(&v);
            let heads = attn.heads();
            let dh = d / heads;
            let scale = T::of(1.0 / (dh as f64).sqrt());
            let mut mixed = vec![T::zero(); d];
            let mut scores = vec![T::zero(); pos + 1];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &cache.keys[layer][j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut mixed[hd * dh..(hd + 1) * dh];
                for (j, &w) in scores.iter().enumerate() {
                    let vj = &cache.values[layer][j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            let a = linear_row(&mixed, &attn.out);
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += *ai;
            }
            let h2 = layer_norm_row(&x, &block.ln2);
            let mut m = linear_row(&h2, &block.mlp.fc1);
            for v in &mut m {
                *v = T::of(gelu_fwd(v.as_f64()));
            }
            let m = linear_row(&m, &block.mlp.fc2);
            for (xi, mi) in x.iter_mut().zip(&m) {
                *xi += *mi;
            }
        }
        cache.len += 1;
        Ok(x)
    }

    fn project(&self, hidden: &[T]) -> Vec<T> {
        linear_row(&layer_norm_row(hidden, &self.norm), &self.head)
    }
}

struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    fn new(layers: usize) -> Self {
        Self {
            keys: (0..layers).map(|_| Vec::new()).collect(),
            values: (0..layers).map(|_| Vec::new()).collect(),
            len: 0,
        }
    }
}

fn linear_row<T: Scalar>(x: &[T], lin: &Linear<T>) -> Vec<T> {
    let out_dim = lin.output_dim();
    let mut y = match &lin.bias {
        Some(b) => b.data().to_vec(),
        None => vec![T::zero(); out_dim],
    };
    let w = lin.weight.data();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn layer_norm_row<T: Scalar>(x: &[T], ln: &LayerNorm<T>) -> Vec<T> {
    let dn = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / dn;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
    let is = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .zip(ln.gain.data())
        .zip(ln.shift.data())
        .map(|((&v, &g), &s)| g * ((v - mean) * is) + s)
        .collect()
}

fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in xs.iter_mut() {
        *v *= inv;
    }
}

/// Argmax (lowest index on ties) at temperature 0, otherwise one draw from
/// `softmax(logits / temperature)`.
pub fn pick_token<T: Scalar>(logits: &[T], temperature: f64, rng: &mut SplitMix64) -> usize {
    let argmax = logits
        .iter()
        .enumerate()
        .fold(
            (0, T::neg_infinity()),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0;
    if temperature <= 0.0 || !temperature.is_finite() {
        return argmax;
    }
    let m = logits[argmax].as_f64();
    let weights: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - m) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax
}

/// Mean next-token negative log-likelihood over masked positions.
pub fn lm_loss<T: Scalar>(logits: &Logits<T>, seq: &SequenceBatch) -> Result<Tensor<T>> {
    let (n, len, v) = (logits.batch(), logits.len(), logits.vocab());
    if n != seq.batch || len != seq.len {
        return Err(LmError::Batch(format!(
            "logits [{n}, {len}, {v}] vs sequence batch [{}, {}]",
            seq.batch, seq.len
        )));
    }
    let idx: Vec<usize> = seq
        .loss_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(p, _)| p * v + seq.token_ids[p])
        .collect();
    if idx.is_empty() {
        return Err(LmError::EmptyMask);
    }
    if let Some(&bad) = seq.token_ids.iter().find(|&&t| t >= v) {
        return Err(LmError::TokenOutOfRange { id: bad, size: v });
    }
    let logp = logits.z.log_softmax_rows()?.reshape(vec![n * len * v])?;
    Ok(logp.gather_flat(&idx)?.sum().scale(T::of(-1.0 / idx.len() as f64)))
}

const MAGIC: &[u8; 8] = b"FDRCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    precision: Precision,
    config: serde_json::Value,
    vocabulary: Vocabulary,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Named parameter tensors plus the config and vocabulary they belong to.
///
/// File layout: 8-byte magic, little-endian `u64` header length, JSON
/// header, then each tensor's data as little-endian scalars in header
/// order.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: serde_json::Value,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            precision: T::PRECISION,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            w.write_all(&T::to_le_bytes_vec(t.data()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint written at either precision, converting to `T`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LmError::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let width = match header.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; count * width];
            r.read_exact(&mut bytes)
                .map_err(|_| LmError::Checkpoint(format!("truncated data for {}", entry.name)))?;
            let data = bytes
                .chunks(width)
                .map(|b| match header.precision {
                    Precision::F32 => T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
                    Precision::F64 => T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))),
                })
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(LmError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config: header.config,
            vocabulary: header.vocabulary,
            tensors,
        })
    }

    /// Copies stored values into `module` by name, keeping each target's
    /// trainable flag. Every parameter of `module` must be present with a
    /// matching shape.
    pub fn restore_into<M: Parameters<T>>(&self, module: &mut M) -> Result<()> {
        let stored: HashMap<&str, &Tensor<T>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        module.for_each_param_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match stored.get(name) {
                Some(s) if s.shape() == t.shape() => *t = s.detach_with_grad(t.requires_grad()),
                Some(s) => {
                    err = Some(LmError::Checkpoint(format!(
                        "{name}: stored shape {:?} vs model {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(LmError::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}
