//! Classification probability mapper.
//!
//! Finds the token right after the answer template in a sequence and reads
//! the decoder's `real`/`fake` logits at that position as a two-way
//! classifier:
//!
//! ```text
//! k      = min{ i + l : O[i .. i + l) == pattern }
//! L_CE   = -log softmax(Z[k, real] / tau, Z[k, fake] / tau)[y]
//! p_fake = sigmoid((Z[k, fake] - Z[k, real]) / tau)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot::{Label, Outcome, ANSWER_TEMPLATE};
use crate::lm::{tokenize, Logits, Vocabulary};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CpmError {
    #[error("classification pattern not found")]
    PatternNotFound,
    #[error("invalid pattern: {0}")]
    Pattern(String),
    #[error("classification index {k} out of range for sequence length {len}")]
    Index { k: usize, len: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CpmError>;

/// Token ids that precede the classification token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationPattern {
    ids: Vec<usize>,
}

impl ClassificationPattern {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.len() < 2 {
            return Err(CpmError::Pattern("pattern needs at least two tokens".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(CpmError::Pattern(format!(
                "id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    /// `<CONCLUSION> This image is`
    pub fn conclusion(vocab: &Vocabulary) -> Self {
        Self::from_text(vocab, &format!("<CONCLUSION> {ANSWER_TEMPLATE}"))
    }

    /// `This image is`, for answers without stage tags.
    pub fn template(vocab: &Vocabulary) -> Self {
        Self::from_text(vocab, ANSWER_TEMPLATE)
    }

    fn from_text(vocab: &Vocabulary, text: &str) -> Self {
        let ids = tokenize(text)
            .into_iter()
            .map(|t| vocab.id(t).expect("template tokens are reserved"))
            .collect();
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Vocabulary ids of the two verdict words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTokens {
    pub real: usize,
    pub fake: usize,
}

impl ClassTokens {
    pub fn from_vocab(vocab: &Vocabulary) -> Self {
        Self {
            real: vocab.real(),
            fake: vocab.fake(),
        }
    }

    pub fn id(&self, label: Label) -> usize {
        match label {
            Label::Real => self.real,
            Label::Fake => self.fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub k: usize,
    pub p_fake: f64,
    /// `Fail` on exactly tied logits.
    pub verdict: Outcome,
}

impl ClassificationOutcome {
    pub fn p_real(&self) -> f64 {
        1.0 - self.p_fake
    }
}

/// Index just past the earliest full match of `pattern` in `seq`.
pub fn find_classification_index(seq: &[usize], pattern: &ClassificationPattern) -> Result<usize> {
    let p = pattern.ids();
    seq.windows(p.len())
        .position(|w| w == p)
        .map(|i| i + p.len())
        .ok_or(CpmError::PatternNotFound)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CpmError::Temperature(tau))
    }
}

/// Mean two-way cross-entropy over the batch; `ks[i]` and `labels[i]`
/// belong to sample `i` of `logits`.
pub fn classification_loss<T: Scalar>(
    logits: &Logits<T>,
    ks: &[usize],
    labels: &[Label],
    tokens: ClassTokens,
    tau: f64,
) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let (n, len, v) = (logits.batch(), logits.len(), logits.vocab());
    if ks.len() != n || labels.len() != n {
        return Err(CpmError::Pattern(format!(
            "{} indices and {} labels for a batch of {n}",
            ks.len(),
            labels.len()
        )));
    }
    let mut idx = Vec::with_capacity(2 * n);
    for (i, &k) in ks.iter().enumerate() {
        if k >= len {
            return Err(CpmError::Index { k, len });
        }
        let base = (i * len + k) * v;
        idx.extend([base + tokens.real, base + tokens.fake]);
    }
    let pair = logits
        .z
        .reshape(vec![n * len * v])?
        .gather_flat(&idx)?
        .reshape(vec![n, 2])?
        .scale(T::of(1.0 / tau));
    let logp = pair.log_softmax_rows()?.reshape(vec![2 * n])?;
    let picked: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| 2 * i + usize::from(*l == Label::Fake))
        .collect();
    Ok(logp.gather_flat(&picked)?.sum().scale(T::of(-1.0 / n as f64)))
}

/// Score read from one logit row (the row at position `k`).
pub fn score_row<T: Scalar>(row: &[T], k: usize, tokens: ClassTokens, tau: f64) -> Result<ClassificationOutcome> {
    check_tau(tau)?;
    let (zr, zf) = (row[tokens.real].as_f64(), row[tokens.fake].as_f64());
    let p_fake = 1.0 / (1.0 + (-(zf - zr) / tau).exp());
    let verdict = match zf.partial_cmp(&zr) {
        Some(std::cmp::Ordering::Greater) => Outcome::Fake,
        Some(std::cmp::Ordering::Less) => Outcome::Real,
        _ => Outcome::Fail,
    };
    Ok(ClassificationOutcome { k, p_fake, verdict })
}

/// `p_fake` for sample `i` at position `k`.
pub fn classification_score<T: Scalar>(
    logits: &Logits<T>,
    i: usize,
    k: usize,
    tokens: ClassTokens,
    tau: f64,
) -> Result<ClassificationOutcome> {
    if k >= logits.len() {
        return Err(CpmError::Index { k, len: logits.len() });
    }
    score_row(logits.row(i, k), k, tokens, tau)
}
