//! Detection and reasoning metrics.
//!
//! Text metrics tokenize on whitespace after lowercasing. BLEU-1 is single
//! reference with brevity penalty and no smoothing; ROUGE-L is the LCS
//! F-measure with equal weight on precision and recall.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot::{Label, Outcome};
use crate::lm::tokenize;
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{verdicts} verdicts for {labels} labels")]
    Length { verdicts: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("consistency analysis needs at least two rounds")]
    Rounds,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `(accuracy %, fail %)`. A fail verdict is never correct.
pub fn detection_accuracy(verdicts: &[Outcome], labels: &[Label]) -> Result<(f64, f64)> {
    if verdicts.len() != labels.len() {
        return Err(EvalError::Length {
            verdicts: verdicts.len(),
            labels: labels.len(),
        });
    }
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = verdicts.len() as f64;
    let correct = verdicts
        .iter()
        .zip(labels)
        .filter(|(v, l)| v.label() == Some(**l))
        .count();
    let fails = verdicts.iter().filter(|v| **v == Outcome::Fail).count();
    Ok((100.0 * correct as f64 / n, 100.0 * fails as f64 / n))
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let rc = counts(&r);
    let clipped: usize = counts(&c)
        .into_iter()
        .map(|(w, n)| n.min(rc.get(w).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / c.len() as f64;
    let bp = (1.0 - r.len() as f64 / c.len() as f64).min(0.0).exp();
    precision * bp
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

/// Text to fixed-width vector, for [`css`].
pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// L2-normalized term-frequency bag over a fixed word list. Words are
/// split with the decoder tokenizer and lowercased; unknown words are
/// dropped.
#[derive(Debug, Clone)]
pub struct BagEmbedder {
    index: HashMap<String, usize>,
}

impl BagEmbedder {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut index = HashMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            let next = index.len();
            index.entry(w).or_insert(next);
        }
        Self { index }
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }
}

impl Embedder for BagEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for t in tokenize(text) {
            if let Some(&i) = self.index.get(&t.to_lowercase()) {
                v[i] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn css(candidate: &str, reference: &str, embedder: &dyn Embedder) -> f64 {
    cosine(&embedder.embed(candidate), &embedder.embed(reference))
}

/// Mean minority share, in percent, over per-sample verdict streams.
pub fn inconsistency(rounds: &[Vec<Outcome>]) -> f64 {
    if rounds.is_empty() {
        return 0.0;
    }
    let total: f64 = rounds
        .iter()
        .map(|vs| {
            if vs.is_empty() {
                return 0.0;
            }
            let mut tally: HashMap<Outcome, usize> = HashMap::new();
            for v in vs {
                *tally.entry(*v).or_insert(0) += 1;
            }
            let majority = tally.values().copied().max().unwrap_or(0);
            1.0 - majority as f64 / vs.len() as f64
        })
        .sum();
    100.0 * total / rounds.len() as f64
}

/// Seed for round `round` of sample `sample`, independent of run order.
pub fn round_seed(seed: u64, sample: usize, round: usize) -> u64 {
    SplitMix64::new(seed).fork(sample as u64).fork(round as u64).next_u64()
}

/// Runs `verdict(sample, temperature, seed)` for `rounds` seeded rounds
/// per sample and returns the inconsistency percentage.
pub fn consistency_analysis<F>(
    mut verdict: F,
    samples: usize,
    rounds: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(usize, f64, u64) -> Outcome,
{
    if rounds < 2 {
        return Err(EvalError::Rounds);
    }
    let streams: Vec<Vec<Outcome>> = (0..samples)
        .map(|i| {
            (0..rounds)
                .map(|r| verdict(i, temperature, round_seed(seed, i, r)))
                .collect()
        })
        .collect();
    Ok(inconsistency(&streams))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub name: String,
    pub samples: usize,
    pub accuracy_percent: f64,
    pub fail_rate_percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Text-verdict accuracy over all samples.
    pub accuracy_percent: f64,
    pub fail_rate_percent: f64,
    pub subsets: Vec<SubsetAccuracy>,
    /// Mean of the subset accuracies.
    pub subset_average_percent: f64,
    /// Accuracy of the score read at the classification token.
    pub cpm_accuracy_percent: f64,
    /// How often text and score verdicts coincide.
    pub agreement_percent: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub css: f64,
}

/// Per-sample evaluation inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub label: Label,
    pub text_verdict: Outcome,
    pub cpm_verdict: Outcome,
    pub p_fake: Option<f64>,
    pub reasoning: String,
    pub reference_reasoning: String,
    pub output: String,
}

pub fn build_report(results: &[SampleResult], embedder: &dyn Embedder) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let labels: Vec<Label> = results.iter().map(|r| r.label).collect();
    let text: Vec<Outcome> = results.iter().map(|r| r.text_verdict).collect();
    let cpm: Vec<Outcome> = results.iter().map(|r| r.cpm_verdict).collect();
    let (accuracy, fail) = detection_accuracy(&text, &labels)?;
    let (cpm_accuracy, _) = detection_accuracy(&cpm, &labels)?;
    let mut subsets = Vec::new();
    for label in [Label::Real, Label::Fake] {
        let (v, l): (Vec<Outcome>, Vec<Label>) = results
            .iter()
            .filter(|r| r.label == label)
            .map(|r| (r.text_verdict, r.label))
            .unzip();
        if let Ok((a, f)) = detection_accuracy(&v, &l) {
            subsets.push(SubsetAccuracy {
                name: label.to_string(),
                samples: v.len(),
                accuracy_percent: a,
                fail_rate_percent: f,
            });
        }
    }
    let n = results.len() as f64;
    let agree = results.iter().filter(|r| r.text_verdict == r.cpm_verdict).count() as f64;
    let mean = |f: &dyn Fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        samples: results.len(),
        accuracy_percent: accuracy,
        fail_rate_percent: fail,
        subset_average_percent: subsets.iter().map(|s| s.accuracy_percent).sum::<f64>() / subsets.len() as f64,
        subsets,
        cpm_accuracy_percent: cpm_accuracy,
        agreement_percent: 100.0 * agree / n,
        bleu1: mean(&|r| bleu1(&r.reasoning, &r.reference_reasoning)),
        rouge_l: mean(&|r| rouge_l(&r.reasoning, &r.reference_reasoning)),
        css: mean(&|r| css(&r.reasoning, &r.reference_reasoning, embedder)),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>10} {:>8}",
            "subset", "samples", "acc (%)", "fail (%)"
        );
        for s in &self.subsets {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>10.2} {:>8.2}",
                s.name, s.samples, s.accuracy_percent, s.fail_rate_percent
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>10.2} {:>8.2}",
            "all", self.samples, self.accuracy_percent, self.fail_rate_percent
        );
        let _ = writeln!(out, "{:<12} {:>8} {:>10.2}", "average", "", self.subset_average_percent);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<22} {:>8.2}", "cpm accuracy (%)", self.cpm_accuracy_percent);
        let _ = writeln!(out, "{:<22} {:>8.2}", "text/cpm agreement (%)", self.agreement_percent);
        let _ = writeln!(out, "{:<22} {:>8.4}", "BLEU-1", self.bleu1);
        let _ = writeln!(out, "{:<22} {:>8.4}", "ROUGE-L", self.rouge_l);
        let _ = writeln!(out, "{:<22} {:>8.4}", "CSS", self.css);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn accuracy_examples() {
        use Outcome::*;
        assert_eq!(
            detection_accuracy(&[Real, Fake], &[Label::Real, Label::Fake]).unwrap(),
            (100.0, 0.0)
        );
        assert_eq!(
            detection_accuracy(&[Real, Real], &[Label::Real, Label::Fake]).unwrap(),
            (50.0, 0.0)
        );
        let mut v = vec![Real; 98];
        v.extend([Fake, Fail]);
        let (a, f) = detection_accuracy(&v, &[Label::Real; 100]).unwrap();
        assert!(close(a, 98.0) && close(f, 1.0));
        assert_eq!(detection_accuracy(&[Fail; 4], &[Label::Fake; 4]).unwrap(), (0.0, 100.0));
        assert!(matches!(
            detection_accuracy(&[Real], &[]),
            Err(EvalError::Length { .. })
        ));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1("the cat sat", "the cat sat"), 1.0);
        assert_eq!(bleu1("dog runs", "the cat sat"), 0.0);
        assert!(close(bleu1("the cat", "the cat sat"), (-0.5f64).exp()));
        assert!(close(bleu1("The Cat", "the cat sat"), 0.6065));
        assert_eq!(bleu1("", "the"), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("x y", "a b c"), 0.0);
        assert!((rouge_l("a b c d", "a c d") - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    #[test]
    fn css_examples() {
        let e = BagEmbedder::new(["a", "b", "c"]);
        assert!((css("a b", "a b", &e) - 1.0).abs() < 1e-12);
        assert_eq!(css("a", "b c", &e), 0.0);
        assert!((css("a a b", "a b", &e) - 3.0 / 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(css("zzz", "a", &e), 0.0);
    }

    #[test]
    fn inconsistency_examples() {
        let mut stream = vec![Outcome::Fake; 99];
        stream.push(Outcome::Real);
        assert!(close(inconsistency(&[stream]), 1.0));
        let greedy = consistency_analysis(
            |i, _, _| if i % 2 == 0 { Outcome::Real } else { Outcome::Fail },
            5,
            10,
            0.0,
            1,
        )
        .unwrap();
        assert_eq!(greedy, 0.0);
        assert_eq!(
            consistency_analysis(|_, _, _| Outcome::Real, 1, 1, 0.0, 0),
            Err(EvalError::Rounds)
        );
    }

    fn brute_bleu(c: &[String], r: &[String]) -> f64 {
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let mut used = vec![false; r.len()];
        let mut hits = 0;
        for w in c {
            if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *w) {
                used[j] = true;
                hits += 1;
            }
        }
        let bp = if c.len() >= r.len() {
            1.0
        } else {
            (1.0 - r.len() as f64 / c.len() as f64).exp()
        };
        hits as f64 / c.len() as f64 * bp
    }

    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] {
                    t[i - 1][j - 1] + 1
                } else {
                    t[i - 1][j].max(t[i][j - 1])
                };
            }
        }
        t[a.len()][b.len()]
    }

    fn brute_rouge(c: &[String], r: &[String]) -> f64 {
        let l = brute_lcs(c, r) as f64;
        if c.is_empty() || r.is_empty() || l == 0.0 {
            return 0.0;
        }
        let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
        2.0 * p * rc / (p + rc)
    }

    fn text() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from),
            0..12,
        )
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(c in text(), r in text()) {
            let (cs, rs) = (c.join(" "), r.join(" "));
            prop_assert_eq!(bleu1(&cs, &rs), brute_bleu(&c, &r));
            prop_assert_eq!(rouge_l(&cs, &rs), brute_rouge(&c, &r));
            let b = bleu1(&cs, &rs);
            let rl = rouge_l(&cs, &rs);
            prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&rl));
        }

        #[test]
        fn metrics_are_total(c in ".*", r in ".*") {
            let e = BagEmbedder::new(["a"]);
            let s = css(&c, &r, &e);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
            let _ = bleu1(&c, &r);
            let _ = rouge_l(&c, &r);
        }
    }
}
