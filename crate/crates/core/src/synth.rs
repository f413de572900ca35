//! Procedural two-cue forgery dataset.
//!
//! Every image is a smooth gradient with a few soft blobs and two motifs,
//! one per half. Motifs come in two families, round (disk, ring) and
//! straight (bar, square); a real image pairs motifs of one family. Fakes
//! carry one or both planted signals:
//!
//! * low level: a pixel checker `(-1)^(r + c)` of amplitude
//!   `0.1 * low_level_strength`, with strength shrinking as difficulty rises;
//! * high level: motifs drawn from different families.
//!
//! Sample `i` draws only from `SplitMix64::new(seed).fork(i)`, so samples are
//! independent of each other and of generation order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot::{
    self, build_annotation, AttributeRegistry, CoTDocument, CotError, InterpretationRecord, Label, Level,
    SUMMARY_TEMPLATE,
};
use crate::encoders::SyntheticImage;
use crate::lm::{tokenize, Vocabulary};
use crate::rng::SplitMix64;

pub const IMAGE_SIDE: usize = 16;
/// Question prepended to every answer.
pub const PROMPT: &str = "Is this image real or fake?";
/// Pixel amplitude of the checker at strength 1.
pub const CHECKER_AMPLITUDE: f64 = 0.1;
/// Share of fakes that carry both signals; the rest of the fakes split
/// into low-only and high-only by `HIGH_ONLY_SHARE`.
pub const BOTH_SHARE: f64 = 0.5;
pub const HIGH_ONLY_SHARE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("difficulty must lie in [0, 1], got {0}")]
    Difficulty(f64),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cot(#[from] CotError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Ring,
    Bar,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Ring, Shape::Bar, Shape::Square];

    pub fn is_round(self) -> bool {
        matches!(self, Shape::Disk | Shape::Ring)
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
            Shape::Square => "square",
        }
    }

    /// Coverage in `[0, 1]` at offset `(dy, dx)` from the motif centre,
    /// with a one-pixel soft edge.
    fn coverage(self, dy: f64, dx: f64) -> f64 {
        let soft = |inside: f64| (inside + 0.5).clamp(0.0, 1.0);
        match self {
            Shape::Disk => soft(2.6 - dy.hypot(dx)),
            Shape::Ring => {
                let r = dy.hypot(dx);
                soft(3.0 - r).min(soft(r - 1.6))
            }
            Shape::Bar => soft(3.5 - dy.abs()).min(soft(1.2 - dx.abs())),
            Shape::Square => soft(2.2 - dy.abs()).min(soft(2.2 - dx.abs())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub shape: Shape,
    pub bright: bool,
    pub row: f64,
    pub col: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactProfile {
    pub low_level_strength: f64,
    pub high_level_anomaly: bool,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: String,
    pub image: SyntheticImage,
    pub label: Label,
    pub profile: ArtifactProfile,
    pub motifs: [Motif; 2],
    pub annotation: CoTDocument,
}

/// One JSON Lines dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: SyntheticImage,
    pub label: Label,
    pub annotation: String,
    pub attributes: Vec<String>,
}

impl SyntheticSample {
    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            id: self.id.clone(),
            image: self.image.clone(),
            label: self.label,
            annotation: cot::serialize(&self.annotation).expect("generated annotations are valid"),
            attributes: self.profile.attributes.clone(),
        }
    }
}

/// Description used for `attribute` in an annotation with `label`.
fn describe(attribute: &str, label: Label) -> &'static str {
    match (attribute, label) {
        ("texture", Label::Fake) => "a fine grid texture covers the surface.",
        ("noise pattern", Label::Fake) => "the noise repeats in a checker pattern.",
        ("semantic consistency", Label::Fake) => "a round shape and a straight shape do not belong together.",
        ("geometry", Label::Fake) => "the two shapes follow different geometry.",
        ("texture", Label::Real) => "surfaces are smooth and natural.",
        ("semantic consistency", Label::Real) => "both shapes belong to one family.",
        _ => unreachable!("no template for {attribute} / {label}"),
    }
}

fn implicated(label: Label, low: bool, high: bool) -> Vec<(&'static str, Level)> {
    let mut out = Vec::new();
    match label {
        Label::Real => {
            out.push(("texture", Level::Low));
            out.push(("semantic consistency", Level::High));
        }
        Label::Fake => {
            if low {
                out.push(("texture", Level::Low));
                out.push(("noise pattern", Level::Low));
            }
            if high {
                out.push(("semantic consistency", Level::High));
                out.push(("geometry", Level::High));
            }
        }
    }
    out
}

pub fn caption(motifs: &[Motif; 2]) -> String {
    let part = |m: &Motif| format!("a {} {}", if m.bright { "bright" } else { "dark" }, m.shape.name());
    format!(
        "{} on the left and {} on the right.",
        part(&motifs[0]),
        part(&motifs[1])
    )
}

/// Every word the generator can emit, plus the prompt.
pub fn vocabulary() -> Vocabulary {
    let mut texts: Vec<String> = vec![PROMPT.into(), SUMMARY_TEMPLATE.into(), "Low-level: High-level:".into()];
    for label in [Label::Real, Label::Fake] {
        texts.push(cot::Conclusion::for_label(label).text);
        for (low, high) in [(true, true), (true, false), (false, true)] {
            for (attr, _) in implicated(label, low, high) {
                texts.push(attr.into());
                texts.push(describe(attr, label).into());
            }
        }
    }
    for shape in Shape::ALL {
        for bright in [true, false] {
            let m = Motif {
                shape,
                bright,
                row: 0.0,
                col: 0.0,
            };
            texts.push(caption(&[m, m]));
        }
    }
    Vocabulary::from_texts(texts.iter().map(String::as_str))
}

fn render(rng: &mut SplitMix64, motifs: &[Motif; 2], checker: f64) -> SyntheticImage {
    let s = IMAGE_SIDE as f64;
    let (gy, gx) = (rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.uniform(0.0, s),
                rng.uniform(0.0, s),
                rng.uniform(2.0, 4.0),
                rng.uniform(-0.12, 0.12),
            )
        })
        .collect();
    let mut values = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let (y, x) = (r as f64, c as f64);
            let mut v = 0.5 + gy * (y - 7.5) / s + gx * (x - 7.5) / s;
            for &(by, bx, sigma, amp) in &blobs {
                let d2 = (y - by).powi(2) + (x - bx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            for m in motifs {
                let sign = if m.bright { 1.0 } else { -1.0 };
                v += sign * 0.22 * m.shape.coverage(y - m.row, x - m.col);
            }
            v += 0.01 * rng.normal();
            if (r + c) % 2 == 0 {
                v += checker;
            } else {
                v -= checker;
            }
            values.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    SyntheticImage {
        side: IMAGE_SIDE,
        values,
    }
}

fn motif(rng: &mut SplitMix64, round: bool, col: f64) -> Motif {
    let shape = match (round, rng.bernoulli(0.5)) {
        (true, true) => Shape::Disk,
        (true, false) => Shape::Ring,
        (false, true) => Shape::Bar,
        (false, false) => Shape::Square,
    };
    Motif {
        shape,
        bright: rng.bernoulli(0.5),
        row: rng.uniform(5.0, 10.0),
        col: col + rng.uniform(-1.0, 1.0),
    }
}

fn sample(seed: u64, index: usize, label: Label, difficulty: f64, registry: &AttributeRegistry) -> SyntheticSample {
    let mut rng = SplitMix64::new(seed).fork(index as u64);
    let (low, high) = match label {
        Label::Real => (false, false),
        Label::Fake => {
            let u = rng.next_f64();
            if u < BOTH_SHARE {
                (true, true)
            } else if u < 1.0 - HIGH_ONLY_SHARE * (1.0 - BOTH_SHARE) {
                (true, false)
            } else {
                (false, true)
            }
        }
    };
    let strength = if low {
        ((1.0 - difficulty) * rng.uniform(0.6, 1.0)).max(1e-3)
    } else {
        0.0
    };
    let left_round = rng.bernoulli(0.5);
    let right_round = if high { !left_round } else { left_round };
    let motifs = [motif(&mut rng, left_round, 4.0), motif(&mut rng, right_round, 11.5)];
    let image = render(&mut rng, &motifs, CHECKER_AMPLITUDE * strength);
    let records: Vec<InterpretationRecord> = implicated(label, low, high)
        .into_iter()
        .map(|(attr, level)| InterpretationRecord {
            attribute: attr.into(),
            level,
            description: describe(attr, label).into(),
            label,
        })
        .collect();
    let annotation = build_annotation(&records, &caption(&motifs), label, registry).expect("templates are valid");
    SyntheticSample {
        id: format!("s{seed}-{index:05}"),
        image,
        label,
        profile: ArtifactProfile {
            low_level_strength: strength,
            high_level_anomaly: high,
            attributes: records.into_iter().map(|r| r.attribute).collect(),
        },
        motifs,
        annotation,
    }
}

/// `n_real + n_fake` samples with labels in a seeded random order.
pub fn generate_dataset(seed: u64, n_real: usize, n_fake: usize, difficulty: f64) -> Result<Vec<SyntheticSample>> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(SynthError::Difficulty(difficulty));
    }
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Real, n_real)
        .chain(std::iter::repeat_n(Label::Fake, n_fake))
        .collect();
    SplitMix64::new(seed).fork(u64::MAX).shuffle(&mut labels);
    let registry = AttributeRegistry::standard();
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| sample(seed, i, label, difficulty, &registry))
        .collect())
}

/// Sum of squared differences between horizontally and vertically adjacent
/// pixels.
pub fn high_frequency_energy(img: &SyntheticImage) -> f64 {
    let s = img.side;
    let mut e = 0.0;
    for r in 0..s {
        for c in 0..s {
            let v = img.at(r, c) as f64;
            if c + 1 < s {
                e += (img.at(r, c + 1) as f64 - v).powi(2);
            }
            if r + 1 < s {
                e += (img.at(r + 1, c) as f64 - v).powi(2);
            }
        }
    }
    e
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| SynthError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records; blank lines are skipped.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SynthError::Json { line: i + 1, source: e })?);
    }
    Ok(out)
}

/// A record with its annotation parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: SyntheticImage,
    pub label: Label,
    pub annotation: CoTDocument,
}

impl Sample {
    /// Fails if the annotation does not parse or disagrees with the label.
    pub fn from_record(r: &DatasetRecord) -> std::result::Result<Self, CotError> {
        let annotation = cot::parse(&r.annotation)?;
        if annotation.conclusion.verdict != r.label {
            return Err(CotError::Contract(format!(
                "annotation concludes {} but the label is {}",
                annotation.conclusion.verdict, r.label
            )));
        }
        Ok(Self {
            id: r.id.clone(),
            image: r.image.clone(),
            label: r.label,
            annotation,
        })
    }
}

impl From<&SyntheticSample> for Sample {
    fn from(s: &SyntheticSample) -> Self {
        Self {
            id: s.id.clone(),
            image: s.image.clone(),
            label: s.label,
            annotation: s.annotation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total: usize,
    pub valid: usize,
    /// `(id, error)` for every record that failed.
    pub failures: Vec<(String, String)>,
    /// Count of failures per error kind (`format:<stage>`, `verdict`, ...).
    pub counts: BTreeMap<String, usize>,
}

pub fn validate_records(records: &[DatasetRecord]) -> ValidationReport {
    let mut report = ValidationReport {
        total: records.len(),
        valid: 0,
        failures: Vec::new(),
        counts: BTreeMap::new(),
    };
    for r in records {
        match Sample::from_record(r) {
            Ok(_) => report.valid += 1,
            Err(e) => {
                let kind = match &e {
                    CotError::Format { stage, .. } => format!("format:{stage}"),
                    CotError::Verdict { .. } => "verdict".to_string(),
                    CotError::Contract(_) => "label_mismatch".to_string(),
                };
                *report.counts.entry(kind).or_default() += 1;
                report.failures.push((r.id.clone(), e.to_string()));
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub per_label: BTreeMap<Label, usize>,
    /// Reasoning-step attribute counts per label.
    pub attributes: BTreeMap<Label, BTreeMap<String, usize>>,
    /// Token length -> sample count.
    pub caption_lengths: BTreeMap<usize, usize>,
    pub reasoning_lengths: BTreeMap<usize, usize>,
    pub reasoning_steps: usize,
}

pub fn dataset_stats(docs: &[(Label, &CoTDocument)]) -> DatasetStats {
    let mut stats = DatasetStats {
        total: docs.len(),
        per_label: BTreeMap::new(),
        attributes: BTreeMap::new(),
        caption_lengths: BTreeMap::new(),
        reasoning_lengths: BTreeMap::new(),
        reasoning_steps: 0,
    };
    for label in [Label::Real, Label::Fake] {
        stats.per_label.insert(label, 0);
        stats.attributes.insert(label, BTreeMap::new());
    }
    for (label, doc) in docs {
        *stats.per_label.entry(*label).or_default() += 1;
        let hist = stats.attributes.entry(*label).or_default();
        for (_, step) in doc.reasoning.steps() {
            *hist.entry(step.attribute.clone()).or_default() += 1;
            stats.reasoning_steps += 1;
        }
        *stats.caption_lengths.entry(tokenize(&doc.caption).len()).or_default() += 1;
        *stats
            .reasoning_lengths
            .entry(tokenize(&cot::reasoning_text(doc)).len())
            .or_default() += 1;
    }
    stats
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples: {}", self.total);
        for (label, n) in &self.per_label {
            let _ = writeln!(out, "  {label:<5} {n}");
        }
        let _ = writeln!(out, "attributes:");
        let _ = writeln!(out, "  {:<22} {:>6} {:>6}", "attribute", "real", "fake");
        for name in AttributeRegistry::standard().names() {
            let get = |l: Label| self.attributes.get(&l).and_then(|h| h.get(name)).copied().unwrap_or(0);
            let _ = writeln!(out, "  {name:<22} {:>6} {:>6}", get(Label::Real), get(Label::Fake));
        }
        for (title, hist) in [
            ("caption", &self.caption_lengths),
            ("reasoning", &self.reasoning_lengths),
        ] {
            let _ = writeln!(out, "{title} length (tokens):");
            for (len, n) in hist {
                let _ = writeln!(out, "  {len:>4} {n}");
            }
        }
        out
    }
}
