//! CoT document strategies and tag mutations shared by the test targets.

use fdr_core::cot::{all_tags, CoTDocument, Conclusion, Label, Reasoning, ReasoningStep};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,8}[.,;!?']?"
}

fn sentence(max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max_words).prop_map(|w| w.join(" "))
}

fn step() -> impl Strategy<Value = ReasoningStep> {
    // Descriptions may contain ':' after the attribute separator.
    (sentence(3), sentence(8), any::<bool>()).prop_map(|(attribute, text, colon)| ReasoningStep {
        attribute,
        text: if colon { format!("{text}: {text}") } else { text },
    })
}

pub fn document() -> impl Strategy<Value = CoTDocument> {
    (
        sentence(10),
        sentence(12),
        prop::collection::vec(step(), 0..4),
        prop::collection::vec(step(), 0..4),
        any::<bool>(),
        prop::option::of(sentence(4)),
    )
        .prop_filter("at least one step", |(_, _, low, high, _, _)| {
            !low.is_empty() || !high.is_empty()
        })
        .prop_map(|(summary, caption, low_level, high_level, fake, tail)| {
            let verdict = if fake { Label::Fake } else { Label::Real };
            let mut conclusion = Conclusion::for_label(verdict);
            if let Some(t) = tail {
                conclusion.text = format!("{} {t}", conclusion.text);
            }
            CoTDocument {
                summary,
                caption,
                reasoning: Reasoning { low_level, high_level },
                conclusion,
            }
        })
}

pub fn mutations(text: &str) -> Vec<(String, String)> {
    let tags = all_tags();
    let pos: Vec<usize> = tags.iter().map(|(t, _)| text.find(t).unwrap()).collect();
    let mut out = Vec::new();
    for (i, (tag, _)) in tags.iter().enumerate() {
        let (p, n) = (pos[i], tag.len());
        out.push((format!("drop {tag}"), format!("{}{}", &text[..p], &text[p + n..])));
        out.push((
            format!("duplicate {tag}"),
            format!("{}{tag} {}", &text[..p + n], &text[p + n..]),
        ));
        // Exchange with the neighbouring tag (the previous one for the last tag).
        let j = if i + 1 < tags.len() { i + 1 } else { i - 1 };
        let (a, b) = (i.min(j), i.max(j));
        let (ta, tb) = (tags[a].0, tags[b].0);
        let swapped = format!(
            "{}{tb}{}{ta}{}",
            &text[..pos[a]],
            &text[pos[a] + ta.len()..pos[b]],
            &text[pos[b] + tb.len()..]
        );
        out.push((format!("swap {tag}"), swapped));
    }
    out
}
