mod common;

use common::{document, mutations};
use fdr_core::cot::{
    all_tags, extract_verdict, extract_verdict_bytes, parse, serialize, CoTDocument, Conclusion, CotError, Label,
    Outcome, Reasoning, ReasoningStep,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn serialize_then_parse_is_identity(doc in document()) {
        let text = serialize(&doc).unwrap();
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(serialize(&back).unwrap(), text);
        prop_assert_eq!(extract_verdict(&serialize(&doc).unwrap()), Outcome::from(doc.conclusion.verdict));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_tag_mutation_is_a_format_error(doc in document()) {
        let text = serialize(&doc).unwrap();
        let muts = mutations(&text);
        prop_assert_eq!(muts.len(), 24);
        for (name, m) in muts {
            prop_assert!(matches!(parse(&m), Err(CotError::Format { .. })), "{}: {:?}", name, parse(&m));
            prop_assert_eq!(extract_verdict(&m), Outcome::Fail);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn extract_verdict_is_total_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let outcome = extract_verdict_bytes(&bytes);
        let text = String::from_utf8_lossy(&bytes);
        prop_assert_eq!(outcome, parse(&text).map_or(Outcome::Fail, |d| d.conclusion.verdict.into()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    /// Byte-level damage to a valid document: never panics, and any verdict
    /// it still yields comes from a strict parse.
    #[test]
    fn damaged_documents_never_panic(
        doc in document(),
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6),
    ) {
        let mut bytes = serialize(&doc).unwrap().into_bytes();
        for (at, b) in edits {
            let i = at.index(bytes.len());
            bytes[i] = b;
        }
        let outcome = extract_verdict_bytes(&bytes);
        if outcome != Outcome::Fail {
            prop_assert!(parse(&String::from_utf8_lossy(&bytes)).is_ok());
        }
    }
}

#[test]
fn mutation_set_covers_each_tag_three_ways() {
    let doc = CoTDocument {
        summary: "check both cues.".into(),
        caption: "a dark disk.".into(),
        reasoning: Reasoning {
            low_level: vec![ReasoningStep {
                attribute: "texture".into(),
                text: "smooth.".into(),
            }],
            high_level: vec![],
        },
        conclusion: Conclusion::for_label(Label::Real),
    };
    let muts = mutations(&serialize(&doc).unwrap());
    for (tag, _) in all_tags() {
        for kind in ["drop", "duplicate", "swap"] {
            assert!(muts.iter().any(|(n, _)| n == &format!("{kind} {tag}")));
        }
    }
}
