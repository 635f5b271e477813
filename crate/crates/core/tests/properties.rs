use proptest::prelude::*;

use grn_core::corpus::{build_vocab, convert_scheme, encode_tokens, Scheme};
use grn_core::metrics::{extract_spans, span_prf};
use grn_core::model::{decode, init_params, ModelConfig};
use grn_core::synthetic::synthetic_corpus;

fn bio_sequence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0usize..5, 1..12).prop_map(|codes| {
        let tags = ["O", "B-A", "I-A", "B-B", "I-B"];
        let mut out: Vec<String> = Vec::new();
        for c in codes {
            let t = tags[c];
            let ok = match t.strip_prefix("I-") {
                Some(ty) => out.last().is_some_and(|p| p.len() > 2 && &p[2..] == ty),
                None => true,
            };
            out.push(if ok { t.to_string() } else { format!("B-{}", &t[2..]) });
        }
        out
    })
}

proptest! {
    #[test]
    fn scheme_round_trip_preserves_spans(seq in bio_sequence()) {
        let bioes = convert_scheme(&seq, Scheme::Bio, Scheme::Bioes).unwrap();
        prop_assert_eq!(convert_scheme(&bioes, Scheme::Bioes, Scheme::Bio).unwrap(), seq.clone());
        prop_assert_eq!(extract_spans(&bioes).unwrap(), extract_spans(&seq).unwrap());
    }

    #[test]
    fn scorer_is_perfect_on_itself_and_bounded(a in bio_sequence(), b in bio_sequence()) {
        let same = span_prf(&[a.clone()], &[a.clone()]).unwrap();
        let any_span = !extract_spans(&a).unwrap().is_empty();
        prop_assert_eq!(same.f1, if any_span { 100.0 } else { 0.0 });
        let n = a.len().min(b.len());
        let p = span_prf(&[a[..n].to_vec()], &[b[..n].to_vec()]).unwrap();
        prop_assert!((0.0..=100.0).contains(&p.f1));
        prop_assert!(p.f1 <= p.precision.max(p.recall) + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_ignore_padding(seed in 0u64..1000, extra in 1usize..10, k in 1usize..4) {
        let corpus = synthetic_corpus(12, 42);
        let vocab = build_vocab(&corpus, &[], 1);
        let mc = ModelConfig::reduced(vocab.num_words(), vocab.num_chars(), vocab.labels().to_vec());
        let params = init_params::<f32>(&mc, seed).unwrap();
        let sentences: Vec<Vec<String>> = synthetic_corpus(k, seed).into_iter().map(|s| s.tokens).collect();
        let t_max = sentences.iter().map(Vec::len).max().unwrap();
        let together = decode(&mc, &params, &encode_tokens(&sentences, &vocab, t_max + extra).unwrap()).unwrap();
        for (s, got) in sentences.iter().zip(&together) {
            let alone = decode(&mc, &params, &encode_tokens(std::slice::from_ref(s), &vocab, 0).unwrap()).unwrap();
            prop_assert_eq!(&alone[0], got);
        }
    }
}
