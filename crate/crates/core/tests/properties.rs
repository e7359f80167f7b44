mod oracle;

use std::collections::BTreeSet;

use proptest::prelude::*;

use acrodis::corpus::{
    build_pairs, compute_stats, load_dictionary, load_samples, samples_to_json, Dictionary, SentenceSample, Upsample,
};
use acrodis::eval::{argmax, harmonic, macro_metrics};
use acrodis::tokenize::{assemble_pair, bpe_decode, bpe_encode, bpe_train, wp_encode, BpeVocab, WordPieceVocab};

const SPECIALS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[ACR]", "[/ACR]"];

fn labels(n: usize) -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    (1..=n).prop_flat_map(|len| {
        let lab = (0u8..8).prop_map(|i| format!("c{i}"));
        (prop::collection::vec(lab.clone(), len), prop::collection::vec(lab, len))
    })
}

/// Random dictionary (1 to 5 acronyms, up to 4 distinct long forms each) with
/// samples drawn from it.
fn corpus() -> impl Strategy<Value = (Dictionary, Vec<SentenceSample>)> {
    let entry = prop::collection::vec("[a-d]{1,3}( [a-d]{1,3}){0,2}", 2..=4).prop_map(|lfs| {
        let mut seen = BTreeSet::new();
        lfs.into_iter().filter(|l| seen.insert(l.clone())).collect::<Vec<_>>()
    });
    prop::collection::vec(entry, 1..=5)
        .prop_flat_map(|entries| {
            let sample = (
                0..entries.len(),
                prop::collection::vec("[a-dA-D]{1,3}", 1..8),
                any::<prop::sample::Index>(),
                any::<prop::sample::Index>(),
            );
            (Just(entries), prop::collection::vec(sample, 1..20))
        })
        .prop_map(|(entries, raw)| {
            let mut dict = Dictionary::new();
            for (i, lfs) in entries.iter().enumerate() {
                dict.insert(format!("A{i}"), lfs.clone()).unwrap();
            }
            let samples = raw
                .into_iter()
                .enumerate()
                .map(|(i, (a, mut words, pos, gold))| {
                    let pos = pos.index(words.len() + 1);
                    words.insert(pos, format!("A{a}"));
                    SentenceSample {
                        id: format!("S-{i}"),
                        tokens: words,
                        acronym_index: pos,
                        long_form: Some(gold.get(&entries[a]).clone()),
                    }
                })
                .collect();
            (dict, samples)
        })
}

proptest! {
    #[test]
    fn macro_metrics_matches_oracle((gold, pred) in labels(60)) {
        let r = macro_metrics(&gold, &pred).unwrap();
        let o = oracle::macro_metrics(&gold, &pred);
        prop_assert_eq!(r.n_classes, o.n);
        prop_assert!((r.macro_precision - o.precision).abs() < 1e-12);
        prop_assert!((r.macro_recall - o.recall).abs() < 1e-12);
        prop_assert!((r.macro_f1 - o.f1).abs() < 1e-12);
        prop_assert!((r.macro_f1 - harmonic(r.macro_precision, r.macro_recall)).abs() < 1e-15);
        for v in [r.macro_precision, r.macro_recall, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn argmax_is_invariant_under_monotone_maps(scores in prop::collection::vec(0.0f64..1.0, 1..10), k in 0.1f64..10.0) {
        let mapped: Vec<f64> = scores.iter().map(|s| (k * s).exp()).collect();
        prop_assert_eq!(argmax(&scores), argmax(&mapped));
    }

    #[test]
    fn bpe_roundtrip(text in "\\PC{0,200}", corpus in prop::collection::vec("[a-z ]{0,30}", 1..6)) {
        let vocab = bpe_train(&corpus, 30).unwrap();
        prop_assert_eq!(bpe_decode(&vocab, &bpe_encode(&vocab, &text)).unwrap(), text);
    }

    #[test]
    fn bpe_train_matches_simulation(corpus in prop::collection::vec("[abc]{0,12}", 1..12), merges in 0usize..25) {
        let vocab = bpe_train(&corpus, merges).unwrap();
        let got: Vec<(Vec<u8>, Vec<u8>)> = vocab
            .merges()
            .iter()
            .map(|&(l, r)| (vocab.token_bytes(l).unwrap().to_vec(), vocab.token_bytes(r).unwrap().to_vec()))
            .collect();
        prop_assert_eq!(got, oracle::bpe_merges(&corpus, merges));
        prop_assert_eq!(bpe_train(&corpus, merges).unwrap(), vocab);
    }

    #[test]
    fn bpe_file_roundtrip(corpus in prop::collection::vec("[a-c \\\\é]{0,12}", 1..8)) {
        let vocab = bpe_train(&corpus, 20).unwrap();
        let back = BpeVocab::from_file_str(&vocab.to_file_string()).unwrap();
        prop_assert_eq!(back.merges(), vocab.merges());
    }

    #[test]
    fn wordpiece_matches_dp_oracle(
        pieces in prop::collection::btree_set("(##)?[abc]{1,3}", 1..15),
        word in "[abc]{1,10}",
    ) {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(pieces.iter().cloned());
        let vocab = WordPieceVocab::from_tokens(tokens.clone()).unwrap();
        let set: BTreeSet<String> = tokens.into_iter().collect();
        let got: Vec<String> = wp_encode(&vocab, &[&word]).ids.iter().map(|&i| vocab.token(i).unwrap().to_string()).collect();
        prop_assert_eq!(got, oracle::wordpiece(&set, &word));
    }

    #[test]
    fn pair_counts((dict, samples) in corpus()) {
        let ks: Vec<usize> = samples.iter().map(|s| dict.candidates(s.acronym()).unwrap().len()).collect();
        let off = build_pairs(&samples, &dict, Upsample::Off).unwrap();
        let up = build_pairs(&samples, &dict, Upsample::ToCandidateCount).unwrap();
        let bal = build_pairs(&samples, &dict, Upsample::Balanced).unwrap();
        prop_assert_eq!(off.len(), ks.iter().sum::<usize>());
        prop_assert_eq!(up.len(), ks.iter().map(|k| 2 * k - 1).sum::<usize>());
        prop_assert_eq!(bal.len(), ks.iter().map(|k| (2 * k - 2).max(*k)).sum::<usize>());
        for pairs in [&off, &up, &bal] {
            let neg = pairs.iter().filter(|p| p.label == 0).count();
            prop_assert_eq!(neg, ks.iter().map(|k| k - 1).sum::<usize>());
            for p in pairs.iter() {
                let cands = dict.candidates(&p.tokens[p.acronym_index]).unwrap();
                prop_assert!(cands.contains(&p.candidate_long_form));
            }
        }
    }

    #[test]
    fn stats_match_brute_force((dict, samples) in corpus()) {
        let s = compute_stats(&samples, &dict).unwrap();
        let o = oracle::stats(&samples, &dict);
        prop_assert_eq!(s.num_acronyms, o.num_acronyms);
        prop_assert!((s.avg_long_forms_per_acronym - o.avg_long_forms).abs() < 1e-12);
        prop_assert!((s.overlap_ratio - o.overlap_ratio).abs() < 1e-12);
        prop_assert!((s.avg_sentence_length - o.avg_len).abs() < 1e-12);
    }

    #[test]
    fn corpus_json_is_byte_stable((dict, samples) in corpus()) {
        let dj = dict.to_json();
        let d2 = load_dictionary(dj.as_bytes()).unwrap();
        prop_assert_eq!(d2.to_json(), dj.clone());
        let sj = samples_to_json(&samples);
        let s2 = load_samples(sj.as_bytes(), &d2, true).unwrap();
        prop_assert_eq!(samples_to_json(&s2), sj);
    }

    #[test]
    fn assembled_pairs_fit(words in prop::collection::vec("[a-z]{1,8}", 1..40), at in any::<prop::sample::Index>(), max_len in 12usize..48) {
        let corpus: Vec<String> = vec![words.join(" ")];
        let bpe = bpe_train(&corpus, 20).unwrap();
        let idx = at.index(words.len());
        let mut tokens = words.clone();
        tokens[idx] = "ACR".into();
        let seq = assemble_pair(&bpe, &tokens, idx, "long form here", max_len).unwrap();
        prop_assert!(seq.len() <= max_len);
        let sp = bpe.specials();
        prop_assert_eq!(seq.ids.iter().filter(|&&t| t == sp.acr_open).count(), 1);
        prop_assert_eq!(seq.ids.iter().filter(|&&t| t == sp.acr_close).count(), 1);
        prop_assert_eq!(seq.ids[0], sp.cls);
    }
}
