mod common;

use granorm::ast::parse_sexpr;
use granorm::corpus::{
    build_token_vocab, gen_label_bias_dataset, generate_label_bias, load_jsonl, Example, SynthSpec, LABEL_BIAS_GRAMMAR,
};
use granorm::grammar::{parse_grammar, ConstructorId};
use granorm::metrics::{corpus_bleu, evaluate, exact_match, Scored};
use granorm::named_rng;
use granorm::transition::{Action, DerivationState};
use proptest::prelude::*;
use rand::seq::SliceRandom;

use common::{bleu_oracle, toks};

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn bleu_matches_reference(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let got = corpus_bleu(&pairs).unwrap();
        prop_assert!((got - bleu_oracle(&pairs)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn bleu_ignores_pair_order(pairs in prop::collection::vec((sentence(), sentence()), 1..6), seed in any::<u64>()) {
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut named_rng(seed, "perm"));
        prop_assert!((corpus_bleu(&pairs).unwrap() - corpus_bleu(&shuffled).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn bleu_worked_example() {
    // unigrams 5/6, bigrams 3/5, trigrams 1/4, 4-grams 0/3
    let pairs = vec![(toks("a b c d a b"), toks("a b c e a b"))];
    assert_eq!(corpus_bleu(&pairs).unwrap(), 0.0);
    let pairs = vec![(toks("a b c d e"), toks("a b c d f"))];
    let expected = ((4.0f64 / 5.0).ln() + (3.0f64 / 4.0).ln() + (2.0f64 / 3.0).ln() + (1.0f64 / 2.0).ln()) / 4.0;
    assert!((corpus_bleu(&pairs).unwrap() - expected.exp()).abs() < 1e-12);
    assert_eq!(corpus_bleu(&[(vec![], toks("a"))]).unwrap(), 0.0);
}

#[test]
fn exact_match_and_report() {
    let spec = parse_grammar(LABEL_BIAS_GRAMMAR).unwrap();
    let p = |s: &str| parse_sexpr(s, &spec).unwrap();
    let asts = [
        p("(UseKw (A))"),
        p("(UseKw (B))"),
        p("(UseId (tok \"x\"))"),
        p("(UseId (tok \"x\" \"y\"))"),
    ];
    for a in &asts {
        assert!(exact_match(a, a));
        for b in &asts {
            assert_eq!(exact_match(a, b), exact_match(b, a));
        }
    }
    let wrong = p("(UseKw (A))");
    let items = [
        Scored {
            gold: &asts[0],
            predicted: Some(&asts[0]),
        },
        Scored {
            gold: &asts[1],
            predicted: Some(&asts[1]),
        },
        Scored {
            gold: &asts[2],
            predicted: Some(&asts[2]),
        },
        Scored {
            gold: &asts[3],
            predicted: Some(&wrong),
        },
    ];
    let r = evaluate(&spec, &items, true);
    assert_eq!(r.n_examples, 4);
    assert_eq!(r.exact_match, 0.75);
    let rows = r.per_example.unwrap();
    assert_eq!(rows.iter().filter(|x| x.matched).count(), 3);
    let json = serde_json::to_value(&rows[3]).unwrap();
    assert_eq!(json["match"], false);
    let failed = [Scored {
        gold: &asts[0],
        predicted: None,
    }];
    let r = evaluate(&spec, &failed, false);
    assert_eq!((r.exact_match, r.bleu), (0.0, 0.0));
    assert!(r.per_example.is_none());
}

#[test]
fn synthetic_name_slot_is_wide_and_keyword_slot_is_binary() {
    let spec = SynthSpec {
        seed: 4,
        ..SynthSpec::default()
    };
    let data = generate_label_bias(&spec).unwrap();
    let base = parse_grammar(LABEL_BIAS_GRAMMAR).unwrap();
    let train: Vec<Example> = data
        .train
        .iter()
        .cloned()
        .map(|r| Example::from_raw(r, &base).unwrap())
        .collect();
    let vocab = build_token_vocab(&train, 2);
    let g = base.with_token_vocab(vocab.clone()).unwrap();
    let use_id = g.constructors().iter().position(|c| c.name == "UseId").unwrap();
    let use_kw = g.constructors().iter().position(|c| c.name == "UseKw").unwrap();
    for ex in train.iter().take(50) {
        let s0 = DerivationState::initial(&g);
        let id_slot = s0
            .apply(&Action::ApplyConstr(ConstructorId(use_id)), &g, &ex.src)
            .unwrap();
        let c = id_slot.candidate_actions(&g, &ex.src).unwrap();
        // every vocabulary token, source-only tokens, no Reduce before the
        // first token
        assert!(c.actions.len() > vocab.len());
        assert!(vocab.len() >= 30);
        let kw_slot = s0
            .apply(&Action::ApplyConstr(ConstructorId(use_kw)), &g, &ex.src)
            .unwrap();
        assert_eq!(kw_slot.candidate_actions(&g, &ex.src).unwrap().actions.len(), 2);
    }
}

#[test]
fn dataset_files_are_deterministic() {
    let spec = SynthSpec {
        n_train: 30,
        n_dev: 5,
        n_test: 5,
        seed: 11,
        ..SynthSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_label_bias_dataset(&spec, a.path()).unwrap();
    gen_label_bias_dataset(&spec, b.path()).unwrap();
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "grammar.txt", "meta.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let g = parse_grammar(LABEL_BIAS_GRAMMAR).unwrap();
    assert_eq!(load_jsonl(&a.path().join("train.jsonl"), &g).unwrap().len(), 30);
    let other = SynthSpec { seed: 12, ..spec };
    assert_ne!(
        generate_label_bias(&other).unwrap().train,
        generate_label_bias(&spec).unwrap().train
    );
}
