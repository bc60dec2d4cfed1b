mod common;

use granorm::autodiff::{AdamState, Graph, ParamStore};
use granorm::corpus::{generate_label_bias, Example, RawExample, SynthSpec, LABEL_BIAS_GRAMMAR};
use granorm::grammar::parse_grammar;
use granorm::model::{Model, ScoreMode, Vocab};
use granorm::search::{beam_search, BeamConfig};
use granorm::training::{
    example_loss, margin_loss, max_margin_loss, mine_negatives, mle_loss, train, train_step, TrainingConfig,
};
use granorm::transition::actions_to_ast;

use common::{max_fd_error, toks};

fn fixture(dim: usize) -> Model {
    let spec = parse_grammar(LABEL_BIAS_GRAMMAR)
        .unwrap()
        .with_token_vocab(["v01", "v02"])
        .unwrap();
    Model::new(spec, Vocab::new(["use", "v01", "v02", "alpha", "beta"]), dim).unwrap()
}

fn example(m: &Model, src: &str, tgt: &str) -> Example {
    Example::from_raw(
        RawExample {
            src: toks(src),
            tgt: tgt.to_string(),
        },
        m.grammar(),
    )
    .unwrap()
}

fn mle(m: &Model, p: &ParamStore, ex: &Example) -> f64 {
    let utt = m.utterance(&ex.src).unwrap();
    let mut g = Graph::new(p);
    let l = mle_loss(&mut g, m, &utt, &ex.tgt_actions).unwrap();
    g.scalar(l)
}

#[test]
fn mle_loss_is_nonnegative_and_zero_when_forced() {
    let m = fixture(6);
    for seed in 0..5 {
        let p = m.init_params(seed);
        for (s, t) in [
            ("use v01", "(UseId (tok \"v01\"))"),
            ("use alpha", "(UseKw (A))"),
            ("use v07", "(UseId (tok \"v07\"))"),
        ] {
            assert!(mle(&m, &p, &example(&m, s, t)) >= 0.0);
        }
    }
    let forced = Model::new(parse_grammar("root S\nS = Only()").unwrap(), Vocab::new(["w"]), 6).unwrap();
    let p = forced.init_params(2);
    assert_eq!(mle(&forced, &p, &example(&forced, "w", "(Only)")), 0.0);
}

#[test]
fn gradient_descent_reduces_mle() {
    let m = fixture(6);
    let ex = example(&m, "use v01 beta", "(UseId (tok \"v01\"))");
    let mut p = m.init_params(4);
    let start = mle(&m, &p, &ex);
    for _ in 0..10 {
        let utt = m.utterance(&ex.src).unwrap();
        let grads = {
            let mut g = Graph::new(&p);
            let l = mle_loss(&mut g, &m, &utt, &ex.tgt_actions).unwrap();
            g.backward(l).unwrap()
        };
        for (i, name) in p.names().to_vec().iter().enumerate() {
            let t = p.get_mut(name).unwrap();
            for (x, d) in t.data_mut().iter_mut().zip(grads[i].data()) {
                *x -= 1e-3 * d;
            }
        }
    }
    assert!(mle(&m, &p, &ex) < start);
}

#[test]
fn mle_gradient_matches_finite_differences() {
    let m = fixture(4);
    let ex = example(&m, "use v01 v09", "(UseId (tok \"v09\"))");
    let p = m.init_params(7);
    let utt = m.utterance(&ex.src).unwrap();
    let mut g = Graph::new(&p);
    let l = mle_loss(&mut g, &m, &utt, &ex.tgt_actions).unwrap();
    let grads = g.backward(l).unwrap();
    let (err, at) = max_fd_error(&p, &grads, 1e-5, 1e-6, |q| mle(&m, q, &ex));
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn margin_gradient_matches_finite_differences() {
    let m = fixture(4);
    let ex = example(&m, "use beta v02", "(UseKw (B))");
    let p = m.init_params(8);
    let utt = m.utterance(&ex.src).unwrap();
    let negs = mine_negatives(&m, &p, &utt, &ex.tgt_actions, 4).unwrap();
    assert!(!negs.is_empty());
    // a large margin keeps every hinge active, away from the kink
    let loss = |q: &ParamStore| {
        let mut g = Graph::new(q);
        let (l, _) = margin_loss(&mut g, &m, &utt, &ex.tgt_actions, &negs, 50.0).unwrap();
        g.scalar(l)
    };
    let mut g = Graph::new(&p);
    let (l, active) = margin_loss(&mut g, &m, &utt, &ex.tgt_actions, &negs, 50.0).unwrap();
    assert_eq!(active, negs.len());
    let grads = g.backward(l).unwrap();
    // the loss is near the margin, so round-off in differences is about 1e-9
    let (err, at) = max_fd_error(&p, &grads, 1e-5, 1e-4, loss);
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn traced_global_loss_matches_rescoring() {
    let m = fixture(6);
    for seed in 0..4 {
        let p = m.init_params(seed);
        let ex = example(&m, "use v02 alpha", "(UseId (tok \"v02\"))");
        let cfg = TrainingConfig {
            margin: 3.0,
            neg_beam_width: 5,
            ..TrainingConfig::global()
        };
        let traced = example_loss(&m, &p, &ex, &cfg).unwrap().unwrap();
        let utt = m.utterance(&ex.src).unwrap();
        let negs = mine_negatives(&m, &p, &utt, &ex.tgt_actions, 5).unwrap();
        let mut g = Graph::new(&p);
        let (l, active) = margin_loss(&mut g, &m, &utt, &ex.tgt_actions, &negs, 3.0).unwrap();
        assert_eq!(traced.hinges, negs.len());
        assert_eq!(traced.active, active);
        assert!((traced.loss - g.scalar(l)).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        for (a, b) in traced.grads.unwrap().iter().zip(&grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn negatives_exclude_gold() {
    let m = fixture(6);
    let p = m.init_params(1);
    let utt = m.utterance(&toks("use alpha")).unwrap();
    let beam = beam_search(&m, &p, &utt, &BeamConfig::new(4, ScoreMode::Global, 30)).unwrap();
    let gold = beam[1].actions.clone();
    let negs = mine_negatives(&m, &p, &utt, &gold, 4).unwrap();
    assert_eq!(negs.len(), beam.len() - 1);
    assert!(!negs.contains(&gold));
    let rest: Vec<_> = beam.iter().map(|h| h.actions.clone()).filter(|a| *a != gold).collect();
    assert_eq!(negs, rest);
    // gold outside the beam leaves every hypothesis as a negative
    let outside = example(&m, "use alpha", "(UseId (tok \"v01\" \"v02\" \"v01\"))").tgt_actions;
    assert_eq!(mine_negatives(&m, &p, &utt, &outside, 4).unwrap().len(), beam.len());
}

#[test]
fn tied_negative_costs_the_margin() {
    let m = fixture(6);
    let p = m.init_params(3);
    let ex = example(&m, "use v01", "(UseId (tok \"v01\"))");
    let utt = m.utterance(&ex.src).unwrap();
    let mut g = Graph::new(&p);
    let (l, active) = margin_loss(&mut g, &m, &utt, &ex.tgt_actions, &[ex.tgt_actions.clone()], 0.25).unwrap();
    assert_eq!(g.scalar(l), 0.25);
    assert_eq!(active, 1);
    assert_eq!(max_margin_loss(1.0, 1.0, 0.25), 0.25);
}

#[test]
fn zero_loss_step_leaves_parameters_untouched() {
    let m = fixture(6);
    let mut p = m.init_params(5);
    let utt = m.utterance(&toks("use beta")).unwrap();
    let top = beam_search(&m, &p, &utt, &BeamConfig::new(8, ScoreMode::Global, 30)).unwrap();
    let gold = top[0].actions.clone();
    let ast = actions_to_ast(&gold, m.grammar()).unwrap();
    let ex = Example {
        src: toks("use beta"),
        tgt_sexpr: ast.to_sexpr(m.grammar()),
        tgt_ast: ast,
        tgt_actions: gold,
    };
    let cfg = TrainingConfig {
        margin: 1e-12,
        neg_beam_width: 8,
        ..TrainingConfig::global()
    };
    let before = p.clone();
    let mut adam = AdamState::new(&p);
    let out = train_step(&m, &mut p, &mut adam, &[&ex], &cfg).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(!out.updated);
    assert_eq!(out.active, 0);
    for (a, b) in before.iter().zip(p.iter()) {
        assert_eq!(a.0, b.0);
        assert!(a
            .1
            .data()
            .iter()
            .zip(b.1.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn synth(n_train: usize, n_dev: usize) -> (Model, Vec<Example>, Vec<Example>) {
    let data = generate_label_bias(&SynthSpec {
        n_train,
        n_dev,
        n_test: 1,
        seed: 9,
        ..SynthSpec::default()
    })
    .unwrap();
    let base = parse_grammar(LABEL_BIAS_GRAMMAR).unwrap();
    let conv = |rows: Vec<RawExample>| {
        rows.into_iter()
            .map(|r| Example::from_raw(r, &base).unwrap())
            .collect::<Vec<_>>()
    };
    let train_set = conv(data.train);
    let dev_set = conv(data.dev);
    let spec = base
        .with_token_vocab(granorm::corpus::build_token_vocab(&train_set, 1))
        .unwrap();
    let m = Model::new(spec, granorm::corpus::build_src_vocab(&train_set, 1), 16).unwrap();
    let reparse = |xs: Vec<Example>| {
        xs.into_iter()
            .map(|e| example(&m, &e.src.join(" "), &e.tgt_sexpr))
            .collect::<Vec<_>>()
    };
    let (t, d) = (reparse(train_set), reparse(dev_set));
    (m, t, d)
}

#[test]
fn one_epoch_is_deterministic() {
    let (m, tr, dev) = synth(12, 4);
    let cfg = TrainingConfig {
        epochs: 1,
        batch_size: 1,
        dim: 16,
        ..TrainingConfig::local()
    };
    let a = train(&m, m.init_params(1), &tr, &dev, &cfg).unwrap();
    let b = train(&m, m.init_params(1), &tr, &dev, &cfg).unwrap();
    assert_eq!(a.stats.to_jsonl(), b.stats.to_jsonl());
    for (x, y) in a.params.iter().zip(b.params.iter()) {
        assert!(x
            .1
            .data()
            .iter()
            .zip(y.1.data())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn small_corpus_is_fit_by_mle() {
    let (m, tr, _) = synth(20, 1);
    let cfg = TrainingConfig {
        epochs: 50,
        patience: 0,
        lr: 1e-2,
        batch_size: 4,
        dim: 16,
        ..TrainingConfig::local()
    };
    let out = train(&m, m.init_params(2), &tr, &tr, &cfg).unwrap();
    let best = &out.stats.epochs[out.stats.best_epoch - 1];
    assert_eq!(best.dev_em, 1.0);
    let last = out.stats.epochs.last().unwrap();
    assert!(
        last.loss < out.stats.epochs[0].loss / 10.0,
        "{} vs {}",
        last.loss,
        out.stats.epochs[0].loss
    );
}

#[test]
fn config_validation() {
    assert!(TrainingConfig::local().validate().is_ok());
    let bad = [
        TrainingConfig {
            margin: 0.0,
            ..TrainingConfig::global()
        },
        TrainingConfig {
            neg_beam_width: 1,
            ..TrainingConfig::global()
        },
        TrainingConfig {
            batch_size: 0,
            ..TrainingConfig::local()
        },
        TrainingConfig {
            lr: f64::NAN,
            ..TrainingConfig::local()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}
