mod common;

use granorm::autodiff::{
    adam_step, clip_grad_norm, log_softmax_rows, softmax_rows, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var,
};
use granorm::named_rng;
use proptest::prelude::*;
use rand::Rng;

use common::max_fd_error;

fn store(seed: u64) -> ParamStore {
    let mut p = ParamStore::new(seed);
    for (name, r, c) in [
        ("a", 2, 3),
        ("b", 3, 4),
        ("c", 2, 3),
        ("d", 4, 3),
        ("s", 1, 1),
        ("t", 5, 3),
    ] {
        p.init_uniform(name, r, c).unwrap();
    }
    // move away from zero so log and max kinks are not hit
    for name in ["a", "c"] {
        for v in p.get_mut(name).unwrap().data_mut() {
            *v *= 10.0;
        }
    }
    p
}

/// Reduce an arbitrary output to a scalar with fixed random weights, so every
/// output element carries a distinct upstream gradient.
fn reduce(g: &mut Graph<'_>, v: Var) -> Var {
    let shape = g.value(v).shape();
    let mut rng = named_rng(7, &format!("w{shape:?}"));
    let w: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = g.mul_const(v, Tensor::new(shape[0], shape[1], w).unwrap()).unwrap();
    g.sum(m)
}

type Build = fn(&mut Graph<'_>) -> Var;

fn ops() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |g| {
            let (a, b) = (g.param("a").unwrap(), g.param("b").unwrap());
            g.matmul(a, b).unwrap()
        }),
        ("matmul_nt", |g| {
            let (a, d) = (g.param("a").unwrap(), g.param("d").unwrap());
            g.matmul_nt(a, d).unwrap()
        }),
        ("add", |g| {
            let (a, c) = (g.param("a").unwrap(), g.param("c").unwrap());
            g.add(a, c).unwrap()
        }),
        ("sub", |g| {
            let (a, c) = (g.param("a").unwrap(), g.param("c").unwrap());
            g.sub(a, c).unwrap()
        }),
        ("mul", |g| {
            let (a, c) = (g.param("a").unwrap(), g.param("c").unwrap());
            g.mul(a, c).unwrap()
        }),
        ("scale", |g| {
            let a = g.param("a").unwrap();
            g.scale(a, -2.5)
        }),
        ("add_const", |g| {
            let a = g.param("a").unwrap();
            let x = g.add_const(a, 3.0);
            g.mul(x, x).unwrap()
        }),
        ("one_minus", |g| {
            let a = g.param("a").unwrap();
            g.one_minus(a)
        }),
        ("scale_by", |g| {
            let (a, s) = (g.param("a").unwrap(), g.param("s").unwrap());
            g.scale_by(a, s).unwrap()
        }),
        ("concat_cols", |g| {
            let (a, c) = (g.param("a").unwrap(), g.param("c").unwrap());
            g.concat_cols(&[a, c, a]).unwrap()
        }),
        ("concat_rows", |g| {
            let (a, c) = (g.param("a").unwrap(), g.param("c").unwrap());
            g.concat_rows(&[c, a]).unwrap()
        }),
        ("row", |g| {
            let t = g.param("t").unwrap();
            g.row(t, 3)
        }),
        ("gather", |g| {
            let t = g.param("t").unwrap();
            g.gather(t, &[4, 0, 4, 2])
        }),
        ("column_map", |g| {
            let b = g.param("b").unwrap();
            g.column_map(b, vec![vec![(0, 1.0), (3, 0.5)], vec![], vec![(2, -1.0), (2, 2.0)]])
        }),
        ("pick", |g| {
            let b = g.param("b").unwrap();
            g.pick(b, &[3, 1, 1])
        }),
        ("tanh", |g| {
            let a = g.param("a").unwrap();
            g.tanh(a)
        }),
        ("sigmoid", |g| {
            let a = g.param("a").unwrap();
            g.sigmoid(a)
        }),
        ("exp", |g| {
            let b = g.param("b").unwrap();
            g.exp(b)
        }),
        ("log", |g| {
            let a = g.param("a").unwrap();
            let sq = g.mul(a, a).unwrap();
            let pos = g.add_const(sq, 0.5);
            g.log(pos)
        }),
        ("softmax", |g| {
            let b = g.param("b").unwrap();
            g.softmax(b)
        }),
        ("log_softmax", |g| {
            let b = g.param("b").unwrap();
            g.log_softmax(b)
        }),
        ("sum", |g| {
            let b = g.param("b").unwrap();
            let s = g.sum(b);
            g.mul(s, s).unwrap()
        }),
        ("mean", |g| {
            let b = g.param("b").unwrap();
            let m = g.mean(b);
            g.mul(m, m).unwrap()
        }),
        ("max_const", |g| {
            let a = g.param("a").unwrap();
            g.max_const(a, 0.0)
        }),
    ]
}

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..3 {
        let p = store(seed);
        for (name, build) in ops() {
            let mut g = Graph::new(&p);
            let out = build(&mut g);
            let loss = reduce(&mut g, out);
            let grads = g.backward(loss).unwrap();
            let (err, at) = max_fd_error(&p, &grads, 1e-5, 1e-7, |q| {
                let mut g = Graph::new(q);
                let out = build(&mut g);
                let l = reduce(&mut g, out);
                g.scalar(l)
            });
            assert!(err <= 1e-4, "{name} seed {seed}: rel err {err:e} at {at}");
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let p = store(0);
    let mut g = Graph::new(&p);
    let (a, d) = (g.param("a").unwrap(), g.param("d").unwrap());
    assert!(g.matmul(a, d).is_err());
    assert!(g.add(a, d).is_err());
    let b = g.param("b").unwrap();
    assert!(g.backward(b).is_err());
    assert!(g.param("missing").is_err());
}

#[test]
fn adam_follows_scalar_recurrence() {
    let mut p = ParamStore::new(0);
    p.insert("w", Tensor::row(vec![0.5, -1.0])).unwrap();
    let cfg = AdamConfig::default();
    let mut st = AdamState::new(&p);
    let grads_seq = [[0.3, -0.2], [0.1, 0.4], [-0.5, 0.05]];
    // oracle: textbook Adam per coordinate
    let mut w = [0.5f64, -1.0];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    for (t, gs) in grads_seq.iter().enumerate() {
        adam_step(&mut p, &[Tensor::row(gs.to_vec())], &mut st, &cfg).unwrap();
        let t = (t + 1) as i32;
        for k in 0..2 {
            m[k] = 0.9 * m[k] + 0.1 * gs[k];
            v[k] = 0.999 * v[k] + 0.001 * gs[k] * gs[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            w[k] -= 5e-4 * mh / (vh.sqrt() + 1e-8);
        }
        let got = p.get("w").unwrap().data();
        for k in 0..2 {
            assert!(
                (got[k] - w[k]).abs() < 1e-15,
                "step {t} coord {k}: {} vs {}",
                got[k],
                w[k]
            );
        }
    }
    // first step moves each coordinate by lr against the gradient sign
    let mut q = ParamStore::new(0);
    q.insert("w", Tensor::row(vec![0.0, 0.0])).unwrap();
    let mut st = AdamState::new(&q);
    adam_step(&mut q, &[Tensor::row(vec![2.0, -3.0])], &mut st, &cfg).unwrap();
    let d = q.get("w").unwrap().data();
    assert!((d[0] + 5e-4).abs() < 1e-10 && (d[1] - 5e-4).abs() < 1e-10);
}

#[test]
fn clipping_scales_to_max_norm() {
    let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![0.0, 4.0])];
    assert_eq!(clip_grad_norm(&mut g, 5.0), 5.0);
    assert_eq!(g[1].data(), [0.0, 4.0]);
    let before = clip_grad_norm(&mut g, 1.0);
    assert_eq!(before, 5.0);
    let norm: f64 = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(rows, cols, data[..rows * cols].to_vec()).unwrap();
        let s = softmax_rows(&t);
        let ls = log_softmax_rows(&t);
        for r in 0..rows {
            let sum: f64 = s.row_slice(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..cols {
                prop_assert!((ls.get(r, c).exp() - s.get(r, c)).abs() < 1e-12);
            }
        }
    }
}
