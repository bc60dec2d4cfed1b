#![allow(dead_code)]

use std::collections::BTreeMap;

use granorm::autodiff::{ParamStore, Tensor};
use granorm::grammar::{parse_grammar, GrammarSpec};
use granorm::model::{Model, Vocab};
use granorm::transition::{Action, DerivationState};
use rand::Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// A non-recursive grammar with only single and optional composite fields,
/// so its language is finite. Returns the grammar and its derivation count.
pub fn finite_grammar<R: Rng>(rng: &mut R, max_derivations: usize) -> (GrammarSpec, usize) {
    loop {
        let n_types = rng.gen_range(2..=4);
        let mut lines = vec!["root T0".to_string()];
        let mut counts = vec![0usize; n_types];
        for t in (0..n_types).rev() {
            let n_cons = rng.gen_range(1..=3);
            let mut alts = Vec::new();
            let mut total = 0usize;
            for c in 0..n_cons {
                let mut fields = Vec::new();
                let mut prod = 1usize;
                if t + 1 < n_types {
                    for f in 0..rng.gen_range(0..=2) {
                        let target = rng.gen_range(t + 1..n_types);
                        if rng.gen_bool(0.4) {
                            fields.push(format!("T{target}? f{f}"));
                            prod *= 1 + counts[target];
                        } else {
                            fields.push(format!("T{target} f{f}"));
                            prod *= counts[target];
                        }
                    }
                }
                total += prod;
                alts.push(format!("C{t}x{c}({})", fields.join(", ")));
            }
            counts[t] = total;
            lines.push(format!("T{t} = {}", alts.join(" | ")));
        }
        if counts[0] >= 2 && counts[0] <= max_derivations {
            return (parse_grammar(&lines.join("\n")).unwrap(), counts[0]);
        }
    }
}

/// A grammar exercising every field kind, including token lists, optional and
/// multiple fields, and recursion through a multiple field.
pub fn rich_grammar<R: Rng>(rng: &mut R) -> GrammarSpec {
    let kinds = ["token", "token?", "token*", "N", "N?", "N*", "E*"];
    let mut lines = vec!["root E".to_string()];
    let mut alts = Vec::new();
    for c in 0..rng.gen_range(2..=4) {
        let fields: Vec<String> = (0..rng.gen_range(0..=3))
            .map(|f| format!("{} f{f}", kinds[rng.gen_range(0..kinds.len())]))
            .collect();
        alts.push(format!("E{c}({})", fields.join(", ")));
    }
    alts.push("Leaf()".into());
    lines.push(format!("E = {}", alts.join(" | ")));
    lines.push("N = Num(token v) | Zero()".into());
    parse_grammar(&lines.join("\n"))
        .unwrap()
        .with_token_vocab(["x", "y", "z"])
        .unwrap()
}

pub fn src_vocab() -> Vocab {
    Vocab::new(["x", "y", "q", "w"])
}

pub fn random_source<R: Rng>(rng: &mut R) -> Vec<String> {
    let pool = ["x", "y", "q", "w", "unseen", "zz"];
    (0..rng.gen_range(1..=5))
        .map(|_| pool[rng.gen_range(0..pool.len())].to_string())
        .collect()
}

/// Walk `steps` random legal actions from the initial state, stopping early
/// (before completion) if the derivation would finish.
pub fn random_walk<R: Rng>(
    spec: &GrammarSpec,
    src: &[String],
    rng: &mut R,
    steps: usize,
) -> (DerivationState, Vec<Action>) {
    let mut state = DerivationState::initial(spec);
    let mut taken = Vec::new();
    for _ in 0..steps {
        let cands = state.candidate_actions(spec, src).unwrap();
        let a = cands.actions[rng.gen_range(0..cands.len())].clone();
        let next = state.apply(&a, spec, src).unwrap();
        if next.is_complete() {
            break;
        }
        state = next;
        taken.push(a);
    }
    (state, taken)
}

pub fn model_for(spec: GrammarSpec, dim: usize) -> Model {
    Model::new(spec, src_vocab(), dim).unwrap()
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every parameter element, with the denominator floored at `floor`.
pub fn max_fd_error(
    params: &ParamStore,
    analytic: &[Tensor],
    h: f64,
    floor: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for (i, name) in params.names().iter().enumerate() {
        let n = params.tensor_at(i).data().len();
        for k in 0..n {
            let orig = params.tensor_at(i).data()[k];
            p.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let up = f(&p);
            p.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let down = f(&p);
            p.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Reference corpus BLEU written independently of the library: n-grams are
/// joined into strings and counted in ordered maps.
pub fn bleu_oracle(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let grams = |toks: &[String], n: usize| -> BTreeMap<String, i64> {
        let mut m = BTreeMap::new();
        let mut i = 0;
        while i + n <= toks.len() {
            *m.entry(toks[i..i + n].join("\u{1}")).or_insert(0) += 1;
            i += 1;
        }
        m
    };
    let mut num = [0i64; 4];
    let mut den = [0i64; 4];
    let mut c = 0i64;
    let mut r = 0i64;
    for (hyp, reference) in pairs {
        c += hyp.len() as i64;
        r += reference.len() as i64;
        for n in 1..=4 {
            let hg = grams(hyp, n);
            let rg = grams(reference, n);
            for (g, cnt) in &hg {
                num[n - 1] += (*cnt).min(*rg.get(g).unwrap_or(&0));
                den[n - 1] += cnt;
            }
        }
    }
    if num.iter().any(|&x| x == 0) {
        return 0.0;
    }
    let mut s = 0.0;
    for n in 0..4 {
        s += 0.25 * (num[n] as f64 / den[n] as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * s.exp()
}
