//! Encoder-decoder scorer producing one logit per legal action.
//!
//! The encoder is a single-layer bidirectional LSTM over source embeddings.
//! The decoder is an LSTM fed `[embed(a_{t-1}) ⊕ ctx_{t-1}]` with
//! multiplicative attention over encoder states. Constructor and `Reduce`
//! logits come from a linear layer over `tanh(W [h ⊕ ctx])`; token logits
//! merge a vocabulary pathway with a pointer over source positions, either as
//! a probability mixture (local scoring) or as an interpolation of raw logits
//! (global scoring).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::grammar::{FieldType, GrammarSpec};
use crate::transition::{Action, CandidateSet, DerivationState, TransitionError};

pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("hidden dimension must be even and positive, got {0}")]
    BadDim(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("parameter mismatch: {}", .0.join(", "))]
    ParamMismatch(Vec<String>),
}

/// Which per-step score a caller reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Local,
    Global,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Local => "local",
            ScoreMode::Global => "global",
        })
    }
}

/// Source-side vocabulary; index 0 is always `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::new(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: vec![UNK.to_string()],
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if t != UNK && !v.tokens.contains(&t) {
                v.tokens.push(t);
            }
        }
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Source tokens with their encoder ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, vocab: &Vocab) -> Result<Self, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyUtterance);
        }
        let ids = tokens.iter().map(|t| vocab.id(t)).collect();
        Ok(Utterance { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct EncoderOutput {
    /// `[len × d]`
    pub states: Var,
    /// `[1 × d]`
    pub summary: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub ctx: Var,
}

/// Scores for every candidate at one step, aligned with `candidates`.
pub struct StepLogits {
    pub candidates: CandidateSet,
    /// Logits whose softmax is the locally normalized step distribution.
    pub local: Var,
    /// Raw logits summed/averaged by the globally normalized model.
    pub global: Var,
    /// Copy gate probability, for token slots.
    pub p_copy: Option<Var>,
    /// Attention over source positions used by the copy pathway.
    pub copy_attention: Option<Var>,
}

impl StepLogits {
    pub fn logits(&self, mode: ScoreMode) -> Var {
        match mode {
            ScoreMode::Local => self.local,
            ScoreMode::Global => self.global,
        }
    }
}

/// `p_gen · P(v|gen) + (1 - p_gen) · P(v|copy)`.
pub fn copy_merged_probability(p_gen: f64, p_v_gen: f64, p_v_copy: f64) -> Result<f64, ModelError> {
    for p in [p_gen, p_v_gen, p_v_copy] {
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::Probability(p));
        }
    }
    Ok(p_gen * p_v_gen + (1.0 - p_gen) * p_v_copy)
}

/// `p_gen · o(v|gen) + (1 - p_gen) · o(v|copy)`; `o_copy = None` (token not
/// in the source) bypasses the gate and returns `o_gen`.
pub fn copy_merged_logit(p_gen: f64, o_gen: f64, o_copy: Option<f64>) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&p_gen) {
        return Err(ModelError::Probability(p_gen));
    }
    Ok(match o_copy {
        Some(o_copy) => p_gen * o_gen + (1.0 - p_gen) * o_copy,
        None => o_gen,
    })
}

/// Architecture and vocabularies; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    grammar: GrammarSpec,
    src_vocab: Vocab,
    dim: usize,
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];

struct Lstm {
    w: [Var; 4],
    b: [Var; 4],
}

impl Model {
    pub fn new(grammar: GrammarSpec, src_vocab: Vocab, dim: usize) -> Result<Self, ModelError> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(ModelError::BadDim(dim));
        }
        Ok(Model {
            grammar,
            src_vocab,
            dim,
        })
    }

    pub fn grammar(&self) -> &GrammarSpec {
        &self.grammar
    }

    pub fn src_vocab(&self) -> &Vocab {
        &self.src_vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn utterance(&self, tokens: &[String]) -> Result<Utterance, ModelError> {
        Utterance::new(tokens.to_vec(), &self.src_vocab)
    }

    fn n_constructors(&self) -> usize {
        self.grammar.constructors().len()
    }

    fn reduce_col(&self) -> usize {
        self.n_constructors()
    }

    fn emit_col(&self) -> usize {
        self.n_constructors() + 1
    }

    fn start_row(&self) -> usize {
        self.n_constructors() + 1
    }

    fn unk_token_row(&self) -> usize {
        self.n_constructors() + 2
    }

    /// Name and `[rows, cols]` of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        let d = self.dim;
        let h = d / 2;
        let c = self.n_constructors();
        let v = self.grammar.token_vocab().len();
        let mut out = vec![("src_embed".to_string(), [self.src_vocab.len(), d])];
        for dir in ["enc_fwd", "enc_bwd"] {
            for gate in GATES {
                out.push((format!("{dir}/W_{gate}"), [d + h, h]));
                out.push((format!("{dir}/b_{gate}"), [1, h]));
            }
        }
        out.push(("enc_summary/W".into(), [d, d]));
        out.push(("enc_summary/b".into(), [1, d]));
        out.push(("action_embed".into(), [c + 3 + v, d]));
        for gate in GATES {
            out.push((format!("dec/W_{gate}"), [3 * d, d]));
            out.push((format!("dec/b_{gate}"), [1, d]));
        }
        out.push(("attn/W".into(), [d, d]));
        out.push(("att_out/W".into(), [2 * d, d]));
        out.push(("att_out/b".into(), [1, d]));
        out.push(("action/W".into(), [d, c + 2]));
        out.push(("action/b".into(), [1, c + 2]));
        out.push(("token/W".into(), [d, v]));
        out.push(("token/b".into(), [1, v]));
        out.push(("copy/W".into(), [d, d]));
        out.push(("gate/W".into(), [d, 1]));
        out.push(("gate/b".into(), [1, 1]));
        out
    }

    /// Fresh parameters, uniform in (-0.1, 0.1), one named stream each.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new(seed);
        for (name, [r, c]) in self.param_shapes() {
            store.init_uniform(&name, r, c).expect("parameter names are unique");
        }
        store
    }

    /// Names whose presence or shape disagrees with this architecture.
    pub fn check_params(&self, store: &ParamStore) -> Result<(), ModelError> {
        let expected = self.param_shapes();
        let mut bad = Vec::new();
        for (name, shape) in &expected {
            match store.get(name) {
                Some(t) if t.shape() == *shape => {}
                Some(t) => bad.push(format!("{name} (expected {shape:?}, found {:?})", t.shape())),
                None => bad.push(format!("{name} (missing)")),
            }
        }
        for name in store.names() {
            if !expected.iter().any(|(n, _)| n == name) {
                bad.push(format!("{name} (unexpected)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ModelError::ParamMismatch(bad))
        }
    }

    fn lstm(&self, g: &mut Graph<'_>, prefix: &str) -> Result<Lstm, ModelError> {
        let mut w = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in GATES {
            w.push(g.param(&format!("{prefix}/W_{gate}"))?);
            b.push(g.param(&format!("{prefix}/b_{gate}"))?);
        }
        Ok(Lstm {
            w: w.try_into().expect("4 gates"),
            b: b.try_into().expect("4 gates"),
        })
    }

    fn lstm_cell(g: &mut Graph<'_>, cell: &Lstm, x: Var, h: Var, c: Var) -> Result<(Var, Var), ModelError> {
        let z = g.concat_cols(&[x, h])?;
        let mut acts = [z; 4];
        for k in 0..4 {
            let pre = g.matmul(z, cell.w[k])?;
            let pre = g.add(pre, cell.b[k])?;
            acts[k] = if k == 3 { g.tanh(pre) } else { g.sigmoid(pre) };
        }
        let [i, f, o, cand] = acts;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    pub fn encode(&self, g: &mut Graph<'_>, utt: &Utterance) -> Result<EncoderOutput, ModelError> {
        if utt.is_empty() {
            return Err(ModelError::EmptyUtterance);
        }
        let n = utt.len();
        let half = self.dim / 2;
        let table = g.param("src_embed")?;
        let emb = g.gather(table, &utt.ids);
        let rows: Vec<Var> = (0..n).map(|i| g.row(emb, i)).collect();

        let fwd = self.lstm(g, "enc_fwd")?;
        let bwd = self.lstm(g, "enc_bwd")?;
        let zero = g.constant(Tensor::zeros(1, half));

        let mut fwd_states = Vec::with_capacity(n);
        let (mut h, mut c) = (zero, zero);
        for &x in &rows {
            (h, c) = Self::lstm_cell(g, &fwd, x, h, c)?;
            fwd_states.push(h);
        }
        let mut bwd_states = vec![zero; n];
        let (mut h, mut c) = (zero, zero);
        for i in (0..n).rev() {
            (h, c) = Self::lstm_cell(g, &bwd, rows[i], h, c)?;
            bwd_states[i] = h;
        }
        let per_pos: Vec<Var> = (0..n)
            .map(|i| g.concat_cols(&[fwd_states[i], bwd_states[i]]))
            .collect::<Result<_, _>>()?;
        let states = g.concat_rows(&per_pos)?;

        let last = g.concat_cols(&[fwd_states[n - 1], bwd_states[0]])?;
        let ws = g.param("enc_summary/W")?;
        let bs = g.param("enc_summary/b")?;
        let proj = g.matmul(last, ws)?;
        let proj = g.add(proj, bs)?;
        let summary = g.tanh(proj);
        Ok(EncoderOutput {
            states,
            summary,
            len: n,
        })
    }

    pub fn initial_decoder_state(&self, g: &mut Graph<'_>, enc: &EncoderOutput) -> DecoderState {
        let c = g.constant(Tensor::zeros(1, self.dim));
        let ctx = g.constant(Tensor::zeros(1, self.dim));
        DecoderState { h: enc.summary, c, ctx }
    }

    fn action_row(&self, prev: Option<&Action>) -> usize {
        match prev {
            None => self.start_row(),
            Some(Action::ApplyConstr(c)) => c.0,
            Some(Action::Reduce) => self.reduce_col(),
            Some(Action::GenToken(t)) => match self.grammar.token_index(t) {
                Some(i) => self.n_constructors() + 3 + i,
                None => self.unk_token_row(),
            },
        }
    }

    /// Advance the decoder by one step (consuming `prev`, the action taken at
    /// the previous step) and score every candidate at `state`.
    pub fn step_logits(
        &self,
        g: &mut Graph<'_>,
        state: &DerivationState,
        prev: Option<&Action>,
        utt: &Utterance,
        enc: &EncoderOutput,
        dec: DecoderState,
    ) -> Result<(StepLogits, DecoderState), ModelError> {
        let candidates = state.candidate_actions(&self.grammar, &utt.tokens)?;
        let slot = *state.current_slot().expect("incomplete state has a slot");

        let table = g.param("action_embed")?;
        let emb = g.gather(table, &[self.action_row(prev)]);
        let x = g.concat_cols(&[emb, dec.ctx])?;
        let cell = self.lstm(g, "dec")?;
        let (h, c) = Self::lstm_cell(g, &cell, x, dec.h, dec.c)?;

        let wa = g.param("attn/W")?;
        let q = g.matmul(h, wa)?;
        let scores = g.matmul_nt(q, enc.states)?;
        let alpha = g.softmax(scores);
        let ctx = g.matmul(alpha, enc.states)?;

        let hc = g.concat_cols(&[h, ctx])?;
        let wo = g.param("att_out/W")?;
        let bo = g.param("att_out/b")?;
        let att = g.matmul(hc, wo)?;
        let att = g.add(att, bo)?;
        let att = g.tanh(att);

        let wact = g.param("action/W")?;
        let bact = g.param("action/b")?;
        let act = g.matmul(att, wact)?;
        let act = g.add(act, bact)?;

        let has_reduce = candidates.actions.last() == Some(&Action::Reduce);
        let next = DecoderState { h, c, ctx };

        let out = match slot.ty {
            FieldType::Composite(_) => {
                let cols: Vec<usize> = candidates
                    .actions
                    .iter()
                    .map(|a| match a {
                        Action::ApplyConstr(c) => c.0,
                        Action::Reduce => self.reduce_col(),
                        Action::GenToken(_) => unreachable!("token at composite slot"),
                    })
                    .collect();
                let logits = g.pick(act, &cols);
                StepLogits {
                    candidates,
                    local: logits,
                    global: logits,
                    p_copy: None,
                    copy_attention: None,
                }
            }
            FieldType::Token => {
                let n_tok = candidates.len() - usize::from(has_reduce);
                let tokens: Vec<&str> = candidates.actions[..n_tok]
                    .iter()
                    .map(|a| match a {
                        Action::GenToken(t) => t.as_str(),
                        _ => unreachable!("non-token candidate at token slot"),
                    })
                    .collect();
                let (local_tok, global_tok, p_copy, copy_attn) = self.token_logits(g, &tokens, utt, enc, h, att)?;
                let (local, global) = if has_reduce {
                    let emit = g.column_map(act, vec![vec![(self.emit_col(), 1.0)]; n_tok]);
                    let shifted = g.add(local_tok, emit)?;
                    let r = g.pick(act, &[self.reduce_col()]);
                    (g.concat_cols(&[shifted, r])?, g.concat_cols(&[global_tok, r])?)
                } else {
                    (local_tok, global_tok)
                };
                StepLogits {
                    candidates,
                    local,
                    global,
                    p_copy: Some(p_copy),
                    copy_attention: Some(copy_attn),
                }
            }
        };
        Ok((out, next))
    }

    /// Local (log merged probability) and global (interpolated raw logit)
    /// scores for the given candidate tokens.
    fn token_logits(
        &self,
        g: &mut Graph<'_>,
        tokens: &[&str],
        utt: &Utterance,
        enc: &EncoderOutput,
        h: Var,
        att: Var,
    ) -> Result<(Var, Var, Var, Var), ModelError> {
        let k = tokens.len();
        let mut gen_map = Vec::with_capacity(k);
        let mut copy_map = Vec::with_capacity(k);
        let mut both = vec![0.0; k];
        let mut gen_only = vec![0.0; k];
        let mut copy_only = vec![0.0; k];
        for (j, tok) in tokens.iter().enumerate() {
            let gen: Vec<(usize, f64)> = self
                .grammar
                .token_index(tok)
                .map(|i| vec![(i, 1.0)])
                .unwrap_or_default();
            let copy: Vec<(usize, f64)> = utt
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, s)| s == tok)
                .map(|(i, _)| (i, 1.0))
                .collect();
            match (gen.is_empty(), copy.is_empty()) {
                (false, false) => both[j] = 1.0,
                (false, true) => gen_only[j] = 1.0,
                (true, false) => copy_only[j] = 1.0,
                (true, true) => unreachable!("candidate token `{tok}` has no pathway"),
            }
            gen_map.push(gen);
            copy_map.push(copy);
        }

        let wt = g.param("token/W")?;
        let bt = g.param("token/b")?;
        let o_gen = g.matmul(att, wt)?;
        let o_gen = g.add(o_gen, bt)?;
        let wc = g.param("copy/W")?;
        let qc = g.matmul(att, wc)?;
        let o_copy = g.matmul_nt(qc, enc.states)?;
        let wg = g.param("gate/W")?;
        let bg = g.param("gate/b")?;
        let gate = g.matmul(h, wg)?;
        let gate = g.add(gate, bg)?;
        let p_copy = g.sigmoid(gate);
        let p_gen = g.one_minus(p_copy);

        // local: log(p_gen P(v|gen) + p_copy P(v|copy))
        let p_vocab = g.softmax(o_gen);
        let p_src = g.softmax(o_copy);
        let gen_p = g.column_map(p_vocab, gen_map.clone());
        let copy_p = g.column_map(p_src, copy_map.clone());
        let a = g.scale_by(gen_p, p_gen)?;
        let b = g.scale_by(copy_p, p_copy)?;
        let merged = g.add(a, b)?;
        let local = g.log(merged);

        // global: p_gen o(v|gen) + p_copy o(v|copy), gate bypassed when one
        // pathway is absent
        let gen_raw = g.column_map(o_gen, gen_map);
        let copy_raw = g.column_map(o_copy, copy_map);
        let a = g.scale_by(gen_raw, p_gen)?;
        let b = g.scale_by(copy_raw, p_copy)?;
        let interp = g.add(a, b)?;
        let interp = g.mul_const(interp, Tensor::row(both))?;
        let gen_part = g.mul_const(gen_raw, Tensor::row(gen_only))?;
        let copy_part = g.mul_const(copy_raw, Tensor::row(copy_only))?;
        let global = g.add(interp, gen_part)?;
        let global = g.add(global, copy_part)?;

        Ok((local, global, p_copy, p_src))
    }

    /// Teacher-forced scores of a complete action sequence.
    pub fn score_sequence(
        &self,
        g: &mut Graph<'_>,
        utt: &Utterance,
        actions: &[Action],
    ) -> Result<SequenceScore, ModelError> {
        let enc = self.encode(g, utt)?;
        self.score_sequence_with(g, utt, &enc, actions)
    }

    pub fn score_sequence_with(
        &self,
        g: &mut Graph<'_>,
        utt: &Utterance,
        enc: &EncoderOutput,
        actions: &[Action],
    ) -> Result<SequenceScore, ModelError> {
        let mut dec = self.initial_decoder_state(g, enc);
        let mut state = DerivationState::initial(&self.grammar);
        let mut local_terms = Vec::with_capacity(actions.len());
        let mut global_terms = Vec::with_capacity(actions.len());
        let mut prev: Option<&Action> = None;
        for a in actions {
            let (sl, next) = self.step_logits(g, &state, prev, utt, enc, dec)?;
            let pos = sl.candidates.position(a).ok_or_else(|| TransitionError::Illegal {
                step: state.step(),
                action: a.describe(&self.grammar),
            })?;
            let lsm = g.log_softmax(sl.local);
            local_terms.push(g.pick(lsm, &[pos]));
            global_terms.push(g.pick(sl.global, &[pos]));
            state = state.apply(a, &self.grammar, &utt.tokens)?;
            dec = next;
            prev = Some(a);
        }
        if !state.is_complete() {
            return Err(TransitionError::Incomplete(actions.len()).into());
        }
        let l = g.concat_cols(&local_terms)?;
        let local_logprob = g.sum(l);
        let o = g.concat_cols(&global_terms)?;
        let global_mean = g.mean(o);
        let global_sum = g.sum(o);
        Ok(SequenceScore {
            local_logprob,
            global_mean,
            global_sum,
            len: actions.len(),
        })
    }

    /// `Σ_t log P_L(a_t | a_<t, X)`.
    pub fn sequence_local_logprob(
        &self,
        params: &ParamStore,
        utt: &Utterance,
        actions: &[Action],
    ) -> Result<f64, ModelError> {
        let mut g = Graph::new(params);
        let s = self.score_sequence(&mut g, utt, actions)?;
        Ok(g.scalar(s.local_logprob))
    }

    /// Mean raw logit of the taken actions.
    pub fn sequence_global_logit(
        &self,
        params: &ParamStore,
        utt: &Utterance,
        actions: &[Action],
    ) -> Result<f64, ModelError> {
        let mut g = Graph::new(params);
        let s = self.score_sequence(&mut g, utt, actions)?;
        Ok(g.scalar(s.global_mean))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SequenceScore {
    pub local_logprob: Var,
    pub global_mean: Var,
    pub global_sum: Var,
    pub len: usize,
}

/// Softmax over a step's local logits.
pub fn local_step_distribution(g: &mut Graph<'_>, sl: &StepLogits) -> Vec<f64> {
    let p = g.softmax(sl.local);
    g.value(p).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_grammar;

    fn model(dim: usize) -> Model {
        let g = parse_grammar("root Stmt\nStmt = UseId(token name) | UseKw(Kw k)\nKw = A() | B()")
            .unwrap()
            .with_token_vocab(["x", "y"])
            .unwrap();
        Model::new(g, Vocab::new(["use", "x", "y", "z"]), dim).unwrap()
    }

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn copy_probability_examples() {
        assert!((copy_merged_probability(0.7, 0.5, 0.2).unwrap() - 0.41).abs() < 1e-15);
        assert_eq!(copy_merged_probability(1.0, 0.3, 0.9).unwrap(), 0.3);
        assert_eq!(copy_merged_probability(0.6, 0.5, 0.0).unwrap(), 0.6 * 0.5);
        assert!(copy_merged_probability(1.2, 0.5, 0.0).is_err());
        assert!(copy_merged_probability(0.2, -0.5, 0.0).is_err());
    }

    #[test]
    fn copy_logit_examples() {
        assert_eq!(copy_merged_logit(1.0, -1.5, Some(7.0)).unwrap(), -1.5);
        assert_eq!(copy_merged_logit(0.5, 2.0, Some(4.0)).unwrap(), 3.0);
        assert_eq!(copy_merged_logit(0.3, 2.0, None).unwrap(), 2.0);
        assert!(copy_merged_logit(-0.1, 2.0, None).is_err());
    }

    #[test]
    fn encoder_shapes() {
        let m = model(64);
        let p = m.init_params(1);
        let mut g = Graph::new(&p);
        let utt = m.utterance(&toks(&["use", "x", "q", "y", "z"])).unwrap();
        let enc = m.encode(&mut g, &utt).unwrap();
        assert_eq!(g.value(enc.states).shape(), [5, 64]);
        assert_eq!(g.value(enc.summary).shape(), [1, 64]);
        assert!(m.utterance(&[]).is_err());
    }

    #[test]
    fn single_token_summary_projects_its_state() {
        let m = model(8);
        let p = m.init_params(3);
        let mut g = Graph::new(&p);
        let utt = m.utterance(&toks(&["x"])).unwrap();
        let enc = m.encode(&mut g, &utt).unwrap();
        assert_eq!(g.value(enc.states).shape(), [1, 8]);
        let w = p.get("enc_summary/W").unwrap();
        let b = p.get("enc_summary/b").unwrap();
        let st = g.value(enc.states).row_slice(0).to_vec();
        for j in 0..8 {
            let pre: f64 = (0..8).map(|i| st[i] * w.get(i, j)).sum::<f64>() + b.get(0, j);
            assert!((pre.tanh() - g.value(enc.summary).get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_deterministic() {
        let m = model(16);
        let p1 = m.init_params(9);
        let p2 = m.init_params(9);
        let utt = m.utterance(&toks(&["use", "x"])).unwrap();
        let mut g1 = Graph::new(&p1);
        let mut g2 = Graph::new(&p2);
        let e1 = m.encode(&mut g1, &utt).unwrap();
        let e2 = m.encode(&mut g2, &utt).unwrap();
        assert_eq!(g1.value(e1.states), g2.value(e2.states));
    }

    #[test]
    fn step_logits_align_with_candidates() {
        let m = model(8);
        let p = m.init_params(2);
        let mut g = Graph::new(&p);
        let utt = m.utterance(&toks(&["use", "q", "x", "q"])).unwrap();
        let enc = m.encode(&mut g, &utt).unwrap();
        let dec = m.initial_decoder_state(&mut g, &enc);
        let s0 = DerivationState::initial(m.grammar());
        let (sl, dec) = m.step_logits(&mut g, &s0, None, &utt, &enc, dec).unwrap();
        assert_eq!(sl.candidates.len(), 2);
        assert_eq!(g.value(sl.local).cols(), 2);

        let use_id = Action::ApplyConstr(crate::grammar::ConstructorId(0));
        let s1 = s0.apply(&use_id, m.grammar(), &utt.tokens).unwrap();
        let (sl, _) = m.step_logits(&mut g, &s1, Some(&use_id), &utt, &enc, dec).unwrap();
        // </f>, x, y from the vocabulary plus the source-only `use` and `q`
        assert_eq!(sl.candidates.len(), 5);
        assert_eq!(g.value(sl.global).cols(), 5);
        let dist = local_step_distribution(&mut g, &sl);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let attn = g.value(sl.copy_attention.unwrap()).sum();
        assert!((attn - 1.0).abs() < 1e-12);
        // local logits are already log-probabilities at a token slot
        let lp: f64 = g.value(sl.local).data().iter().map(|x| x.exp()).sum();
        assert!((lp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_check_lists_offenders() {
        let small = model(8);
        let big = model(16);
        let p = small.init_params(0);
        match big.check_params(&p) {
            Err(ModelError::ParamMismatch(names)) => {
                assert!(names.iter().any(|n| n.starts_with("src_embed")));
            }
            other => panic!("unexpected {other:?}"),
        }
        small.check_params(&p).unwrap();
    }
}
