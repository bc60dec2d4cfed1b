//! Grammar-constrained beam search and exhaustive enumeration.
//!
//! Both rank complete derivations by their mean per-step score: mean local
//! log-probability in [`ScoreMode::Local`], mean raw logit in
//! [`ScoreMode::Global`]. Ties fall back to the action sequences' derived
//! order. The exhaustive oracle additionally computes the partition function
//! over raw-logit sums.

use std::cmp::Ordering;

use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::model::{DecoderState, EncoderOutput, Model, ModelError, ScoreMode, Utterance};
use crate::transition::{Action, DerivationState};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no hypothesis completed within {max_steps} steps ({} partial)", .partials.len())]
    NoCompletion {
        max_steps: usize,
        partials: Vec<Hypothesis>,
    },
    #[error("enumeration exceeded {0} complete derivations")]
    TooManyDerivations(usize),
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A (possibly partial) derivation with incrementally maintained scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub state: DerivationState,
    pub actions: Vec<Action>,
    /// Sum of raw logits of the taken actions.
    pub sum_logits: f64,
    /// Sum of local log-probabilities of the taken actions.
    pub sum_local_logprob: f64,
}

impl Hypothesis {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Length-normalized ranking key.
    pub fn key(&self, mode: ScoreMode) -> f64 {
        mean_key(mode, self.sum_local_logprob, self.sum_logits, self.len())
    }

    pub fn mean_logit(&self) -> f64 {
        self.sum_logits / self.len().max(1) as f64
    }
}

fn mean_key(mode: ScoreMode, local: f64, raw: f64, len: usize) -> f64 {
    let n = len.max(1) as f64;
    match mode {
        ScoreMode::Local => local / n,
        ScoreMode::Global => raw / n,
    }
}

/// Descending key, then ascending action sequence.
fn rank_order(ka: f64, a: &[Action], kb: f64, b: &[Action]) -> Ordering {
    kb.total_cmp(&ka).then_with(|| a.cmp(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    pub mode: ScoreMode,
    pub max_steps: usize,
}

impl BeamConfig {
    pub fn new(width: usize, mode: ScoreMode, max_steps: usize) -> Self {
        BeamConfig { width, mode, max_steps }
    }
}

/// `10 × source length + 20`.
pub fn default_max_steps(source_len: usize) -> usize {
    10 * source_len + 20
}

struct Live {
    hyp: Hypothesis,
    dec: DecoderState,
    trace: Vec<(Var, usize)>,
}

/// A finished hypothesis together with, for each step, the graph node
/// holding that step's raw logits and the index of the taken candidate.
pub struct Traced {
    pub hyp: Hypothesis,
    pub trace: Vec<(Var, usize)>,
}

/// Beam search over complete derivations. Finished hypotheses leave the
/// beam; each step keeps `width - finished` live hypotheses. Returns the
/// finished pool sorted best first.
pub fn beam_search(
    model: &Model,
    params: &ParamStore,
    utt: &Utterance,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, SearchError> {
    let mut g = Graph::new(params);
    let enc = model.encode(&mut g, utt)?;
    Ok(beam_search_traced(&mut g, model, utt, &enc, cfg)?
        .into_iter()
        .map(|t| t.hyp)
        .collect())
}

/// [`beam_search`] inside a caller-owned graph, so the step logits of the
/// returned hypotheses can be differentiated without rescoring.
pub fn beam_search_traced(
    g: &mut Graph<'_>,
    model: &Model,
    utt: &Utterance,
    enc: &EncoderOutput,
    cfg: &BeamConfig,
) -> Result<Vec<Traced>, SearchError> {
    if cfg.width == 0 {
        return Err(SearchError::ZeroWidth);
    }
    let spec = model.grammar();
    let dec0 = model.initial_decoder_state(g, enc);
    let mut live = vec![Live {
        hyp: Hypothesis {
            state: DerivationState::initial(spec),
            actions: Vec::new(),
            sum_logits: 0.0,
            sum_local_logprob: 0.0,
        },
        dec: dec0,
        trace: Vec::new(),
    }];
    let mut finished: Vec<Traced> = Vec::new();

    struct Expansion {
        parent: usize,
        index: usize,
        action: Action,
        raw: f64,
        local: f64,
        key: f64,
        logits: Var,
        dec: DecoderState,
    }

    for _ in 0..cfg.max_steps {
        if live.is_empty() || finished.len() >= cfg.width {
            break;
        }
        let mut expansions: Vec<Expansion> = Vec::new();
        for (pi, l) in live.iter().enumerate() {
            let (sl, next) = model.step_logits(g, &l.hyp.state, l.hyp.actions.last(), utt, enc, l.dec)?;
            let lsm = g.log_softmax(sl.local);
            let local = g.value(lsm).data().to_vec();
            let raw = g.value(sl.global).data().to_vec();
            let n = l.hyp.len() + 1;
            for (j, a) in sl.candidates.actions.into_iter().enumerate() {
                let local_sum = l.hyp.sum_local_logprob + local[j];
                let raw_sum = l.hyp.sum_logits + raw[j];
                expansions.push(Expansion {
                    parent: pi,
                    index: j,
                    action: a,
                    raw: raw_sum,
                    local: local_sum,
                    key: mean_key(cfg.mode, local_sum, raw_sum, n),
                    logits: sl.global,
                    dec: next,
                });
            }
        }
        let keep = cfg.width - finished.len();
        // by key, then by the resulting full action sequence
        expansions.sort_by(|x, y| {
            y.key.total_cmp(&x.key).then_with(|| {
                let px = &live[x.parent].hyp.actions;
                let py = &live[y.parent].hyp.actions;
                px.iter()
                    .chain(std::iter::once(&x.action))
                    .cmp(py.iter().chain(std::iter::once(&y.action)))
            })
        });
        expansions.truncate(keep);

        let mut next_live = Vec::with_capacity(expansions.len());
        for e in expansions {
            let parent = &live[e.parent];
            let state = parent
                .hyp
                .state
                .apply(&e.action, spec, &utt.tokens)
                .map_err(ModelError::from)?;
            let mut actions = parent.hyp.actions.clone();
            actions.push(e.action);
            let mut trace = parent.trace.clone();
            trace.push((e.logits, e.index));
            let hyp = Hypothesis {
                state,
                actions,
                sum_logits: e.raw,
                sum_local_logprob: e.local,
            };
            if hyp.state.is_complete() {
                finished.push(Traced { hyp, trace });
            } else {
                next_live.push(Live { hyp, dec: e.dec, trace });
            }
        }
        live = next_live;
    }

    if finished.is_empty() {
        return Err(SearchError::NoCompletion {
            max_steps: cfg.max_steps,
            partials: live.into_iter().map(|l| l.hyp).collect(),
        });
    }
    finished.sort_by(|a, b| rank_order(a.hyp.key(cfg.mode), &a.hyp.actions, b.hyp.key(cfg.mode), &b.hyp.actions));
    Ok(finished)
}

/// One complete derivation found by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivation {
    pub actions: Vec<Action>,
    pub sum_logits: f64,
    pub sum_local_logprob: f64,
}

impl Derivation {
    pub fn key(&self, mode: ScoreMode) -> f64 {
        mean_key(mode, self.sum_local_logprob, self.sum_logits, self.actions.len())
    }
}

/// Every complete derivation with its scores and exact global probability.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// Sorted by global probability (raw-logit sum), best first.
    pub derivations: Vec<Derivation>,
    /// `Σ exp(sum_logits)`.
    pub z: f64,
    /// `exp(sum_logits) / z`, aligned with `derivations`.
    pub global_probs: Vec<f64>,
}

impl OracleReport {
    fn from_derivations(mut derivations: Vec<Derivation>) -> Self {
        derivations.sort_by(|a, b| rank_order(a.sum_logits, &a.actions, b.sum_logits, &b.actions));
        let z: f64 = derivations.iter().map(|d| d.sum_logits.exp()).sum();
        let global_probs = derivations.iter().map(|d| d.sum_logits.exp() / z).collect();
        OracleReport {
            derivations,
            z,
            global_probs,
        }
    }

    /// Derivations ordered as beam search would rank them under `mode`.
    pub fn ranked(&self, mode: ScoreMode) -> Vec<&Derivation> {
        let mut out: Vec<&Derivation> = self.derivations.iter().collect();
        out.sort_by(|a, b| rank_order(a.key(mode), &a.actions, b.key(mode), &b.actions));
        out
    }

    pub fn argmax(&self, mode: ScoreMode) -> Option<&Derivation> {
        self.ranked(mode).into_iter().next()
    }

    /// Total local probability mass over all enumerated derivations.
    pub fn local_mass(&self) -> f64 {
        self.derivations.iter().map(|d| d.sum_local_logprob.exp()).sum()
    }

    /// Same derivations with every raw logit multiplied by `k`.
    pub fn with_scaled_logits(&self, k: f64) -> OracleReport {
        OracleReport::from_derivations(
            self.derivations
                .iter()
                .map(|d| Derivation {
                    sum_logits: d.sum_logits * k,
                    ..d.clone()
                })
                .collect(),
        )
    }
}

pub const DEFAULT_ENUMERATION_LIMIT: usize = 100_000;

/// Depth-first enumeration of every complete derivation of at most
/// `max_steps` actions. Step scores are computed once per shared prefix.
pub fn exhaustive_derivations(
    model: &Model,
    params: &ParamStore,
    utt: &Utterance,
    max_steps: usize,
    limit: usize,
) -> Result<OracleReport, SearchError> {
    let mut g = Graph::new(params);
    let enc = model.encode(&mut g, utt)?;
    let dec = model.initial_decoder_state(&mut g, &enc);
    let mut out = Vec::new();
    let mut walker = Walker {
        model,
        utt,
        enc: &enc,
        max_steps,
        limit,
        out: &mut out,
    };
    let mut prefix = Vec::new();
    walker.visit(
        &mut g,
        &DerivationState::initial(model.grammar()),
        &mut prefix,
        dec,
        0.0,
        0.0,
    )?;
    Ok(OracleReport::from_derivations(out))
}

struct Walker<'a> {
    model: &'a Model,
    utt: &'a Utterance,
    enc: &'a EncoderOutput,
    max_steps: usize,
    limit: usize,
    out: &'a mut Vec<Derivation>,
}

impl Walker<'_> {
    fn visit(
        &mut self,
        g: &mut Graph<'_>,
        state: &DerivationState,
        prefix: &mut Vec<Action>,
        dec: DecoderState,
        raw: f64,
        local: f64,
    ) -> Result<(), SearchError> {
        if state.is_complete() {
            if self.out.len() >= self.limit {
                return Err(SearchError::TooManyDerivations(self.limit));
            }
            self.out.push(Derivation {
                actions: prefix.clone(),
                sum_logits: raw,
                sum_local_logprob: local,
            });
            return Ok(());
        }
        if prefix.len() >= self.max_steps {
            return Ok(());
        }
        let (sl, next) = self
            .model
            .step_logits(g, state, prefix.last(), self.utt, self.enc, dec)?;
        let lsm = g.log_softmax(sl.local);
        let lp = g.value(lsm).data().to_vec();
        let o = g.value(sl.global).data().to_vec();
        for (j, a) in sl.candidates.actions.into_iter().enumerate() {
            let child = state
                .apply(&a, self.model.grammar(), &self.utt.tokens)
                .map_err(ModelError::from)?;
            prefix.push(a);
            self.visit(g, &child, prefix, next, raw + o[j], local + lp[j])?;
            prefix.pop();
        }
        Ok(())
    }
}
