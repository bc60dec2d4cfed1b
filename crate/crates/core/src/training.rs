//! Locally normalized MLE and globally normalized max-margin training.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, clip_grad_norm, AdamConfig, AdamState, Graph, ParamStore, Tensor, TensorError, Var};
use crate::checkpoint::{self, CheckpointError};
use crate::corpus::Example;
use crate::grammar::{parse_grammar, GrammarError, GrammarSpec};
use crate::metrics::{evaluate, EvalReport, Scored};
use crate::model::{Model, ModelError, ScoreMode, Utterance, Vocab};
use crate::named_rng;
use crate::search::{beam_search, beam_search_traced, default_max_steps, BeamConfig, SearchError, Traced};
use crate::transition::{actions_to_ast, ActionSequence};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("global training needs a warm-start checkpoint or an explicit cold start")]
    MissingWarmStart,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no reachable training examples")]
    NoExamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("{path}: {message}")]
    Meta { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: ScoreMode,
    pub lr: f64,
    /// Hinge margin, must be positive.
    pub margin: f64,
    pub neg_beam_width: usize,
    pub eval_beam_width: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a dev improvement; 0 disables.
    pub patience: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub dim: usize,
}

impl TrainingConfig {
    pub fn local() -> Self {
        TrainingConfig {
            mode: ScoreMode::Local,
            lr: 5e-4,
            margin: 0.1,
            neg_beam_width: 20,
            eval_beam_width: 5,
            epochs: 200,
            patience: 20,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 1,
            dim: 64,
        }
    }

    pub fn global() -> Self {
        TrainingConfig {
            mode: ScoreMode::Global,
            epochs: 50,
            patience: 10,
            ..Self::local()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.mode == ScoreMode::Global && self.neg_beam_width < 2 {
            return bad("negative beam width must be at least 2 in global mode");
        }
        if self.batch_size == 0 || self.eval_beam_width == 0 {
            return bad("batch size and beam widths must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `max(0, o_neg - o_pos + margin)`.
pub fn max_margin_loss(o_neg: f64, o_pos: f64, margin: f64) -> f64 {
    (o_neg - o_pos + margin).max(0.0)
}

/// Negative local log-likelihood of `actions`.
pub fn mle_loss(
    g: &mut Graph<'_>,
    model: &Model,
    utt: &Utterance,
    actions: &[crate::transition::Action],
) -> Result<Var, ModelError> {
    let s = model.score_sequence(g, utt, actions)?;
    Ok(g.scale(s.local_logprob, -1.0))
}

/// Non-gold finished hypotheses of a global-mode beam, best first.
pub fn mine_negatives(
    model: &Model,
    params: &ParamStore,
    utt: &Utterance,
    gold: &[crate::transition::Action],
    width: usize,
) -> Result<Vec<ActionSequence>, SearchError> {
    let cfg = BeamConfig::new(width, ScoreMode::Global, default_max_steps(utt.len()));
    let finished = beam_search(model, params, utt, &cfg)?;
    Ok(finished
        .into_iter()
        .filter(|h| h.actions != gold)
        .map(|h| h.actions)
        .collect())
}

/// Mean hinge over `negatives`, each scored by its own mean raw logit, with
/// the gold sequence teacher-forced. Returns the loss and the number of
/// active hinges.
pub fn margin_loss(
    g: &mut Graph<'_>,
    model: &Model,
    utt: &Utterance,
    gold: &[crate::transition::Action],
    negatives: &[ActionSequence],
    margin: f64,
) -> Result<(Var, usize), ModelError> {
    assert!(!negatives.is_empty(), "margin loss needs negatives");
    let enc = model.encode(g, utt)?;
    let pos = model.score_sequence_with(g, utt, &enc, gold)?.global_mean;
    let mut terms = Vec::with_capacity(negatives.len());
    let mut active = 0;
    for neg in negatives {
        let o = model.score_sequence_with(g, utt, &enc, neg)?.global_mean;
        let d = g.sub(o, pos)?;
        let d = g.add_const(d, margin);
        if g.scalar(d) > 0.0 {
            active += 1;
        }
        terms.push(g.max_const(d, 0.0));
    }
    let all = g.concat_cols(&terms)?;
    Ok((g.mean(all), active))
}

/// Outcome of one example's loss computation.
#[derive(Debug, Clone)]
pub struct ExampleLoss {
    pub loss: f64,
    pub grads: Option<Vec<Tensor>>,
    pub hinges: usize,
    pub active: usize,
}

fn zero_grads(params: &ParamStore) -> Vec<Tensor> {
    params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect()
}

/// Loss and gradient for one example under `cfg.mode`. Global examples with
/// no negatives return `None`.
pub fn example_loss(
    model: &Model,
    params: &ParamStore,
    ex: &Example,
    cfg: &TrainingConfig,
) -> Result<Option<ExampleLoss>, TrainError> {
    let utt = model.utterance(&ex.src)?;
    let mut g = Graph::new(params);
    match cfg.mode {
        ScoreMode::Local => {
            let loss = mle_loss(&mut g, model, &utt, &ex.tgt_actions)?;
            let grads = g.backward(loss)?;
            Ok(Some(ExampleLoss {
                loss: g.scalar(loss),
                grads: Some(grads),
                hinges: 0,
                active: 0,
            }))
        }
        ScoreMode::Global => {
            // Negatives are scored from the beam's own graph nodes; only gold
            // is teacher-forced.
            let enc = model.encode(&mut g, &utt)?;
            let bc = BeamConfig::new(cfg.neg_beam_width, ScoreMode::Global, default_max_steps(utt.len()));
            let negs: Vec<Traced> = beam_search_traced(&mut g, model, &utt, &enc, &bc)?
                .into_iter()
                .filter(|t| t.hyp.actions != ex.tgt_actions)
                .collect();
            if negs.is_empty() {
                return Ok(None);
            }
            let pos = model
                .score_sequence_with(&mut g, &utt, &enc, &ex.tgt_actions)?
                .global_mean;
            let mut terms = Vec::with_capacity(negs.len());
            let mut active = 0;
            for t in &negs {
                let picks: Vec<Var> = t.trace.iter().map(|&(v, j)| g.pick(v, &[j])).collect();
                let all = g.concat_cols(&picks)?;
                let o = g.mean(all);
                let d = g.sub(o, pos)?;
                let d = g.add_const(d, cfg.margin);
                if g.scalar(d) > 0.0 {
                    active += 1;
                }
                terms.push(g.max_const(d, 0.0));
            }
            let all = g.concat_cols(&terms)?;
            let loss = g.mean(all);
            let value = g.scalar(loss);
            // an inactive hinge has an exactly zero gradient
            let grads = if value > 0.0 { Some(g.backward(loss)?) } else { None };
            Ok(Some(ExampleLoss {
                loss: value,
                grads,
                hinges: negs.len(),
                active,
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOutcome {
    /// Mean loss over contributing examples.
    pub loss: f64,
    pub examples: usize,
    pub skipped: usize,
    pub hinges: usize,
    pub active: usize,
    pub updated: bool,
}

/// One optimizer step on `batch`. Per-example work runs in parallel and is
/// reduced in batch order. A batch whose loss is exactly zero leaves the
/// parameters and optimizer state untouched.
pub fn train_step(
    model: &Model,
    params: &mut ParamStore,
    adam: &mut AdamState,
    batch: &[&Example],
    cfg: &TrainingConfig,
) -> Result<StepOutcome, TrainError> {
    let snapshot: &ParamStore = params;
    let results: Vec<Option<ExampleLoss>> = batch
        .par_iter()
        .map(|ex| example_loss(model, snapshot, ex, cfg))
        .collect::<Result<_, _>>()?;

    let mut out = StepOutcome::default();
    let mut grads = zero_grads(params);
    let mut total = 0.0;
    for r in results {
        let Some(r) = r else {
            out.skipped += 1;
            continue;
        };
        out.examples += 1;
        out.hinges += r.hinges;
        out.active += r.active;
        total += r.loss;
        if let Some(eg) = r.grads {
            for (acc, gi) in grads.iter_mut().zip(&eg) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b;
                }
            }
        }
    }
    if out.examples == 0 {
        return Ok(out);
    }
    let n = out.examples as f64;
    out.loss = total / n;
    if out.loss == 0.0 {
        return Ok(out);
    }
    for gt in &mut grads {
        for x in gt.data_mut() {
            *x /= n;
        }
    }
    clip_grad_norm(&mut grads, cfg.clip_norm);
    adam_step(params, &grads, adam, &cfg.adam())?;
    out.updated = true;
    Ok(out)
}

/// Single-example global update: mine, score, and step.
pub fn global_step(
    model: &Model,
    params: &mut ParamStore,
    adam: &mut AdamState,
    ex: &Example,
    cfg: &TrainingConfig,
) -> Result<StepOutcome, TrainError> {
    let cfg = TrainingConfig {
        mode: ScoreMode::Global,
        ..cfg.clone()
    };
    train_step(model, params, adam, &[ex], &cfg)
}

/// Decode every example with beam search and score the predictions.
pub fn evaluate_corpus(
    model: &Model,
    params: &ParamStore,
    examples: &[Example],
    mode: ScoreMode,
    width: usize,
    per_example: bool,
) -> EvalReport {
    let preds = decode_all(model, params, examples.iter().map(|e| e.src.as_slice()), mode, width);
    let items: Vec<Scored<'_>> = examples
        .iter()
        .zip(&preds)
        .map(|(e, p)| Scored {
            gold: &e.tgt_ast,
            predicted: p.as_ref().map(|(_, ast)| ast),
        })
        .collect();
    evaluate(model.grammar(), &items, per_example)
}

/// Top-1 derivation per utterance, `None` when decoding fails. Order
/// follows the input.
pub fn decode_all<'a>(
    model: &Model,
    params: &ParamStore,
    sources: impl Iterator<Item = &'a [String]>,
    mode: ScoreMode,
    width: usize,
) -> Vec<Option<(ActionSequence, crate::ast::AstNode)>> {
    let sources: Vec<&[String]> = sources.collect();
    sources
        .par_iter()
        .map(|src| {
            let utt = model.utterance(src).ok()?;
            let cfg = BeamConfig::new(width, mode, default_max_steps(utt.len()));
            let best = beam_search(model, params, &utt, &cfg).ok()?.into_iter().next()?;
            let ast = actions_to_ast(&best.actions, model.grammar()).ok()?;
            Some((best.actions, ast))
        })
        .collect()
}

/// One JSON-Lines record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: ScoreMode,
    pub loss: f64,
    /// Fraction of mined hinges that were active; `null` in local mode.
    pub active_hinge_frac: Option<f64>,
    pub dev_em: f64,
    pub dev_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Global-mode example visits skipped because the beam held only gold.
    pub skipped: usize,
    pub wall_clock_secs: f64,
}

impl TrainStats {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub params: ParamStore,
    pub stats: TrainStats,
}

/// Train from `init`, keeping the parameters of the epoch with the highest
/// dev exact match (earliest on ties). Training examples whose gold tokens
/// can be neither generated nor copied are dropped with a warning.
pub fn train(
    model: &Model,
    init: ParamStore,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.check_params(&init)?;
    let start = Instant::now();
    let usable: Vec<&Example> = train_set.iter().filter(|e| e.is_reachable(model.grammar())).collect();
    if usable.len() < train_set.len() {
        log::warn!(
            "dropped {} unreachable training examples",
            train_set.len() - usable.len()
        );
    }
    if usable.is_empty() {
        return Err(TrainError::NoExamples);
    }

    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut order_rng = named_rng(cfg.seed, &format!("train/{}/order", cfg.mode));
    let mut stats = TrainStats::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut counted, mut hinges, mut active) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| usable[i]).collect();
            let out = train_step(model, &mut params, &mut adam, &batch, cfg)?;
            loss_sum += out.loss * out.examples as f64;
            counted += out.examples;
            hinges += out.hinges;
            active += out.active;
            stats.skipped += out.skipped;
        }
        let report = evaluate_corpus(model, &params, dev_set, cfg.mode, cfg.eval_beam_width, false);
        let rec = EpochRecord {
            epoch,
            mode: cfg.mode,
            loss: if counted == 0 { 0.0 } else { loss_sum / counted as f64 },
            active_hinge_frac: match cfg.mode {
                ScoreMode::Local => None,
                ScoreMode::Global => Some(if hinges == 0 {
                    0.0
                } else {
                    active as f64 / hinges as f64
                }),
            },
            dev_em: report.exact_match,
            dev_bleu: report.bleu,
        };
        log::info!(
            "epoch {epoch} {} loss {:.6} dev_em {:.4} dev_bleu {:.4}",
            cfg.mode,
            rec.loss,
            rec.dev_em,
            rec.dev_bleu
        );
        stats.epochs.push(rec);
        if best.as_ref().is_none_or(|(em, _)| report.exact_match > *em) {
            best = Some((report.exact_match, params.clone()));
            stats.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::info!("no dev improvement for {since_best} epochs, stopping");
                break;
            }
        }
    }
    stats.wall_clock_secs = start.elapsed().as_secs_f64();
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok(TrainOutcome { params, stats })
}

/// Everything besides parameters needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub mode: ScoreMode,
    pub dim: usize,
    pub grammar: String,
    pub token_vocab: Vec<String>,
    pub src_vocab: Vocab,
}

impl ModelMeta {
    pub fn of(model: &Model, mode: ScoreMode) -> Self {
        ModelMeta {
            mode,
            dim: model.dim(),
            grammar: model.grammar().render(),
            token_vocab: model.grammar().token_vocab().to_vec(),
            src_vocab: model.src_vocab().clone(),
        }
    }

    pub fn build(&self) -> Result<Model, TrainError> {
        let spec: GrammarSpec = parse_grammar(&self.grammar)?.with_token_vocab(self.token_vocab.iter().cloned())?;
        Ok(Model::new(spec, self.src_vocab.clone(), self.dim)?)
    }
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write the checkpoint and its `.meta.json` sidecar.
pub fn save_model(path: &Path, model: &Model, params: &ParamStore, mode: ScoreMode) -> Result<(), TrainError> {
    checkpoint::save(params, path)?;
    let meta = serde_json::to_string_pretty(&ModelMeta::of(model, mode)).expect("serializable") + "\n";
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| TrainError::Meta {
        path: mp,
        message: e.to_string(),
    })
}

pub fn load_model(path: &Path) -> Result<(Model, ParamStore, ModelMeta), TrainError> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| TrainError::Meta {
        path: mp.clone(),
        message: e.to_string(),
    })?;
    let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| TrainError::Meta {
        path: mp,
        message: e.to_string(),
    })?;
    let model = meta.build()?;
    let params = checkpoint::load(path)?;
    model.check_params(&params)?;
    Ok((model, params, meta))
}

/// Load a local checkpoint as the global model's initial parameters,
/// checking every tensor name and shape against `model`.
pub fn init_global_from_local(local_ckpt: &Path, model: &Model) -> Result<ParamStore, TrainError> {
    let params = checkpoint::load(local_ckpt)?;
    model.check_params(&params)?;
    Ok(params)
}
