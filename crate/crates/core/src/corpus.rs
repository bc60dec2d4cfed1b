//! JSON-Lines datasets and the synthetic label-bias benchmark.
//!
//! Each line is `{"src": [...], "tgt": "<S-expression>"}`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{parse_sexpr, AstNode};
use crate::grammar::{parse_grammar, GrammarSpec, END_OF_FIELD};
use crate::model::Vocab;
use crate::named_rng;
use crate::transition::{ast_to_actions, replay, Action, ActionSequence};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Target { path: PathBuf, line: usize, reason: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub src: Vec<String>,
    pub tgt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<String>,
    pub tgt_sexpr: String,
    pub tgt_ast: AstNode,
    pub tgt_actions: ActionSequence,
}

impl Example {
    pub fn from_raw(raw: RawExample, spec: &GrammarSpec) -> Result<Self, String> {
        if raw.src.is_empty() {
            return Err("empty source utterance".into());
        }
        let ast = parse_sexpr(&raw.tgt, spec).map_err(|e| e.to_string())?;
        let actions = ast_to_actions(&ast, spec).map_err(|e| e.to_string())?;
        Ok(Example {
            src: raw.src,
            tgt_sexpr: raw.tgt,
            tgt_ast: ast,
            tgt_actions: actions,
        })
    }

    /// Whether every gold token is generable or copyable under `spec`.
    pub fn is_reachable(&self, spec: &GrammarSpec) -> bool {
        replay(&self.tgt_actions, spec, &self.src).is_ok_and(|s| s.is_complete())
    }

    /// Target tokens, excluding the end-of-field marker.
    pub fn target_tokens(&self) -> impl Iterator<Item = &str> {
        self.tgt_actions.iter().filter_map(|a| match a {
            Action::GenToken(t) if t != END_OF_FIELD => Some(t.as_str()),
            _ => None,
        })
    }
}

/// Parse and validate every line. Blank lines are skipped.
pub fn load_jsonl(path: &Path, spec: &GrammarSpec) -> Result<Vec<Example>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        let ex = Example::from_raw(raw, spec).map_err(|reason| CorpusError::Target {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        })?;
        out.push(ex);
    }
    if out.is_empty() {
        log::warn!("{}: empty corpus", path.display());
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, rows: &[RawExample]) -> Result<(), CorpusError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_grammar(path: &Path) -> Result<GrammarSpec, Box<dyn std::error::Error + Send + Sync>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_grammar(&text)?)
}

pub const DEFAULT_CUTOFF: usize = 2;

fn frequent<'a>(tokens: impl Iterator<Item = &'a str>, cutoff: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= cutoff)
        .map(|(t, _)| t.to_string())
        .collect()
}

/// Target tokens seen at least `cutoff` times, sorted; rarer tokens are
/// reachable only by copying.
pub fn build_token_vocab(examples: &[Example], cutoff: usize) -> Vec<String> {
    frequent(examples.iter().flat_map(Example::target_tokens), cutoff)
}

/// Source tokens seen at least `cutoff` times.
pub fn build_src_vocab(examples: &[Example], cutoff: usize) -> Vocab {
    Vocab::new(frequent(
        examples.iter().flat_map(|e| e.src.iter().map(String::as_str)),
        cutoff,
    ))
}

pub const LABEL_BIAS_GRAMMAR: &str = "root Stmt\nStmt = UseId(token name) | UseKw(Kw k)\nKw = A() | B()\n";

const VERBS: [&str; 4] = ["use", "take", "pick", "get"];
const FILLERS: [&str; 6] = ["the", "a", "value", "please", "now", "then"];
const KEYWORD_CUES: [(&str, &str); 4] = [("alpha", "A"), ("first", "A"), ("beta", "B"), ("second", "B")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Size K of the identifier pool.
    pub identifier_pool: usize,
    /// Fraction of targets using the identifier branch.
    pub branch_prior: f64,
    /// Per-slot probability of a distractor token in the source.
    pub noise: f64,
    /// Fraction of the pool reserved for dev/test.
    pub held_out: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 500,
            n_dev: 100,
            n_test: 200,
            identifier_pool: 50,
            branch_prior: 0.8,
            noise: 0.3,
            held_out: 0.2,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.identifier_pool < 10 {
            return bad("identifier_pool must be at least 10");
        }
        if !(self.branch_prior > 0.0 && self.branch_prior < 1.0) {
            return bad("branch_prior must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        if !(self.held_out > 0.0 && self.held_out < 1.0) {
            return bad("held_out must lie strictly between 0 and 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthData {
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub test: Vec<RawExample>,
    /// Identifiers that never occur in `train`.
    pub held_out: Vec<String>,
}

fn quote(t: &str) -> String {
    format!("\"{}\"", t.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Generate the three splits in memory. Sources are `verb cue distractor*`.
/// Training identifiers come from the first `1 - held_out` of a shuffled
/// pool; dev/test draw from the whole pool.
pub fn generate_label_bias(spec: &SynthSpec) -> Result<SynthData, CorpusError> {
    spec.validate()?;
    let mut pool: Vec<String> = (0..spec.identifier_pool).map(|i| format!("v{i:02}")).collect();
    pool.shuffle(&mut named_rng(spec.seed, "synth/pool"));
    let n_held = ((spec.identifier_pool as f64 * spec.held_out).round() as usize).max(1);
    let split = spec.identifier_pool - n_held;
    let (train_pool, held) = pool.split_at(split);

    let make = |n: usize, ids: &[String], stream: &str| -> Vec<RawExample> {
        let mut rng = named_rng(spec.seed, stream);
        (0..n)
            .map(|_| {
                let verb = VERBS[rng.gen_range(0..VERBS.len())];
                let use_id = rng.gen_bool(spec.branch_prior);
                let (cue, tgt) = if use_id {
                    let id = &ids[rng.gen_range(0..ids.len())];
                    (id.clone(), format!("(UseId (tok {}))", quote(id)))
                } else {
                    let (cue, kw) = KEYWORD_CUES[rng.gen_range(0..KEYWORD_CUES.len())];
                    (cue.to_string(), format!("(UseKw ({kw}))"))
                };
                // The cue always follows the verb; distractors after it may
                // be fillers, other identifiers or other keyword cues.
                let mut src = vec![verb.to_string(), cue];
                for _ in 0..3 {
                    if rng.gen_bool(spec.noise) {
                        let t = match rng.gen_range(0..3) {
                            0 => FILLERS[rng.gen_range(0..FILLERS.len())].to_string(),
                            1 => ids[rng.gen_range(0..ids.len())].clone(),
                            _ => KEYWORD_CUES[rng.gen_range(0..KEYWORD_CUES.len())].0.to_string(),
                        };
                        src.push(t);
                    }
                }
                RawExample { src, tgt }
            })
            .collect()
    };

    Ok(SynthData {
        train: make(spec.n_train, train_pool, "synth/train"),
        dev: make(spec.n_dev, &pool, "synth/dev"),
        test: make(spec.n_test, &pool, "synth/test"),
        held_out: held.to_vec(),
    })
}

#[derive(Debug, Serialize)]
struct SynthMeta<'a> {
    spec: &'a SynthSpec,
    grammar: &'a str,
    held_out_identifiers: &'a [String],
}

/// Write `train.jsonl`, `dev.jsonl`, `test.jsonl`, `grammar.txt` and
/// `meta.json` into `dir`.
pub fn gen_label_bias_dataset(spec: &SynthSpec, dir: &Path) -> Result<SynthData, CorpusError> {
    let data = generate_label_bias(spec)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("dev.jsonl"), &data.dev)?;
    write_jsonl(&dir.join("test.jsonl"), &data.test)?;
    let g = dir.join("grammar.txt");
    fs::write(&g, LABEL_BIAS_GRAMMAR).map_err(io(&g))?;
    let meta = SynthMeta {
        spec,
        grammar: LABEL_BIAS_GRAMMAR,
        held_out_identifiers: &data.held_out,
    };
    let m = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("serializable") + "\n";
    fs::write(&m, text).map_err(io(&m))?;
    Ok(data)
}

/// Identifiers used as gold in `eval` but never in `train`.
pub fn unseen_identifiers(train: &[Example], eval: &[Example]) -> HashSet<String> {
    let seen: HashSet<&str> = train.iter().flat_map(Example::target_tokens).collect();
    eval.iter()
        .flat_map(Example::target_tokens)
        .filter(|t| !seen.contains(t))
        .map(String::from)
        .collect()
}
