//! Transition system mapping ASTs to action sequences and back.
//!
//! Expansion is depth-first, left-to-right: the frontier is a stack whose top
//! is the next slot to fill. Every primitive token list ends with `</f>`;
//! optional and multiple slots are closed by `Reduce`.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::ast::{AstNode, FieldValue, Value};
use crate::grammar::{Cardinality, ConstructorId, FieldType, GrammarSpec, END_OF_FIELD};

/// One derivation step.
///
/// The derived ordering (constructor id, then token text, then `Reduce`) is
/// the tie-break order used by search.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    ApplyConstr(ConstructorId),
    GenToken(String),
    Reduce,
}

impl Action {
    pub fn gen(token: impl Into<String>) -> Self {
        Action::GenToken(token.into())
    }

    pub fn end_of_field() -> Self {
        Action::GenToken(END_OF_FIELD.to_string())
    }

    pub fn describe(&self, spec: &GrammarSpec) -> String {
        match self {
            Action::ApplyConstr(c) => format!("ApplyConstr({})", spec.constructor(*c).name),
            Action::GenToken(t) => format!("GenToken({t})"),
            Action::Reduce => "Reduce".to_string(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::ApplyConstr(c) => write!(f, "ApplyConstr(#{})", c.0),
            Action::GenToken(t) => write!(f, "GenToken({t})"),
            Action::Reduce => f.write_str("Reduce"),
        }
    }
}

pub type ActionSequence = Vec<Action>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransitionError {
    #[error("derivation is already complete")]
    Complete,
    #[error("illegal action {action} at step {step}")]
    Illegal { step: usize, action: String },
    #[error("action sequence is incomplete after {0} steps")]
    Incomplete(usize),
    #[error(transparent)]
    Ast(#[from] crate::ast::AstError),
}

/// A pending slot on the frontier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub ty: FieldType,
    pub cardinality: Cardinality,
    /// Values already placed into this slot (only grows for multiple slots).
    pub filled: usize,
    /// A token list has been started but not yet closed with `</f>`.
    pub open_tokens: bool,
}

impl Slot {
    fn new(ty: FieldType, cardinality: Cardinality) -> Self {
        Slot {
            ty,
            cardinality,
            filled: 0,
            open_tokens: false,
        }
    }

    pub fn accepts_reduce(&self) -> bool {
        match self.cardinality {
            Cardinality::Single => false,
            Cardinality::Optional => self.filled == 0 && !self.open_tokens,
            Cardinality::Multiple => !self.open_tokens,
        }
    }
}

/// Partial derivation: the frontier of unfilled slots plus the step count.
/// The partial tree itself is implied by the action prefix that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DerivationState {
    frontier: Vec<Slot>,
    step: usize,
}

/// Legal actions at a state, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub actions: Vec<Action>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn position(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }
}

/// Distinct source tokens not in the output vocabulary, by first occurrence.
pub fn source_only_tokens<'a>(spec: &GrammarSpec, source: &'a [String]) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    source
        .iter()
        .filter(|t| spec.token_index(t).is_none() && seen.insert(t.as_str()))
        .map(String::as_str)
        .collect()
}

impl DerivationState {
    pub fn initial(spec: &GrammarSpec) -> Self {
        DerivationState {
            frontier: vec![Slot::new(FieldType::Composite(spec.root_type()), Cardinality::Single)],
            step: 0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn frontier(&self) -> &[Slot] {
        &self.frontier
    }

    /// The slot the next action fills.
    pub fn current_slot(&self) -> Option<&Slot> {
        self.frontier.last()
    }

    pub fn candidate_actions(&self, spec: &GrammarSpec, source: &[String]) -> Result<CandidateSet, TransitionError> {
        let slot = self.current_slot().ok_or(TransitionError::Complete)?;
        let mut actions = Vec::new();
        match slot.ty {
            FieldType::Composite(ty) => {
                actions.extend(spec.constructors_of_id(ty).map(Action::ApplyConstr));
            }
            FieldType::Token => {
                actions.extend(spec.token_vocab().iter().cloned().map(Action::GenToken));
                actions.extend(source_only_tokens(spec, source).into_iter().map(Action::gen));
            }
        }
        if slot.accepts_reduce() {
            actions.push(Action::Reduce);
        }
        Ok(CandidateSet { actions })
    }

    /// Successor state after `action`. Legality is checked against the same
    /// rules as [`candidate_actions`](Self::candidate_actions).
    pub fn apply(
        &self,
        action: &Action,
        spec: &GrammarSpec,
        source: &[String],
    ) -> Result<DerivationState, TransitionError> {
        let slot = *self.current_slot().ok_or(TransitionError::Complete)?;
        let illegal = || TransitionError::Illegal {
            step: self.step,
            action: action.describe(spec),
        };
        let mut next = self.clone();
        next.step += 1;
        match (slot.ty, action) {
            (FieldType::Composite(ty), Action::ApplyConstr(c)) => {
                let cons = spec.constructors().get(c.0).ok_or_else(illegal)?;
                if cons.result_type != ty {
                    return Err(illegal());
                }
                next.close_value(slot);
                for f in cons.fields.iter().rev() {
                    next.frontier.push(Slot::new(f.ty, f.cardinality));
                }
            }
            (FieldType::Token, Action::GenToken(t)) => {
                let legal = spec.token_index(t).is_some() || source.iter().any(|s| s == t);
                if !legal {
                    return Err(illegal());
                }
                if t == END_OF_FIELD {
                    next.close_value(slot);
                } else {
                    next.frontier.last_mut().expect("slot").open_tokens = true;
                }
            }
            (_, Action::Reduce) if slot.accepts_reduce() => {
                next.frontier.pop();
            }
            _ => return Err(illegal()),
        }
        Ok(next)
    }

    /// Record one finished value in the top slot, popping it unless it is a
    /// multiple slot.
    fn close_value(&mut self, slot: Slot) {
        match slot.cardinality {
            Cardinality::Single | Cardinality::Optional => {
                self.frontier.pop();
            }
            Cardinality::Multiple => {
                let top = self.frontier.last_mut().expect("slot");
                top.filled += 1;
                top.open_tokens = false;
            }
        }
    }
}

/// Replay `actions` from the initial state, returning the reached state.
pub fn replay(actions: &[Action], spec: &GrammarSpec, source: &[String]) -> Result<DerivationState, TransitionError> {
    actions
        .iter()
        .try_fold(DerivationState::initial(spec), |s, a| s.apply(a, spec, source))
}

/// Pre-order action sequence for `ast`.
pub fn ast_to_actions(ast: &AstNode, spec: &GrammarSpec) -> Result<ActionSequence, TransitionError> {
    ast.validate(spec, spec.root_type())?;
    let mut out = Vec::new();
    emit_node(ast, spec, &mut out);
    Ok(out)
}

fn emit_node(node: &AstNode, spec: &GrammarSpec, out: &mut Vec<Action>) {
    out.push(Action::ApplyConstr(node.constructor));
    for f in &node.fields {
        match f {
            FieldValue::Single(v) => emit_value(v, spec, out),
            FieldValue::Optional(Some(v)) => emit_value(v, spec, out),
            FieldValue::Optional(None) => out.push(Action::Reduce),
            FieldValue::Multiple(vs) => {
                for v in vs {
                    emit_value(v, spec, out);
                }
                out.push(Action::Reduce);
            }
        }
    }
}

fn emit_value(v: &Value, spec: &GrammarSpec, out: &mut Vec<Action>) {
    match v {
        Value::Node(n) => emit_node(n, spec, out),
        Value::Tokens(toks) => {
            out.extend(toks.iter().cloned().map(Action::GenToken));
            out.push(Action::end_of_field());
        }
    }
}

/// Rebuild the AST from a complete action sequence.
pub fn actions_to_ast(actions: &[Action], spec: &GrammarSpec) -> Result<AstNode, TransitionError> {
    let mut reader = Reader { actions, pos: 0, spec };
    let root = reader.node(FieldType::Composite(spec.root_type()))?;
    if reader.pos != actions.len() {
        return Err(reader.illegal());
    }
    Ok(root)
}

struct Reader<'a> {
    actions: &'a [Action],
    pos: usize,
    spec: &'a GrammarSpec,
}

impl Reader<'_> {
    fn illegal(&self) -> TransitionError {
        TransitionError::Illegal {
            step: self.pos,
            action: self.actions[self.pos].describe(self.spec),
        }
    }

    fn peek(&self) -> Result<&Action, TransitionError> {
        self.actions
            .get(self.pos)
            .ok_or(TransitionError::Incomplete(self.actions.len()))
    }

    fn node(&mut self, ty: FieldType) -> Result<AstNode, TransitionError> {
        let FieldType::Composite(ty) = ty else {
            unreachable!("node() called for a token slot")
        };
        let Action::ApplyConstr(c) = *self.peek()? else {
            return Err(self.illegal());
        };
        let cons = match self.spec.constructors().get(c.0) {
            Some(cons) if cons.result_type == ty => cons,
            _ => return Err(self.illegal()),
        };
        self.pos += 1;
        let mut fields = Vec::with_capacity(cons.fields.len());
        for decl in &cons.fields {
            let value = match decl.cardinality {
                Cardinality::Single => FieldValue::Single(self.value(decl.ty)?),
                Cardinality::Optional => {
                    if *self.peek()? == Action::Reduce {
                        self.pos += 1;
                        FieldValue::Optional(None)
                    } else {
                        FieldValue::Optional(Some(self.value(decl.ty)?))
                    }
                }
                Cardinality::Multiple => {
                    let mut vs = Vec::new();
                    while *self.peek()? != Action::Reduce {
                        vs.push(self.value(decl.ty)?);
                    }
                    self.pos += 1;
                    FieldValue::Multiple(vs)
                }
            };
            fields.push(value);
        }
        Ok(AstNode::new(c, fields))
    }

    fn value(&mut self, ty: FieldType) -> Result<Value, TransitionError> {
        match ty {
            FieldType::Composite(_) => Ok(Value::Node(self.node(ty)?)),
            FieldType::Token => {
                let mut toks = Vec::new();
                loop {
                    match self.peek()? {
                        Action::GenToken(t) if t == END_OF_FIELD => {
                            self.pos += 1;
                            return Ok(Value::Tokens(toks));
                        }
                        Action::GenToken(t) if !t.is_empty() => {
                            toks.push(t.clone());
                            self.pos += 1;
                        }
                        _ => return Err(self.illegal()),
                    }
                }
            }
        }
    }
}

/// Minimum number of actions needed to complete one value of each composite
/// type; `None` for types that cannot terminate.
fn min_completion(spec: &GrammarSpec) -> Vec<Option<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; spec.types().len()];
    loop {
        let mut changed = false;
        for c in spec.constructors() {
            let mut cost = Some(1usize);
            for f in &c.fields {
                let fc = match (f.cardinality, f.ty) {
                    (Cardinality::Optional | Cardinality::Multiple, _) => Some(1),
                    (Cardinality::Single, FieldType::Token) => Some(1),
                    (Cardinality::Single, FieldType::Composite(t)) => best[t.0],
                };
                cost = cost.zip(fc).map(|(a, b)| a + b);
            }
            if let Some(cost) = cost {
                let slot = &mut best[c.result_type.0];
                if slot.is_none_or(|b| cost < b) {
                    *slot = Some(cost);
                    changed = true;
                }
            }
        }
        if !changed {
            return best;
        }
    }
}

/// Limits for [`sample_ast`].
#[derive(Debug, Clone)]
pub struct SampleLimits {
    pub max_depth: usize,
    pub max_tokens: usize,
    pub max_items: usize,
}

impl Default for SampleLimits {
    fn default() -> Self {
        SampleLimits {
            max_depth: 4,
            max_tokens: 3,
            max_items: 3,
        }
    }
}

/// Draw a random AST from the grammar. Below `max_depth` constructors are
/// uniform; at the cap the cheapest-to-complete constructor is chosen and
/// optional/multiple fields are left empty. Tokens come from `pool`.
///
/// Panics if `pool` is empty or the root type cannot terminate.
pub fn sample_ast<R: Rng + ?Sized>(spec: &GrammarSpec, rng: &mut R, limits: &SampleLimits, pool: &[String]) -> AstNode {
    assert!(!pool.is_empty(), "token pool must be non-empty");
    let costs = min_completion(spec);
    sample_node(spec, spec.root_type(), 0, rng, limits, pool, &costs)
}

fn sample_node<R: Rng + ?Sized>(
    spec: &GrammarSpec,
    ty: crate::grammar::TypeId,
    depth: usize,
    rng: &mut R,
    limits: &SampleLimits,
    pool: &[String],
    costs: &[Option<usize>],
) -> AstNode {
    let options: Vec<ConstructorId> = spec.constructors_of_id(ty).collect();
    let at_cap = depth >= limits.max_depth;
    let cost_of = |c: ConstructorId| -> Option<usize> {
        spec.constructor(c)
            .fields
            .iter()
            .map(|f| match (f.cardinality, f.ty) {
                (Cardinality::Single, FieldType::Composite(t)) => costs[t.0],
                _ => Some(1),
            })
            .try_fold(1usize, |acc, x| x.map(|x| acc + x))
    };
    let chosen = if at_cap {
        *options
            .iter()
            .filter(|c| cost_of(**c).is_some())
            .min_by_key(|c| cost_of(**c))
            .expect("type cannot terminate")
    } else {
        let viable: Vec<_> = options.iter().copied().filter(|c| cost_of(*c).is_some()).collect();
        viable[rng.gen_range(0..viable.len())]
    };
    let cons = spec.constructor(chosen).clone();
    let mut fields = Vec::with_capacity(cons.fields.len());
    for f in &cons.fields {
        let value = |rng: &mut R| match f.ty {
            FieldType::Composite(t) => Value::Node(sample_node(spec, t, depth + 1, rng, limits, pool, costs)),
            FieldType::Token => {
                let n = rng.gen_range(0..=limits.max_tokens);
                Value::Tokens((0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect())
            }
        };
        let fv = match f.cardinality {
            Cardinality::Single => FieldValue::Single(value(rng)),
            Cardinality::Optional => {
                if at_cap || rng.gen_bool(0.5) {
                    FieldValue::Optional(None)
                } else {
                    FieldValue::Optional(Some(value(rng)))
                }
            }
            Cardinality::Multiple => {
                let n = if at_cap { 0 } else { rng.gen_range(0..=limits.max_items) };
                FieldValue::Multiple((0..n).map(|_| value(rng)).collect())
            }
        };
        fields.push(fv);
    }
    AstNode::new(chosen, fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::parse_sexpr;
    use crate::grammar::parse_grammar;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn initial_state() {
        let g = parse_grammar("root E\nE = C1() | C2()").unwrap();
        let s = DerivationState::initial(&g);
        assert_eq!(s.frontier().len(), 1);
        assert!(!s.is_complete());
        assert_eq!(s.step(), 0);
        let cands = s.candidate_actions(&g, &[]).unwrap();
        assert_eq!(
            cands.actions,
            [
                Action::ApplyConstr(ConstructorId(0)),
                Action::ApplyConstr(ConstructorId(1))
            ]
        );
    }

    #[test]
    fn primitive_candidates() {
        let g = parse_grammar("root E\nE = Lit(token value)")
            .unwrap()
            .with_token_vocab(["a", "b", "</f>"])
            .unwrap();
        let s = DerivationState::initial(&g)
            .apply(&Action::ApplyConstr(ConstructorId(0)), &g, &[])
            .unwrap();
        let src = strings(&["c"]);
        let cands = s.candidate_actions(&g, &src).unwrap();
        assert_eq!(
            cands.actions,
            [
                Action::gen("a"),
                Action::gen("b"),
                Action::gen("</f>"),
                Action::gen("c")
            ]
        );
        // duplicates and vocab overlap collapse
        let src = strings(&["c", "a", "c", "d"]);
        let cands = s.candidate_actions(&g, &src).unwrap();
        assert_eq!(cands.len(), 5);
        assert_eq!(cands.actions[4], Action::gen("d"));
    }

    #[test]
    fn literal_derivation() {
        let g = parse_grammar("root Expr\nExpr = Lit(token value)").unwrap();
        let lit = Action::ApplyConstr(ConstructorId(0));
        let src = strings(&["x"]);
        let s1 = DerivationState::initial(&g).apply(&lit, &g, &src).unwrap();
        assert_eq!(s1.current_slot().unwrap().ty, FieldType::Token);
        let s2 = s1.apply(&Action::gen("x"), &g, &src).unwrap();
        let s3 = s2.apply(&Action::end_of_field(), &g, &src).unwrap();
        assert!(s3.is_complete());
        assert_eq!(s3.step(), 3);
        assert!(matches!(s3.candidate_actions(&g, &src), Err(TransitionError::Complete)));
        let seq = vec![lit.clone(), Action::gen("x"), Action::end_of_field()];
        let ast = actions_to_ast(&seq, &g).unwrap();
        assert_eq!(ast.to_sexpr(&g), r#"(Lit (tok "x"))"#);
        assert_eq!(ast_to_actions(&ast, &g).unwrap(), seq);
        // ApplyConstr on a primitive slot
        assert!(matches!(
            s1.apply(&lit, &g, &src),
            Err(TransitionError::Illegal { step: 1, .. })
        ));
        // token neither in vocab nor source
        assert!(s1.apply(&Action::gen("y"), &g, &src).is_err());
    }

    #[test]
    fn multiple_slot_offers_reduce() {
        let g = parse_grammar("root E\nE = Call(E* args) | Nil()").unwrap();
        let call = Action::ApplyConstr(ConstructorId(0));
        let nil = Action::ApplyConstr(ConstructorId(1));
        let s = DerivationState::initial(&g).apply(&call, &g, &[]).unwrap();
        let s = s.apply(&nil, &g, &[]).unwrap();
        let cands = s.candidate_actions(&g, &[]).unwrap();
        assert_eq!(cands.actions, [call.clone(), nil.clone(), Action::Reduce]);
        let done = s.apply(&Action::Reduce, &g, &[]).unwrap();
        assert!(done.is_complete());
    }

    #[test]
    fn optional_reduce_only_before_fill() {
        let g = parse_grammar("root E\nE = Opt(token? v)").unwrap();
        let s = DerivationState::initial(&g)
            .apply(&Action::ApplyConstr(ConstructorId(0)), &g, &[])
            .unwrap();
        let src = strings(&["q"]);
        assert!(s
            .candidate_actions(&g, &src)
            .unwrap()
            .position(&Action::Reduce)
            .is_some());
        let s = s.apply(&Action::gen("q"), &g, &src).unwrap();
        assert!(s
            .candidate_actions(&g, &src)
            .unwrap()
            .position(&Action::Reduce)
            .is_none());
        assert!(s.apply(&Action::Reduce, &g, &src).is_err());
    }

    #[test]
    fn zero_field_constructor() {
        let g = parse_grammar("root E\nE = Nil()").unwrap();
        let ast = AstNode::leaf(ConstructorId(0));
        assert_eq!(
            ast_to_actions(&ast, &g).unwrap(),
            [Action::ApplyConstr(ConstructorId(0))]
        );
    }

    /// Prefix of a derivation of a `sorted(...)` call.
    #[test]
    fn python_call_prefix() {
        let g = parse_grammar(
            "root stmt\n\
             stmt = Expr(expr value)\n\
             expr = Call(expr func, expr* args, keyword* keywords)\n\
                  | Attribute(token attr, expr? value)\n\
                  | Name(token id)\n\
                  | Str(token s)\n\
             keyword = keyword(token arg, expr value)",
        )
        .unwrap();
        let ast = parse_sexpr(
            r#"(Expr (Call (Attribute (tok "sorted") none)
                       [(Str (tok "file.csv"))]
                       [(keyword (tok "reverse") (Name (tok "True")))]))"#,
            &g,
        )
        .unwrap();
        let seq = ast_to_actions(&ast, &g).unwrap();
        let names: Vec<String> = seq.iter().take(4).map(|a| a.describe(&g)).collect();
        assert_eq!(
            names,
            [
                "ApplyConstr(Expr)",
                "ApplyConstr(Call)",
                "ApplyConstr(Attribute)",
                "GenToken(sorted)"
            ]
        );
        assert_eq!(actions_to_ast(&seq, &g).unwrap(), ast);
    }

    #[test]
    fn incomplete_and_illegal_sequences() {
        let g = parse_grammar("root Expr\nExpr = Lit(token value) | Nil()").unwrap();
        let lit = Action::ApplyConstr(ConstructorId(0));
        assert_eq!(
            actions_to_ast(&[lit.clone(), Action::gen("x")], &g),
            Err(TransitionError::Incomplete(2))
        );
        assert!(matches!(
            actions_to_ast(&[lit.clone(), Action::Reduce], &g),
            Err(TransitionError::Illegal { step: 1, .. })
        ));
        assert!(matches!(
            actions_to_ast(&[Action::ApplyConstr(ConstructorId(1)), Action::Reduce], &g),
            Err(TransitionError::Illegal { step: 1, .. })
        ));
    }
}
