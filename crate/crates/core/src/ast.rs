//! ASTs over a [`GrammarSpec`] and their S-expression form.
//!
//! `(Call (Name (tok "sorted")) [(Name (tok "xs"))] none)`: constructor name
//! first, then fields in declaration order. Primitive fields are
//! `(tok "a" "b")`, empty optional fields are `none`, multiple fields are
//! bracketed lists.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grammar::{Cardinality, ConstructorId, FieldDecl, FieldType, GrammarSpec, TypeId};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Node(AstNode),
    Tokens(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldValue {
    Single(Value),
    Optional(Option<Value>),
    Multiple(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AstNode {
    pub constructor: ConstructorId,
    pub fields: Vec<FieldValue>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AstError {
    #[error("S-expression error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("AST does not match grammar: {0}")]
    Invalid(String),
}

impl AstNode {
    pub fn new(constructor: ConstructorId, fields: Vec<FieldValue>) -> Self {
        AstNode { constructor, fields }
    }

    pub fn leaf(constructor: ConstructorId) -> Self {
        AstNode::new(constructor, Vec::new())
    }

    /// Check arity, field types and cardinalities against the grammar, with
    /// the node's result type required to be `expected`.
    pub fn validate(&self, spec: &GrammarSpec, expected: TypeId) -> Result<(), AstError> {
        let Some(c) = spec.constructors().get(self.constructor.0) else {
            return Err(AstError::Invalid(format!(
                "unknown constructor id {}",
                self.constructor.0
            )));
        };
        if c.result_type != expected {
            return Err(AstError::Invalid(format!(
                "`{}` builds `{}`, expected `{}`",
                c.name,
                spec.type_name(c.result_type),
                spec.type_name(expected)
            )));
        }
        if c.fields.len() != self.fields.len() {
            return Err(AstError::Invalid(format!(
                "`{}` takes {} fields, got {}",
                c.name,
                c.fields.len(),
                self.fields.len()
            )));
        }
        for (decl, value) in c.fields.iter().zip(&self.fields) {
            let values: Vec<&Value> = match (decl.cardinality, value) {
                (Cardinality::Single, FieldValue::Single(v)) => vec![v],
                (Cardinality::Optional, FieldValue::Optional(v)) => v.iter().collect(),
                (Cardinality::Multiple, FieldValue::Multiple(vs)) => vs.iter().collect(),
                _ => {
                    return Err(AstError::Invalid(format!(
                        "field `{}` of `{}` has the wrong cardinality",
                        decl.name, c.name
                    )))
                }
            };
            for v in values {
                match (decl.ty, v) {
                    (FieldType::Composite(t), Value::Node(n)) => n.validate(spec, t)?,
                    (FieldType::Token, Value::Tokens(toks)) => {
                        if toks.iter().any(|t| t.is_empty() || t == crate::grammar::END_OF_FIELD) {
                            return Err(AstError::Invalid(format!(
                                "field `{}` holds an empty or reserved token",
                                decl.name
                            )));
                        }
                    }
                    _ => {
                        return Err(AstError::Invalid(format!(
                            "field `{}` of `{}` has the wrong value kind",
                            decl.name, c.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Constructor names and token leaves in pre-order.
    pub fn linearize(&self, spec: &GrammarSpec) -> Vec<String> {
        let mut out = Vec::new();
        self.linearize_into(spec, &mut out);
        out
    }

    fn linearize_into(&self, spec: &GrammarSpec, out: &mut Vec<String>) {
        out.push(spec.constructor(self.constructor).name.clone());
        for f in &self.fields {
            let values: Vec<&Value> = match f {
                FieldValue::Single(v) => vec![v],
                FieldValue::Optional(v) => v.iter().collect(),
                FieldValue::Multiple(vs) => vs.iter().collect(),
            };
            for v in values {
                match v {
                    Value::Node(n) => n.linearize_into(spec, out),
                    Value::Tokens(t) => out.extend(t.iter().cloned()),
                }
            }
        }
    }

    pub fn to_sexpr(&self, spec: &GrammarSpec) -> String {
        let mut out = String::new();
        write_node(self, spec, &mut out);
        out
    }
}

fn write_value(v: &Value, spec: &GrammarSpec, out: &mut String) {
    match v {
        Value::Node(n) => write_node(n, spec, out),
        Value::Tokens(toks) => {
            out.push_str("(tok");
            for t in toks {
                out.push(' ');
                write_quoted(t, out);
            }
            out.push(')');
        }
    }
}

fn write_node(n: &AstNode, spec: &GrammarSpec, out: &mut String) {
    let _ = write!(out, "({}", spec.constructor(n.constructor).name);
    for f in &n.fields {
        out.push(' ');
        match f {
            FieldValue::Single(v) | FieldValue::Optional(Some(v)) => write_value(v, spec, out),
            FieldValue::Optional(None) => out.push_str("none"),
            FieldValue::Multiple(vs) => {
                out.push('[');
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    write_value(v, spec, out);
                }
                out.push(']');
            }
        }
    }
    out.push(')');
}

fn write_quoted(t: &str, out: &mut String) {
    out.push('"');
    for c in t.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    LBracket,
    RBracket,
    Str(String),
    Sym(String),
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, AstError> {
    let mut out = Vec::new();
    let mut it = text.char_indices().peekable();
    while let Some(&(i, c)) = it.peek() {
        match c {
            c if c.is_whitespace() => {
                it.next();
            }
            '(' | ')' | '[' | ']' => {
                it.next();
                out.push((
                    i,
                    match c {
                        '(' => Tok::Open,
                        ')' => Tok::Close,
                        '[' => Tok::LBracket,
                        _ => Tok::RBracket,
                    },
                ));
            }
            '"' => {
                it.next();
                let mut s = String::new();
                loop {
                    match it.next() {
                        Some((_, '"')) => break,
                        Some((_, '\\')) => match it.next() {
                            Some((_, e)) => s.push(e),
                            None => {
                                return Err(AstError::Parse {
                                    offset: text.len(),
                                    message: "unterminated escape".into(),
                                })
                            }
                        },
                        Some((_, ch)) => s.push(ch),
                        None => {
                            return Err(AstError::Parse {
                                offset: i,
                                message: "unterminated string".into(),
                            })
                        }
                    }
                }
                out.push((i, Tok::Str(s)));
            }
            _ => {
                let mut s = String::new();
                while let Some(&(_, ch)) = it.peek() {
                    if ch.is_whitespace() || "()[]\"".contains(ch) {
                        break;
                    }
                    s.push(ch);
                    it.next();
                }
                out.push((i, Tok::Sym(s)));
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    spec: &'a GrammarSpec,
}

impl Parser<'_> {
    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.0).unwrap_or(self.end)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, AstError> {
        Err(AstError::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.1.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<(), AstError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {tok:?}"))
        }
    }

    fn node(&mut self, expected: TypeId) -> Result<AstNode, AstError> {
        self.expect(Tok::Open)?;
        let name = match self.bump() {
            Some(Tok::Sym(s)) => s,
            _ => {
                self.pos -= 1;
                return self.err("expected constructor name");
            }
        };
        let Some(c) = self.spec.constructor_by_name(&name) else {
            self.pos -= 1;
            return self.err(format!("unknown constructor `{name}`"));
        };
        if c.result_type != expected {
            self.pos -= 1;
            return self.err(format!(
                "`{name}` builds `{}`, expected `{}`",
                self.spec.type_name(c.result_type),
                self.spec.type_name(expected)
            ));
        }
        let id = c.id;
        let decls: Vec<FieldDecl> = c.fields.clone();
        let mut fields = Vec::with_capacity(decls.len());
        for d in &decls {
            fields.push(self.field(d)?);
        }
        self.expect(Tok::Close)?;
        Ok(AstNode::new(id, fields))
    }

    fn field(&mut self, decl: &FieldDecl) -> Result<FieldValue, AstError> {
        match decl.cardinality {
            Cardinality::Single => Ok(FieldValue::Single(self.value(decl.ty)?)),
            Cardinality::Optional => {
                if self.peek() == Some(&Tok::Sym("none".into())) {
                    self.pos += 1;
                    Ok(FieldValue::Optional(None))
                } else {
                    Ok(FieldValue::Optional(Some(self.value(decl.ty)?)))
                }
            }
            Cardinality::Multiple => {
                self.expect(Tok::LBracket)?;
                let mut vs = Vec::new();
                while self.peek() != Some(&Tok::RBracket) {
                    if self.peek().is_none() {
                        return self.err("unterminated list");
                    }
                    vs.push(self.value(decl.ty)?);
                }
                self.pos += 1;
                Ok(FieldValue::Multiple(vs))
            }
        }
    }

    fn value(&mut self, ty: FieldType) -> Result<Value, AstError> {
        match ty {
            FieldType::Composite(t) => Ok(Value::Node(self.node(t)?)),
            FieldType::Token => {
                self.expect(Tok::Open)?;
                if self.bump() != Some(Tok::Sym("tok".into())) {
                    self.pos -= 1;
                    return self.err("expected `tok`");
                }
                let mut toks = Vec::new();
                loop {
                    match self.bump() {
                        Some(Tok::Str(s)) => {
                            if s.is_empty() || s == crate::grammar::END_OF_FIELD {
                                self.pos -= 1;
                                return self.err("empty or reserved token");
                            }
                            toks.push(s)
                        }
                        Some(Tok::Close) => break,
                        _ => {
                            self.pos -= 1;
                            return self.err("expected quoted token or `)`");
                        }
                    }
                }
                Ok(Value::Tokens(toks))
            }
        }
    }
}

/// Parse an S-expression whose root has the grammar's root type.
pub fn parse_sexpr(text: &str, spec: &GrammarSpec) -> Result<AstNode, AstError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
        spec,
    };
    let node = p.node(spec.root_type())?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    Ok(node)
}
