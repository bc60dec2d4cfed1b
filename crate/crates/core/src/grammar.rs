//! Line-oriented constructor grammar describing the space of target ASTs.
//!
//! ```text
//! # comment
//! root Stmt
//! Stmt = UseId(token name) | UseKw(Kw k)
//! Kw = A() | B()
//! ```
//!
//! A line starting with `|` adds alternatives to the previous line's type.
//! A field type is either a declared composite type or the primitive `token`,
//! optionally suffixed with `?` (optional) or `*` (multiple).

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Reserved token closing every primitive token list.
pub const END_OF_FIELD: &str = "</f>";

/// Name of the single primitive type.
pub const TOKEN_TYPE: &str = "token";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: undeclared type `{name}`")]
    UndeclaredType { line: usize, name: String },
    #[error("line {line}: duplicate constructor `{name}`")]
    DuplicateConstructor { line: usize, name: String },
    #[error("line {line}: duplicate field `{field}` in constructor `{constructor}`")]
    DuplicateField {
        line: usize,
        constructor: String,
        field: String,
    },
    #[error("missing `root` declaration")]
    MissingRoot,
    #[error("line {line}: `root` must be the first declaration and appear once")]
    MisplacedRoot { line: usize },
    #[error("root type `{0}` has no constructors")]
    RootNotComposite(String),
    #[error("unknown composite type `{0}`")]
    UnknownType(String),
    #[error("token vocabulary must contain `{END_OF_FIELD}` exactly once")]
    BadVocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConstructorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cardinality {
    Single,
    Optional,
    Multiple,
}

impl Cardinality {
    fn suffix(self) -> &'static str {
        match self {
            Cardinality::Single => "",
            Cardinality::Optional => "?",
            Cardinality::Multiple => "*",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldType {
    Composite(TypeId),
    Token,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDecl {
    pub name: String,
    pub ty: FieldType,
    pub cardinality: Cardinality,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constructor {
    pub id: ConstructorId,
    pub name: String,
    pub result_type: TypeId,
    pub fields: Vec<FieldDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeType {
    pub name: String,
    pub constructors: Vec<ConstructorId>,
}

/// A validated grammar plus the output token vocabulary.
///
/// Immutable once built; `with_token_vocab` returns a new value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarSpec {
    types: Vec<CompositeType>,
    constructors: Vec<Constructor>,
    root: TypeId,
    token_vocab: Vec<String>,
    type_index: HashMap<String, TypeId>,
    constructor_index: HashMap<String, ConstructorId>,
    token_index: HashMap<String, usize>,
}

impl GrammarSpec {
    pub fn root_type(&self) -> TypeId {
        self.root
    }

    pub fn types(&self) -> &[CompositeType] {
        &self.types
    }

    pub fn type_name(&self, ty: TypeId) -> &str {
        &self.types[ty.0].name
    }

    pub fn type_id(&self, name: &str) -> Option<TypeId> {
        self.type_index.get(name).copied()
    }

    pub fn constructors(&self) -> &[Constructor] {
        &self.constructors
    }

    pub fn constructor(&self, id: ConstructorId) -> &Constructor {
        &self.constructors[id.0]
    }

    pub fn constructor_by_name(&self, name: &str) -> Option<&Constructor> {
        self.constructor_index.get(name).map(|id| self.constructor(*id))
    }

    /// Constructors producing the named composite type, in declaration order.
    pub fn constructors_of(&self, type_name: &str) -> Result<Vec<&Constructor>, GrammarError> {
        let ty = self
            .type_id(type_name)
            .ok_or_else(|| GrammarError::UnknownType(type_name.to_string()))?;
        Ok(self.constructors_of_id(ty).map(|id| self.constructor(id)).collect())
    }

    pub fn constructors_of_id(&self, ty: TypeId) -> impl Iterator<Item = ConstructorId> + '_ {
        self.types[ty.0].constructors.iter().copied()
    }

    pub fn token_vocab(&self) -> &[String] {
        &self.token_vocab
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    pub fn end_of_field_index(&self) -> usize {
        self.token_index[END_OF_FIELD]
    }

    /// Replace the output token vocabulary. `</f>` is inserted first if absent.
    pub fn with_token_vocab<I, S>(&self, tokens: I) -> Result<GrammarSpec, GrammarError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let markers = vocab.iter().filter(|t| *t == END_OF_FIELD).count();
        match markers {
            0 => vocab.insert(0, END_OF_FIELD.to_string()),
            1 => {}
            _ => return Err(GrammarError::BadVocab),
        }
        let mut token_index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || token_index.insert(t.clone(), i).is_some() {
                return Err(GrammarError::BadVocab);
            }
        }
        Ok(GrammarSpec {
            token_vocab: vocab,
            token_index,
            ..self.clone()
        })
    }

    /// Serialize the grammar (not the vocabulary) back to the text format.
    pub fn render(&self) -> String {
        let mut out = format!("root {}\n", self.type_name(self.root));
        for c in &self.constructors {
            let fields: Vec<String> = c
                .fields
                .iter()
                .map(|f| {
                    let ty = match f.ty {
                        FieldType::Token => TOKEN_TYPE,
                        FieldType::Composite(t) => self.type_name(t),
                    };
                    format!("{}{} {}", ty, f.cardinality.suffix(), f.name)
                })
                .collect();
            out.push_str(&format!(
                "{} = {}({})\n",
                self.type_name(c.result_type),
                c.name,
                fields.join(", ")
            ));
        }
        out
    }
}

impl fmt::Display for GrammarSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

struct RawField {
    ty: String,
    cardinality: Cardinality,
    name: String,
    line: usize,
}

struct RawConstructor {
    name: String,
    result_type: String,
    fields: Vec<RawField>,
    line: usize,
}

/// Character cursor over one line, tracking 1-based columns.
struct Cursor {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl Cursor {
    fn new(text: &str, line: usize) -> Self {
        Cursor {
            chars: text.chars().collect(),
            pos: 0,
            line,
        }
    }

    fn err(&self, message: impl Into<String>) -> GrammarError {
        GrammarError::Syntax {
            line: self.line,
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, c: char) -> Result<(), GrammarError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn ident(&mut self) -> Result<String, GrammarError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            let ok = if self.pos == start {
                c.is_alphabetic() || c == '_'
            } else {
                c.is_alphanumeric() || c == '_'
            };
            if !ok {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    fn at_end(&mut self) -> bool {
        self.peek().is_none()
    }
}

fn parse_constructor(cur: &mut Cursor, result_type: &str) -> Result<RawConstructor, GrammarError> {
    let name = cur.ident()?;
    cur.expect('(')?;
    let mut fields = Vec::new();
    if cur.peek() == Some(')') {
        cur.pos += 1;
    } else {
        loop {
            let ty = cur.ident()?;
            let cardinality = match cur.chars.get(cur.pos) {
                Some('?') => {
                    cur.pos += 1;
                    Cardinality::Optional
                }
                Some('*') => {
                    cur.pos += 1;
                    Cardinality::Multiple
                }
                _ => Cardinality::Single,
            };
            let fname = cur.ident()?;
            fields.push(RawField {
                ty,
                cardinality,
                name: fname,
                line: cur.line,
            });
            match cur.peek() {
                Some(',') => cur.pos += 1,
                Some(')') => {
                    cur.pos += 1;
                    break;
                }
                _ => return Err(cur.err("expected `,` or `)`")),
            }
        }
    }
    Ok(RawConstructor {
        name,
        result_type: result_type.to_string(),
        fields,
        line: cur.line,
    })
}

fn parse_alternatives(cur: &mut Cursor, head: &str, raw: &mut Vec<RawConstructor>) -> Result<(), GrammarError> {
    loop {
        raw.push(parse_constructor(cur, head)?);
        match cur.peek() {
            None => return Ok(()),
            Some('|') => cur.pos += 1,
            Some(_) => return Err(cur.err("expected `|` or end of line")),
        }
    }
}

/// Parse and validate grammar text. Constructor ids follow file order.
pub fn parse_grammar(text: &str) -> Result<GrammarSpec, GrammarError> {
    let mut root: Option<String> = None;
    let mut raw = Vec::new();
    let mut seen_decl = false;
    let mut last_type: Option<String> = None;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cur = Cursor::new(line, lineno);
        if cur.peek() == Some('|') {
            let Some(head) = last_type.clone() else {
                return Err(cur.err("continuation line without a preceding type"));
            };
            cur.pos += 1;
            parse_alternatives(&mut cur, &head, &mut raw)?;
            continue;
        }
        let head = cur.ident()?;
        if head == "root" && cur.peek() != Some('=') {
            if seen_decl {
                return Err(GrammarError::MisplacedRoot { line: lineno });
            }
            root = Some(cur.ident()?);
            if !cur.at_end() {
                return Err(cur.err("unexpected text after root type"));
            }
            seen_decl = true;
            continue;
        }
        if root.is_none() {
            return Err(GrammarError::MissingRoot);
        }
        seen_decl = true;
        cur.expect('=')?;
        parse_alternatives(&mut cur, &head, &mut raw)?;
        last_type = Some(head);
    }

    let root = root.ok_or(GrammarError::MissingRoot)?;

    let mut types: Vec<CompositeType> = Vec::new();
    let mut type_index = HashMap::new();
    for c in &raw {
        if c.result_type == TOKEN_TYPE {
            return Err(GrammarError::Syntax {
                line: c.line,
                column: 1,
                message: format!("`{TOKEN_TYPE}` is primitive and cannot have constructors"),
            });
        }
        if !type_index.contains_key(&c.result_type) {
            type_index.insert(c.result_type.clone(), TypeId(types.len()));
            types.push(CompositeType {
                name: c.result_type.clone(),
                constructors: Vec::new(),
            });
        }
    }
    let root_id = *type_index
        .get(&root)
        .ok_or_else(|| GrammarError::RootNotComposite(root.clone()))?;

    let mut constructors = Vec::with_capacity(raw.len());
    let mut constructor_index = HashMap::new();
    for (i, c) in raw.into_iter().enumerate() {
        let id = ConstructorId(i);
        if constructor_index.insert(c.name.clone(), id).is_some() {
            return Err(GrammarError::DuplicateConstructor {
                line: c.line,
                name: c.name,
            });
        }
        let mut fields: Vec<FieldDecl> = Vec::with_capacity(c.fields.len());
        for f in c.fields {
            let ty = if f.ty == TOKEN_TYPE {
                FieldType::Token
            } else {
                FieldType::Composite(*type_index.get(&f.ty).ok_or(GrammarError::UndeclaredType {
                    line: f.line,
                    name: f.ty.clone(),
                })?)
            };
            if fields.iter().any(|g| g.name == f.name) {
                return Err(GrammarError::DuplicateField {
                    line: f.line,
                    constructor: c.name,
                    field: f.name,
                });
            }
            fields.push(FieldDecl {
                name: f.name,
                ty,
                cardinality: f.cardinality,
            });
        }
        let result_type = type_index[&c.result_type];
        types[result_type.0].constructors.push(id);
        constructors.push(Constructor {
            id,
            name: c.name,
            result_type,
            fields,
        });
    }

    let spec = GrammarSpec {
        types,
        constructors,
        root: root_id,
        token_vocab: Vec::new(),
        type_index,
        constructor_index,
        token_index: HashMap::new(),
    };
    spec.with_token_vocab([END_OF_FIELD])
}
