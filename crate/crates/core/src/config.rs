//! Line-oriented topology configuration.
//!
//! ```text
//! # comment
//! node <id> <kind>[+<kind>...] [key=value ...]
//! link <idA> <idB> bw=<bits/s> delay=<s> [ber=<p>] [key=value ...]
//! param <id> <key>=<value> [key=value ...]
//! ```
//!
//! A node whose kind is a `+`-joined stack (top layer first) expands into one
//! component per layer named `<id>.<kind>`; a single-kind node is a single
//! component named `<id>`. Link endpoints name a node (meaning its bottom
//! layer) or a component. Numbers are plain decimal or scientific notation
//! in SI units; there are no suffixes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::Serialize;

pub type Params = BTreeMap<String, String>;

#[derive(Debug, Clone, Serialize)]
pub struct NodeDecl {
    pub id: String,
    /// Layer kinds, top of the stack first.
    pub kinds: Vec<String>,
    pub params: Params,
    #[serde(skip)]
    pub line: usize,
}

impl PartialEq for NodeDecl {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id && self.kinds == o.kinds && self.params == o.params
    }
}

impl NodeDecl {
    /// Component names in stack order, top first.
    pub fn component_ids(&self) -> Vec<String> {
        if self.kinds.len() == 1 {
            vec![self.id.clone()]
        } else {
            self.kinds
                .iter()
                .map(|k| format!("{}.{}", self.id, k))
                .collect()
        }
    }

    pub fn bottom(&self) -> String {
        self.component_ids().pop().expect("nodes have at least one kind")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkDecl {
    pub id: String,
    pub a: String,
    pub b: String,
    /// bits/s
    pub bw: f64,
    /// seconds
    pub delay: f64,
    /// per-bit error probability
    pub ber: f64,
    /// Extra keys (`loss`, `pcorrupt`, `queue`, `mtu`, `duplex`, `metric`, ...).
    pub params: Params,
    #[serde(skip)]
    pub line: usize,
}

impl PartialEq for LinkDecl {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id
            && self.a == o.a
            && self.b == o.b
            && self.bw == o.bw
            && self.delay == o.delay
            && self.ber == o.ber
            && self.params == o.params
    }
}

impl LinkDecl {
    pub fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(|v| v.parse().ok())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamDecl {
    pub target: String,
    pub key: String,
    pub value: String,
    #[serde(skip)]
    pub line: usize,
}

impl PartialEq for ParamDecl {
    fn eq(&self, o: &Self) -> bool {
        self.target == o.target && self.key == o.key && self.value == o.value
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Topology {
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<LinkDecl>,
    pub params: Vec<ParamDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigErrorKind {
    Syntax(String),
    DuplicateId(String),
    DanglingEndpoint(String),
    UnknownTarget(String),
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub col: usize,
    pub kind: ConfigErrorKind,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: ", self.line, self.col)?;
        match &self.kind {
            ConfigErrorKind::Syntax(m) => write!(f, "{m}"),
            ConfigErrorKind::DuplicateId(id) => write!(f, "duplicate id `{id}`"),
            ConfigErrorKind::DanglingEndpoint(id) => {
                write!(f, "link endpoint `{id}` is not a declared node or component")
            }
            ConfigErrorKind::UnknownTarget(id) => write!(f, "param target `{id}` is not declared"),
            ConfigErrorKind::BadValue { key, value } => {
                write!(f, "invalid value `{value}` for `{key}`")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

struct Token<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let body = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in body.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &body[s..i],
                    col: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &body[s..],
            col: s + 1,
        });
    }
    out
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
}

fn err(line: usize, col: usize, kind: ConfigErrorKind) -> ConfigError {
    ConfigError { line, col, kind }
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> ConfigError {
    err(line, col, ConfigErrorKind::Syntax(msg.into()))
}

fn parse_kv(tok: &Token<'_>, line: usize) -> Result<(String, String), ConfigError> {
    match tok.text.split_once('=') {
        Some((k, v)) if valid_ident(k) && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(syntax(line, tok.col, format!("expected key=value, found `{}`", tok.text))),
    }
}

fn number(
    params: &mut Params,
    key: &str,
    line: usize,
    col: usize,
    errors: &mut Vec<ConfigError>,
) -> Option<f64> {
    let v = params.remove(key)?;
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Some(x),
        _ => {
            errors.push(err(
                line,
                col,
                ConfigErrorKind::BadValue {
                    key: key.into(),
                    value: v,
                },
            ));
            None
        }
    }
}

/// Parses a configuration document. Never panics; on failure returns every
/// positioned error found.
pub fn parse(text: &str) -> Result<Topology, Vec<ConfigError>> {
    let mut topo = Topology::default();
    let mut errors = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks = tokenize(raw);
        let Some(head) = toks.first() else { continue };
        match head.text {
            "node" => {
                if toks.len() < 3 {
                    errors.push(syntax(line, head.col, "expected `node <id> <kind>`"));
                    continue;
                }
                if !valid_ident(toks[1].text) {
                    errors.push(syntax(line, toks[1].col, format!("bad id `{}`", toks[1].text)));
                    continue;
                }
                let kinds: Vec<String> = toks[2].text.split('+').map(str::to_string).collect();
                if kinds.iter().any(|k| !valid_ident(k) || k.contains('.')) {
                    errors.push(syntax(line, toks[2].col, format!("bad kind `{}`", toks[2].text)));
                    continue;
                }
                let mut params = Params::new();
                let mut ok = true;
                for t in &toks[3..] {
                    match parse_kv(t, line) {
                        Ok((k, v)) => {
                            params.insert(k, v);
                        }
                        Err(e) => {
                            errors.push(e);
                            ok = false;
                        }
                    }
                }
                if ok {
                    topo.nodes.push(NodeDecl {
                        id: toks[1].text.to_string(),
                        kinds,
                        params,
                        line,
                    });
                }
            }
            "link" => {
                if toks.len() < 3 {
                    errors.push(syntax(line, head.col, "expected `link <idA> <idB> bw=.. delay=..`"));
                    continue;
                }
                let mut params = Params::new();
                let mut ok = true;
                for t in &toks[3..] {
                    match parse_kv(t, line) {
                        Ok((k, v)) => {
                            params.insert(k, v);
                        }
                        Err(e) => {
                            errors.push(e);
                            ok = false;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                let col = toks[0].col;
                let before = errors.len();
                let bw = number(&mut params, "bw", line, col, &mut errors);
                let delay = number(&mut params, "delay", line, col, &mut errors);
                let ber = number(&mut params, "ber", line, col, &mut errors);
                if errors.len() > before {
                    continue;
                }
                let (Some(bw), Some(delay)) = (bw, delay) else {
                    errors.push(syntax(line, col, "link requires bw= and delay="));
                    continue;
                };
                let ber = ber.unwrap_or(0.0);
                if bw <= 0.0 {
                    errors.push(err(line, col, bad("bw", bw)));
                    continue;
                }
                if delay < 0.0 {
                    errors.push(err(line, col, bad("delay", delay)));
                    continue;
                }
                if !(0.0..=1.0).contains(&ber) {
                    errors.push(err(line, col, bad("ber", ber)));
                    continue;
                }
                let a = toks[1].text.to_string();
                let b = toks[2].text.to_string();
                let id = params.remove("id").unwrap_or_else(|| {
                    let base = format!("{a}-{b}");
                    let dup = topo.links.iter().filter(|l| l.id.starts_with(&base)).count();
                    if dup == 0 {
                        base
                    } else {
                        format!("{base}~{}", dup + 1)
                    }
                });
                topo.links.push(LinkDecl {
                    id,
                    a,
                    b,
                    bw,
                    delay,
                    ber,
                    params,
                    line,
                });
            }
            "param" => {
                if toks.len() < 3 {
                    errors.push(syntax(line, head.col, "expected `param <id> <key>=<value>`"));
                    continue;
                }
                for t in &toks[2..] {
                    match parse_kv(t, line) {
                        Ok((key, value)) => topo.params.push(ParamDecl {
                            target: toks[1].text.to_string(),
                            key,
                            value,
                            line,
                        }),
                        Err(e) => errors.push(e),
                    }
                }
            }
            other => errors.push(syntax(
                line,
                head.col,
                format!("unknown declaration `{other}`"),
            )),
        }
    }

    validate(&topo, &mut errors);
    if errors.is_empty() {
        Ok(topo)
    } else {
        errors.sort_by_key(|e| (e.line, e.col));
        Err(errors)
    }
}

fn bad(key: &str, v: f64) -> ConfigErrorKind {
    ConfigErrorKind::BadValue {
        key: key.into(),
        value: v.to_string(),
    }
}

fn validate(topo: &Topology, errors: &mut Vec<ConfigError>) {
    let mut ids = HashSet::new();
    let mut components = HashSet::new();
    for n in &topo.nodes {
        if !ids.insert(n.id.clone()) {
            errors.push(err(n.line, 1, ConfigErrorKind::DuplicateId(n.id.clone())));
        }
        let comps = n.component_ids();
        let unique: HashSet<_> = comps.iter().collect();
        if unique.len() != comps.len() {
            errors.push(syntax(n.line, 1, format!("node `{}` repeats a layer kind", n.id)));
        }
        components.extend(comps);
    }
    for l in &topo.links {
        for end in [&l.a, &l.b] {
            if !ids.contains(end) && !components.contains(end) {
                errors.push(err(l.line, 1, ConfigErrorKind::DanglingEndpoint(end.clone())));
            }
        }
    }
    for l in &topo.links {
        if ids.contains(&l.id) || components.contains(&l.id) || !ids.insert(l.id.clone()) {
            errors.push(err(l.line, 1, ConfigErrorKind::DuplicateId(l.id.clone())));
        }
    }
    for p in &topo.params {
        if !ids.contains(&p.target) && !components.contains(&p.target) {
            errors.push(err(p.line, 1, ConfigErrorKind::UnknownTarget(p.target.clone())));
        }
    }
}

impl Topology {
    /// Renders the topology back into the configuration grammar.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("node {} {}", n.id, n.kinds.join("+")));
            for (k, v) in &n.params {
                out.push_str(&format!(" {k}={v}"));
            }
            out.push('\n');
        }
        for l in &self.links {
            out.push_str(&format!(
                "link {} {} bw={} delay={} ber={} id={}",
                l.a, l.b, l.bw, l.delay, l.ber, l.id
            ));
            for (k, v) in &l.params {
                out.push_str(&format!(" {k}={v}"));
            }
            out.push('\n');
        }
        for p in &self.params {
            out.push_str(&format!("param {} {}={}\n", p.target, p.key, p.value));
        }
        out
    }

    pub fn node(&self, id: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn link(&self, id: &str) -> Option<&LinkDecl> {
        self.links.iter().find(|l| l.id == id)
    }

    /// Resolves a link endpoint to a component name.
    pub fn resolve_endpoint(&self, end: &str) -> Option<String> {
        if let Some(n) = self.node(end) {
            return Some(n.bottom());
        }
        self.nodes
            .iter()
            .flat_map(|n| n.component_ids())
            .find(|c| c == end)
    }

    /// Effective parameters of one layer: node-line params, then `param`
    /// lines for the node, then `param` lines for the component itself.
    pub fn component_params(&self, node: &NodeDecl, component: &str) -> Params {
        let mut out = node.params.clone();
        for p in &self.params {
            if p.target == node.id {
                out.insert(p.key.clone(), p.value.clone());
            }
        }
        if component != node.id {
            for p in &self.params {
                if p.target == component {
                    out.insert(p.key.clone(), p.value.clone());
                }
            }
        }
        out
    }

    /// Link declaration with `param` overrides applied.
    pub fn effective_link(&self, link: &LinkDecl) -> LinkDecl {
        let mut l = link.clone();
        for p in self.params.iter().filter(|p| p.target == link.id) {
            match p.key.as_str() {
                "bw" => l.bw = p.value.parse().unwrap_or(l.bw),
                "delay" => l.delay = p.value.parse().unwrap_or(l.delay),
                "ber" => l.ber = p.value.parse().unwrap_or(l.ber),
                _ => {
                    l.params.insert(p.key.clone(), p.value.clone());
                }
            }
        }
        l
    }
}
