//! Trace records: the observable output of a simulation run.
//!
//! Every record renders to one line of the form
//!
//! ```text
//! t=<time> level=<0-3> comp=<id> kind=<tag> <key=value ...>
//! ```
//!
//! Values never contain whitespace. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

/// Highest debug level. Level 3 shows every record.
pub const MAX_DEBUG_LEVEL: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: f64,
    pub level: u8,
    pub comp: String,
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl TraceRecord {
    pub fn new(level: u8, kind: &str) -> Self {
        TraceRecord {
            t: 0.0,
            level: level.min(MAX_DEBUG_LEVEL),
            comp: String::new(),
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    /// Appends a field. Whitespace in the rendered value is replaced by `_`.
    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        let v = value.to_string();
        let v = if v.chars().any(char::is_whitespace) {
            v.replace(char::is_whitespace, "_")
        } else {
            v
        };
        self.fields.push((key.to_string(), v));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    /// Parses a rendered trace line back into a record.
    pub fn parse(line: &str) -> Option<TraceRecord> {
        let mut t = None;
        let mut level = None;
        let mut comp = None;
        let mut kind = None;
        let mut fields = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=')?;
            match k {
                "t" if t.is_none() => t = Some(v.parse().ok()?),
                "level" if level.is_none() => level = Some(v.parse().ok()?),
                "comp" if comp.is_none() => comp = Some(v.to_string()),
                "kind" if kind.is_none() => kind = Some(v.to_string()),
                _ => fields.push((k.to_string(), v.to_string())),
            }
        }
        Some(TraceRecord {
            t: t?,
            level: level?,
            comp: comp?,
            kind: kind?,
            fields,
        })
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={:.9} level={} comp={} kind={}",
            self.t, self.level, self.comp, self.kind
        )?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// In-memory trace of a run. All records are retained regardless of the
/// debug level; the level only filters what is rendered.
#[derive(Debug, Default)]
pub struct TraceLog {
    records: Vec<TraceRecord>,
    counters: BTreeMap<String, BTreeMap<String, u64>>,
    debug_level: u8,
}

impl TraceLog {
    pub fn new(debug_level: u8) -> Self {
        TraceLog {
            debug_level: debug_level.min(MAX_DEBUG_LEVEL),
            ..Default::default()
        }
    }

    pub fn push(&mut self, rec: TraceRecord) {
        *self
            .counters
            .entry(rec.comp.clone())
            .or_default()
            .entry(rec.kind.clone())
            .or_default() += 1;
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn debug_level(&self) -> u8 {
        self.debug_level
    }

    pub fn set_debug_level(&mut self, level: u8) {
        self.debug_level = level.min(MAX_DEBUG_LEVEL);
    }

    /// Per component, per record kind counts over the full (level 3) trace.
    pub fn counters(&self) -> &BTreeMap<String, BTreeMap<String, u64>> {
        &self.counters
    }

    /// Records visible at `level`.
    pub fn visible(&self, level: u8) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.level <= level)
    }

    /// Renders the records visible at the current debug level, one per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in self.visible(self.debug_level) {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

/// Recomputes per-component kind counts from rendered trace lines.
pub fn count_lines(text: &str) -> BTreeMap<String, BTreeMap<String, u64>> {
    let mut out: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for rec in text.lines().filter_map(TraceRecord::parse) {
        *out.entry(rec.comp).or_default().entry(rec.kind).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_parses_back() {
        let mut r = TraceRecord::new(1, "send").with("seq", 4).with("color", "data");
        r.t = 0.25;
        r.comp = "a.gbn".into();
        let line = r.to_string();
        assert_eq!(
            line,
            "t=0.250000000 level=1 comp=a.gbn kind=send seq=4 color=data"
        );
        let back = TraceRecord::parse(&line).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn whitespace_in_values_is_replaced() {
        let r = TraceRecord::new(0, "note").with("msg", "two words");
        assert_eq!(r.get("msg"), Some("two_words"));
    }

    #[test]
    fn level_filters_rendering_only() {
        let mut log = TraceLog::new(0);
        log.push(TraceRecord::new(0, "a"));
        log.push(TraceRecord::new(3, "b"));
        assert_eq!(log.render().lines().count(), 1);
        assert_eq!(log.len(), 2);
        log.set_debug_level(3);
        assert_eq!(log.render().lines().count(), 2);
    }
}
