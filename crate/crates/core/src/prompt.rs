//! Prompt assembly and the `(type: [e1, e2])` target format.
//!
//! A prompt lists entity examples under the entity header, context examples
//! under the context header, then the task header and the raw sentence, in
//! that order and newline-separated.
//!
//! Target grammar:
//!
//! ```text
//! output := "(none)" | tuple ("," ws tuple)*
//! tuple  := "(" type ":" ws "[" entity-list? "]" ")"
//! ```
//!
//! Inside entity strings `\`, `,` and `]` are backslash-escaped; inside type
//! names `\` and `:` are.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::index::EntityMention;

pub const NONE_MARKER: &str = "(none)";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` is missing required slot {{{slot}}}")]
    MissingSlot { template: &'static str, slot: &'static str },
    #[error("template `{template}` uses unknown slot {{{slot}}}")]
    UnknownSlot { template: &'static str, slot: String },
    #[error("header `{0}` is empty")]
    EmptyHeader(&'static str),
    #[error("line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at byte {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub entity_type: String,
    pub entities: Vec<String>,
}

impl Annotation {
    pub fn new<S: Into<String>>(entity_type: impl Into<String>, entities: impl IntoIterator<Item = S>) -> Self {
        Self {
            entity_type: entity_type.into(),
            entities: entities.into_iter().map(Into::into).collect(),
        }
    }
}

/// Groups mentions by type in first-appearance order.
pub fn annotations_from_mentions(mentions: &[EntityMention]) -> Vec<Annotation> {
    let mut out: Vec<Annotation> = Vec::new();
    for m in mentions {
        match out.iter_mut().find(|a| a.entity_type == m.entity_type) {
            Some(a) => a.entities.push(m.text.clone()),
            None => out.push(Annotation::new(m.entity_type.clone(), [m.text.clone()])),
        }
    }
    out
}

fn escape_into(out: &mut String, s: &str, special: &[char]) {
    for c in s.chars() {
        if c == '\\' || special.contains(&c) {
            out.push('\\');
        }
        out.push(c);
    }
}

fn join_entities(entities: &[String]) -> String {
    let mut out = String::new();
    for (i, e) in entities.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        escape_into(&mut out, e, &[',', ']']);
    }
    out
}

pub fn serialize_target(annotations: &[Annotation]) -> String {
    if annotations.is_empty() {
        return NONE_MARKER.to_string();
    }
    let mut out = String::new();
    for (i, a) in annotations.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push('(');
        escape_into(&mut out, &a.entity_type, &[':']);
        out.push_str(": [");
        out.push_str(&join_entities(&a.entities));
        out.push_str("])");
    }
    out
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn expect(&mut self, want: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => self.fail(format!("expected `{want}`, found `{c}`")),
            None => self.fail(format!("expected `{want}`, found end of input")),
        }
    }

    /// Reads until an unescaped terminator, returning the unescaped text and
    /// the terminator. The terminator is consumed.
    fn until(&mut self, terminators: &[char], what: &str) -> Result<(String, char), ParseError> {
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return self.fail(format!("unterminated {what}")),
                Some('\\') => match self.bump() {
                    Some(c) => out.push(c),
                    None => return self.fail(format!("dangling escape in {what}")),
                },
                Some(c) if terminators.contains(&c) => return Ok((out, c)),
                Some(c) => out.push(c),
            }
        }
    }

    fn tuple(&mut self) -> Result<Annotation, ParseError> {
        self.expect('(')?;
        self.skip_ws();
        let type_start = self.pos;
        let (raw_type, _) = self.until(&[':'], "entity type")?;
        let entity_type = raw_type.trim().to_string();
        if entity_type.is_empty() {
            return Err(ParseError {
                offset: type_start,
                reason: "empty entity type".into(),
            });
        }
        self.skip_ws();
        self.expect('[')?;
        let mut entities = Vec::new();
        self.skip_ws();
        if self.peek() == Some(']') {
            self.bump();
        } else {
            loop {
                let start = self.pos;
                let (raw, term) = self.until(&[',', ']'], "entity list")?;
                let entity = raw.trim();
                if entity.is_empty() {
                    return Err(ParseError {
                        offset: start,
                        reason: "empty entity".into(),
                    });
                }
                entities.push(entity.to_string());
                if term == ']' {
                    break;
                }
            }
        }
        self.skip_ws();
        self.expect(')')?;
        Ok(Annotation { entity_type, entities })
    }
}

/// Parses model output in the target grammar, tolerating whitespace between tokens.
pub fn parse_output(text: &str) -> Result<Vec<Annotation>, ParseError> {
    let mut cur = Cursor { src: text, pos: 0 };
    cur.skip_ws();
    if cur.src[cur.pos..].trim_end() == NONE_MARKER {
        return Ok(Vec::new());
    }
    let mut out = vec![cur.tuple()?];
    loop {
        cur.skip_ws();
        match cur.peek() {
            None => return Ok(out),
            Some(',') => {
                cur.bump();
                cur.skip_ws();
                out.push(cur.tuple()?);
            }
            Some(c) => return cur.fail(format!("expected `,` or end of input, found `{c}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub entity_header: String,
    pub context_header: String,
    pub task_header: String,
    /// Slots: `{type}`, `{entities}`.
    pub entity_line: String,
    /// Slots: `{text}`, `{annotations}`.
    pub context_line: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            entity_header: "Entity examples by type:".into(),
            context_header: "Context examples:".into(),
            task_header:
                "Extract entities from the following sentence and answer in the format (type: [entities]):"
                    .into(),
            entity_line: "{type}: [{entities}]".into(),
            context_line: "Sentence: {text}\nAnswer: {annotations}".into(),
        }
    }
}

const ENTITY_SLOTS: [&str; 2] = ["type", "entities"];
const CONTEXT_SLOTS: [&str; 2] = ["text", "annotations"];

/// Single-pass `{slot}` substitution; values are never re-scanned. Braces
/// that do not enclose an identifier are literal.
fn render(
    template: &str,
    name: &'static str,
    values: &[(&'static str, &str)],
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let slot_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if slot_len > 0 && after[slot_len..].starts_with('}') {
            let slot = &after[..slot_len];
            let value = values
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::UnknownSlot {
                    template: name,
                    slot: slot.to_string(),
                })?;
            out.push_str(value);
            rest = &after[slot_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<(), TemplateError> {
        for (name, header) in [
            ("entity_header", &self.entity_header),
            ("context_header", &self.context_header),
            ("task_header", &self.task_header),
        ] {
            if header.trim().is_empty() {
                return Err(TemplateError::EmptyHeader(name));
            }
        }
        for (name, template, slots) in [
            ("entity_line", &self.entity_line, ENTITY_SLOTS),
            ("context_line", &self.context_line, CONTEXT_SLOTS),
        ] {
            for slot in slots {
                if !template.contains(&format!("{{{slot}}}")) {
                    return Err(TemplateError::MissingSlot { template: name, slot });
                }
            }
            let probe: Vec<(&'static str, &str)> = slots.iter().map(|s| (*s, "")).collect();
            render(template, name, &probe)?;
        }
        Ok(())
    }

    /// Parses `key=value` lines. `#` starts a comment line; `\n` and `\\`
    /// escapes are honored in values. Unset keys keep their defaults.
    pub fn from_config_str(text: &str) -> Result<Self, TemplateError> {
        let mut t = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TemplateError::Config {
                line: line_no,
                reason: "expected key=value".into(),
            })?;
            let value = unescape_value(value).map_err(|reason| TemplateError::Config {
                line: line_no,
                reason,
            })?;
            let slot = match key.trim() {
                "entity_header" => &mut t.entity_header,
                "context_header" => &mut t.context_header,
                "task_header" => &mut t.task_header,
                "entity_line" => &mut t.entity_line,
                "context_line" => &mut t.context_line,
                other => {
                    return Err(TemplateError::Config {
                        line: line_no,
                        reason: format!("unknown key `{other}`"),
                    })
                }
            };
            *slot = value;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_config_str(&text)
    }
}

pub(crate) fn unescape_value(raw: &str) -> Result<String, String> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unsupported escape `\\{other}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextExample {
    pub text: String,
    pub annotations: Vec<Annotation>,
}

/// Entity strings per type, in declared type order.
pub type EntityExamples = Vec<(String, Vec<String>)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub source_sample_id: String,
    pub input_text: String,
    pub expected_target: Option<String>,
    pub entity_examples: EntityExamples,
    pub context_examples: Vec<ContextExample>,
}

/// Builds the model input. Types without examples are skipped; an empty
/// section is rendered as its header followed by `(none)`.
pub fn build_input(
    sample_text: &str,
    entity_examples: &[(String, Vec<String>)],
    context_examples: &[ContextExample],
    templates: &PromptTemplates,
) -> Result<String, TemplateError> {
    templates.validate()?;
    let mut out = String::new();
    out.push_str(&templates.entity_header);
    let mut any = false;
    for (entity_type, entities) in entity_examples.iter().filter(|(_, e)| !e.is_empty()) {
        let line = render(
            &templates.entity_line,
            "entity_line",
            &[("type", entity_type), ("entities", &join_entities(entities))],
        )?;
        let _ = write!(out, "\n{line}");
        any = true;
    }
    if !any {
        let _ = write!(out, "\n{NONE_MARKER}");
    }

    let _ = write!(out, "\n{}", templates.context_header);
    if context_examples.is_empty() {
        let _ = write!(out, "\n{NONE_MARKER}");
    }
    for example in context_examples {
        let line = render(
            &templates.context_line,
            "context_line",
            &[
                ("text", &example.text),
                ("annotations", &serialize_target(&example.annotations)),
            ],
        )?;
        let _ = write!(out, "\n{line}");
    }

    let _ = write!(out, "\n{}\n{sample_text}", templates.task_header);
    Ok(out)
}
