//! Grammar and referential-integrity checks for annotation-model replies.
//!
//! Reply format, one item per line:
//!
//! ```text
//! [DESC <object>] free-text description
//! USER: question, may use <region:<object>>
//! ASSISTANT: answer using <p>phrase</p>[SEG:<object>]
//! ```
//!
//! `<object>` may be the object id or its color tag; color tags are
//! rewritten to ids in the parsed output.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::record::{Description, Role, Turn};
use crate::markup::{lex, MarkupToken};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnclosedTag,
    UnexpectedClose,
    NestedTag,
    MissingObjectRef,
    UnknownObject,
    MalformedTag,
    MisplacedTag,
    BadTurn,
    TooFewTurns,
    MissingDescription,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Byte offset into the validated text.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}: {}", self.kind, self.offset, self.message)
    }
}

/// A declared object and the color it is marked with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeclaredObject {
    pub object_id: String,
    pub color_tag: String,
}

impl DeclaredObject {
    pub fn new(object_id: impl Into<String>, color_tag: impl Into<String>) -> Self {
        Self {
            object_id: object_id.into(),
            color_tag: color_tag.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDialogue {
    pub descriptions: Vec<Description>,
    pub conversation: Vec<Turn>,
}

fn resolve<'a>(name: &str, declared: &'a [DeclaredObject]) -> Option<&'a str> {
    declared
        .iter()
        .find(|o| o.object_id == name)
        .or_else(|| declared.iter().find(|o| o.color_tag.eq_ignore_ascii_case(name)))
        .map(|o| o.object_id.as_str())
}

const TAG_PREFIXES: [&str; 4] = ["[SEG", "<region", "<p", "</p"];

fn v(kind: ViolationKind, offset: usize, message: impl Into<String>) -> Violation {
    Violation {
        kind,
        offset,
        message: message.into(),
    }
}

/// Checks one turn's markup. Offsets are relative to `base`. Returns the text
/// with color-tag references rewritten to object ids.
pub fn validate_markup(
    text: &str,
    role: Role,
    declared: &[DeclaredObject],
    base: usize,
    out: &mut Vec<Violation>,
) -> String {
    let mut rewritten = String::with_capacity(text.len());
    let mut open: Option<usize> = None;
    let mut just_closed: Option<usize> = None;
    let assistant = role == Role::Assistant;
    let check_ref = |id: Option<&str>, offset: usize, tag: &str, out: &mut Vec<Violation>| match id {
        None => {
            out.push(v(ViolationKind::MissingObjectRef, base + offset, format!("{tag} has no object id")));
            None
        }
        Some(name) => match resolve(name, declared) {
            Some(id) => Some(id.to_string()),
            None => {
                out.push(v(ViolationKind::UnknownObject, base + offset, format!("{tag} names undeclared object `{name}`")));
                None
            }
        },
    };
    for tok in lex(text) {
        if !matches!(tok, MarkupToken::Seg { .. }) {
            if let Some(close) = just_closed.take() {
                out.push(v(ViolationKind::MissingObjectRef, base + close, "</p> is not followed by [SEG:id]"));
            }
        }
        match tok {
            MarkupToken::Text { offset, text: t } => {
                for prefix in TAG_PREFIXES {
                    let mut from = 0;
                    while let Some(i) = t[from..].find(prefix) {
                        out.push(v(ViolationKind::MalformedTag, base + offset + from + i, format!("malformed `{prefix}` tag")));
                        from += i + prefix.len();
                    }
                }
                rewritten.push_str(t);
            }
            MarkupToken::Open { offset } => {
                if !assistant {
                    out.push(v(ViolationKind::MisplacedTag, base + offset, "<p> outside an assistant turn"));
                } else if let Some(outer) = open {
                    out.push(v(ViolationKind::NestedTag, base + offset, format!("<p> inside the <p> opened at byte {}", base + outer)));
                } else {
                    open = Some(offset);
                }
                rewritten.push_str("<p>");
            }
            MarkupToken::Close { offset } => {
                if !assistant {
                    out.push(v(ViolationKind::MisplacedTag, base + offset, "</p> outside an assistant turn"));
                } else if open.take().is_none() {
                    out.push(v(ViolationKind::UnexpectedClose, base + offset, "</p> without matching <p>"));
                } else {
                    just_closed = Some(offset);
                }
                rewritten.push_str("</p>");
            }
            MarkupToken::Seg { offset, id } => {
                if !assistant {
                    out.push(v(ViolationKind::MisplacedTag, base + offset, "[SEG] outside an assistant turn"));
                } else if let Some(start) = open {
                    out.push(v(ViolationKind::UnclosedTag, base + start, "[SEG] inside an unclosed <p>"));
                } else if just_closed.take().is_none() {
                    out.push(v(ViolationKind::MisplacedTag, base + offset, "[SEG] does not follow a </p>"));
                }
                match check_ref(id, offset, "[SEG]", out) {
                    Some(id) => rewritten.push_str(&format!("[SEG:{id}]")),
                    None => rewritten.push_str("[SEG]"),
                }
            }
            MarkupToken::Region { offset, id } => {
                match check_ref(id, offset, "<region>", out) {
                    Some(id) => rewritten.push_str(&format!("<region:{id}>")),
                    None => rewritten.push_str("<region>"),
                }
            }
        }
    }
    if let Some(close) = just_closed {
        out.push(v(ViolationKind::MissingObjectRef, base + close, "</p> is not followed by [SEG:id]"));
    }
    if let Some(start) = open {
        out.push(v(ViolationKind::UnclosedTag, base + start, "unclosed <p>"));
    }
    rewritten
}

fn split_desc(line: &str) -> Option<(&str, usize, &str)> {
    let rest = line.strip_prefix("[DESC ")?;
    let end = rest.find(']')?;
    let name = rest[..end].trim();
    let body = &rest[end + 1..];
    let lead = body.len() - body.trim_start().len();
    Some((name, "[DESC ".len() + end + 1 + lead, body.trim()))
}

/// Parses a reply into descriptions and conversation, or returns every
/// violation found.
pub fn parse_and_validate(
    raw: &str,
    declared: &[DeclaredObject],
) -> std::result::Result<ParsedDialogue, Vec<Violation>> {
    let mut errors = Vec::new();
    let mut descriptions: Vec<Description> = Vec::new();
    let mut conversation: Vec<Turn> = Vec::new();
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let content = line.trim_end_matches(['\n', '\r']);
        let trimmed = content.trim_start();
        let start = start + (content.len() - trimmed.len());
        if trimmed.is_empty() {
            continue;
        }
        if let Some((name, body_at, body)) = split_desc(trimmed) {
            match resolve(name, declared) {
                Some(id) => {
                    let text = validate_markup(body, Role::User, declared, start + body_at, &mut errors);
                    descriptions.push(Description {
                        object_id: id.to_string(),
                        text,
                    });
                }
                None => errors.push(v(ViolationKind::UnknownObject, start, format!("description of undeclared object `{name}`"))),
            }
            continue;
        }
        let role_prefix = [("USER:", Role::User), ("ASSISTANT:", Role::Assistant)]
            .into_iter()
            .find(|(p, _)| trimmed.starts_with(p));
        let Some((prefix, role)) = role_prefix else {
            errors.push(v(ViolationKind::BadTurn, start, "line is neither [DESC id], USER: nor ASSISTANT:"));
            continue;
        };
        let body = &trimmed[prefix.len()..];
        let lead = body.len() - body.trim_start().len();
        let body_at = start + prefix.len() + lead;
        let expected = if conversation.len().is_multiple_of(2) { Role::User } else { Role::Assistant };
        if role != expected {
            errors.push(v(ViolationKind::BadTurn, start, format!("expected a {expected:?} turn")));
        }
        let text = validate_markup(body.trim(), role, declared, body_at, &mut errors);
        conversation.push(Turn { role, text });
    }
    if conversation.len() < 2 {
        errors.push(v(ViolationKind::TooFewTurns, raw.len(), "need at least one USER/ASSISTANT exchange"));
    } else if conversation.last().map(|t| t.role) != Some(Role::Assistant) {
        errors.push(v(ViolationKind::BadTurn, raw.len(), "conversation ends on a USER turn"));
    }
    for obj in declared {
        if !descriptions.iter().any(|d| d.object_id == obj.object_id) {
            errors.push(v(ViolationKind::MissingDescription, raw.len(), format!("no description for object `{}`", obj.object_id)));
        }
    }
    if errors.is_empty() {
        Ok(ParsedDialogue {
            descriptions,
            conversation,
        })
    } else {
        errors.sort_by_key(|e| e.offset);
        Err(errors)
    }
}

/// Re-checks a finished record's turns and descriptions.
pub fn validate_record(record: &super::record::GroundedDialogueRecord) -> Vec<Violation> {
    let declared: Vec<DeclaredObject> = record
        .objects
        .iter()
        .map(|o| DeclaredObject::new(&o.object_id, &o.color_tag))
        .collect();
    let mut errors = Vec::new();
    let mut base = 0;
    for d in &record.descriptions {
        if resolve(&d.object_id, &declared).is_none() {
            errors.push(v(ViolationKind::UnknownObject, base, format!("description of undeclared object `{}`", d.object_id)));
        }
        validate_markup(&d.text, Role::User, &declared, base, &mut errors);
        base += d.text.len() + 1;
    }
    for (i, t) in record.conversation.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if t.role != expected {
            errors.push(v(ViolationKind::BadTurn, base, format!("turn {i} should be {expected:?}")));
        }
        validate_markup(&t.text, t.role, &declared, base, &mut errors);
        base += t.text.len() + 1;
    }
    if record.conversation.len() < 2 || !record.conversation.len().is_multiple_of(2) {
        errors.push(v(ViolationKind::TooFewTurns, base, "conversation must be complete USER/ASSISTANT exchanges"));
    }
    errors
}
