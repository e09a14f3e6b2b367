//! Lexer for the grounded-dialogue markup shared by the data format and the
//! model output: `<p>phrase</p>`, `[SEG]` / `[SEG:id]`, `<region>` /
//! `<region:id>`.

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MarkupToken<'a> {
    Text { offset: usize, text: &'a str },
    Open { offset: usize },
    Close { offset: usize },
    Seg { offset: usize, id: Option<&'a str> },
    Region { offset: usize, id: Option<&'a str> },
}

impl MarkupToken<'_> {
    pub fn offset(&self) -> usize {
        match self {
            MarkupToken::Text { offset, .. }
            | MarkupToken::Open { offset }
            | MarkupToken::Close { offset }
            | MarkupToken::Seg { offset, .. }
            | MarkupToken::Region { offset, .. } => *offset,
        }
    }
}

fn tagged<'a>(rest: &'a str, open: &str, close: char) -> Option<(Option<&'a str>, usize)> {
    let after = rest.strip_prefix(open)?;
    if after.starts_with(close) {
        return Some((None, open.len() + 1));
    }
    let body = after.strip_prefix(':')?;
    let end = body.find(close)?;
    let id = &body[..end];
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '<' || c == '[') {
        return None;
    }
    Some((Some(id), open.len() + 1 + end + 1))
}

/// Splits `text` into markup tags and plain-text runs.
pub fn lex(text: &str) -> Vec<MarkupToken<'_>> {
    let mut out = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        let rest = &text[i..];
        let tag = if rest.starts_with("<p>") {
            Some((MarkupToken::Open { offset: i }, 3))
        } else if rest.starts_with("</p>") {
            Some((MarkupToken::Close { offset: i }, 4))
        } else if let Some((id, len)) = tagged(rest, "[SEG", ']') {
            Some((MarkupToken::Seg { offset: i, id }, len))
        } else if let Some((id, len)) = tagged(rest, "<region", '>') {
            Some((MarkupToken::Region { offset: i, id }, len))
        } else {
            None
        };
        match tag {
            Some((tok, len)) => {
                if text_start < i {
                    out.push(MarkupToken::Text {
                        offset: text_start,
                        text: &text[text_start..i],
                    });
                }
                out.push(tok);
                i += len;
                text_start = i;
            }
            None => {
                i += rest.chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    if text_start < text.len() {
        out.push(MarkupToken::Text {
            offset: text_start,
            text: &text[text_start..],
        });
    }
    out
}

/// Removes all markup tags, keeping the plain text.
pub fn strip(text: &str) -> String {
    lex(text)
        .into_iter()
        .filter_map(|t| match t {
            MarkupToken::Text { text, .. } => Some(text),
            _ => None,
        })
        .collect()
}
