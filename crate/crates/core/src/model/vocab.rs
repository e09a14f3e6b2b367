//! Word-level vocabulary with reserved markup tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markup::{lex, MarkupToken};
use crate::referring_prompts::{REGION_TOKEN, SEG_TOKEN};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const OPEN: &str = "<p>";
pub const CLOSE: &str = "</p>";
pub const USER: &str = "<user>";
pub const ASSISTANT: &str = "<assistant>";

pub const RESERVED: [&str; 10] = [PAD, BOS, EOS, UNK, REGION_TOKEN, SEG_TOKEN, OPEN, CLOSE, USER, ASSISTANT];

/// A token id plus the object id carried by `<region:id>` / `[SEG:id]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tok {
    pub id: usize,
    pub object: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary does not start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Data("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Lowercased words and single punctuation characters.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocab {
    /// Reserved tokens followed by every word in `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for tok in lex(t) {
                if let MarkupToken::Text { text, .. } = tok {
                    words.extend(split_words(text));
                }
            }
        }
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::try_from(tokens).expect("reserved prefix")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn seg_id(&self) -> usize {
        self.index[SEG_TOKEN]
    }

    pub fn region_id(&self) -> usize {
        self.index[REGION_TOKEN]
    }

    pub fn eos_id(&self) -> usize {
        self.index[EOS]
    }

    /// Tokens never produced by generation.
    pub fn non_generable(&self) -> Vec<usize> {
        [PAD, BOS, UNK, REGION_TOKEN, USER, ASSISTANT].iter().map(|t| self.index[*t]).collect()
    }

    /// Markup-aware encoding; ids on `[SEG:id]` / `<region:id>` are kept on
    /// the token and stripped from the vocabulary entry.
    pub fn encode(&self, text: &str) -> Vec<Tok> {
        let plain = |id| Tok { id, object: None };
        let mut out = Vec::new();
        for tok in lex(text) {
            match tok {
                MarkupToken::Text { text, .. } => out.extend(split_words(text).iter().map(|w| plain(self.id(w)))),
                MarkupToken::Open { .. } => out.push(plain(self.id(OPEN))),
                MarkupToken::Close { .. } => out.push(plain(self.id(CLOSE))),
                MarkupToken::Seg { id, .. } => out.push(Tok {
                    id: self.seg_id(),
                    object: id.map(str::to_string),
                }),
                MarkupToken::Region { id, .. } => out.push(Tok {
                    id: self.region_id(),
                    object: id.map(str::to_string),
                }),
            }
        }
        out
    }

    /// Joins tokens back into markup text, dropping control tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let mut glue_next = true;
        for &id in ids {
            let t = self.token(id);
            if [PAD, BOS, EOS, USER, ASSISTANT].contains(&t) {
                continue;
            }
            let punct = t.chars().count() == 1 && !t.chars().all(char::is_alphanumeric);
            let glue = glue_next || punct || t == CLOSE || t == SEG_TOKEN;
            if !glue {
                s.push(' ');
            }
            s.push_str(t);
            glue_next = t == OPEN;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tokens_come_first() {
        let v = Vocab::build(["What is <region:0> doing?"]);
        assert_eq!(&v.tokens()[..RESERVED.len()], RESERVED.map(String::from).as_slice());
        assert!(v.tokens().contains(&"doing".to_string()));
        assert!(!v.tokens().iter().any(|t| t.contains("region:")));
    }

    #[test]
    fn encode_keeps_object_ids_and_decode_glues_markup() {
        let text = "<p>the red square</p>[SEG:1] moves right.";
        let v = Vocab::build([text]);
        let toks = v.encode(text);
        assert_eq!(toks[0].id, v.id(OPEN));
        let seg = toks.iter().find(|t| t.id == v.seg_id()).unwrap();
        assert_eq!(seg.object.as_deref(), Some("1"));
        let ids: Vec<usize> = toks.iter().map(|t| t.id).collect();
        assert_eq!(v.decode(&ids), "<p>the red square</p>[SEG] moves right.");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(["a b"]);
        assert_eq!(v.encode("zebra")[0].id, v.id(UNK));
    }

    #[test]
    fn serde_round_trip_and_rejects_bad_prefix() {
        let v = Vocab::build(["hello there"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>("[\"a\"]").is_err());
    }
}
