//! The grounded-dialogue JSONL record and its reader/writer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskTrack, Rle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub object_id: String,
    pub color_tag: String,
    /// One mask per sampled frame.
    pub rle_masks: Vec<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ObjectEntry {
    pub fn track(&self) -> Result<MaskTrack> {
        MaskTrack::from_rle(&self.rle_masks, Some(self.object_id.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Description {
    pub object_id: String,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

/// One moving shape of a synthetic clip. Position of frame `t` is
/// `(x0 + vx t, y0 + vy t)` for the top-left corner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub object_id: String,
    pub kind: ShapeKind,
    pub color_name: String,
    pub rgb: [u8; 3],
    pub size: i32,
    pub x0: i32,
    pub y0: i32,
    pub vx: i32,
    pub vy: i32,
}

/// Everything needed to re-render a synthetic clip pixel-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub background: [u8; 3],
    pub num_frames: usize,
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedObject {
    pub phrase: String,
    pub rle_masks: Vec<Rle>,
}

/// Model output attached to a record for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub text: String,
    #[serde(default)]
    pub objects: Vec<PredictedObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundedDialogueRecord {
    pub video_id: String,
    pub sampled_frames: Vec<String>,
    pub objects: Vec<ObjectEntry>,
    pub descriptions: Vec<Description>,
    pub conversation: Vec<Turn>,
    /// Source dataset kind, used for the corpus ledger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticScene>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
}

impl GroundedDialogueRecord {
    pub fn object(&self, id: &str) -> Option<&ObjectEntry> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.object_id == id)
    }

    /// Number of user/assistant exchanges.
    pub fn num_qa_pairs(&self) -> usize {
        self.conversation
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .count()
    }

    /// Checks the color–object bijection.
    pub fn colors_are_bijective(&self) -> bool {
        let mut colors: Vec<&str> = self.objects.iter().map(|o| o.color_tag.as_str()).collect();
        let mut ids: Vec<&str> = self.objects.iter().map(|o| o.object_id.as_str()).collect();
        colors.sort_unstable();
        colors.dedup();
        ids.sort_unstable();
        ids.dedup();
        colors.len() == self.objects.len() && ids.len() == self.objects.len()
    }
}

pub fn to_json_line(record: &GroundedDialogueRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

pub fn write_jsonl<W: Write>(records: &[GroundedDialogueRecord], mut out: W) -> Result<()> {
    for r in records {
        out.write_all(to_json_line(r)?.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn emit_jsonl(records: &[GroundedDialogueRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(records, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads records, skipping blank lines. Errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<GroundedDialogueRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<GroundedDialogueRecord>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Per-source clip / QA / description counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusLedger {
    pub rows: BTreeMap<String, LedgerRow>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub clips: usize,
    pub qa_pairs: usize,
    pub descriptions: usize,
}

impl CorpusLedger {
    pub fn from_records(records: &[GroundedDialogueRecord]) -> Self {
        let mut rows: BTreeMap<String, LedgerRow> = BTreeMap::new();
        for r in records {
            let row = rows
                .entry(r.source.clone().unwrap_or_else(|| "unknown".into()))
                .or_default();
            row.clips += 1;
            row.qa_pairs += r.num_qa_pairs();
            row.descriptions += r.descriptions.len();
        }
        Self { rows }
    }

    pub fn total(&self) -> LedgerRow {
        self.rows.values().fold(LedgerRow::default(), |acc, r| LedgerRow {
            clips: acc.clips + r.clips,
            qa_pairs: acc.qa_pairs + r.qa_pairs,
            descriptions: acc.descriptions + r.descriptions,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>10} {:>13}\n", "source", "clips", "qa_pairs", "descriptions");
        for (name, r) in &self.rows {
            s.push_str(&format!(
                "{:<16} {:>8} {:>10} {:>13}\n",
                name, r.clips, r.qa_pairs, r.descriptions
            ));
        }
        let t = self.total();
        s.push_str(&format!(
            "{:<16} {:>8} {:>10} {:>13}\n",
            "total", t.clips, t.qa_pairs, t.descriptions
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn record(id: &str) -> GroundedDialogueRecord {
        GroundedDialogueRecord {
            video_id: id.into(),
            sampled_frames: vec!["f0.png".into()],
            objects: vec![ObjectEntry {
                object_id: "0".into(),
                color_tag: "red".into(),
                rle_masks: vec![Rle {
                    width: 2,
                    height: 1,
                    counts: vec![1, 1],
                }],
                category: None,
            }],
            descriptions: vec![],
            conversation: vec![
                Turn {
                    role: Role::User,
                    text: "What is <region:0> doing?".into(),
                },
                Turn {
                    role: Role::Assistant,
                    text: "<p>it</p>[SEG:0] waits.".into(),
                },
            ],
            source: Some("test".into()),
            synthetic: None,
            prediction: None,
        }
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let good = to_json_line(&record("a")).unwrap();
        let text = format!("{good}\n{}\n", &good[..good.len() / 2]);
        match read_jsonl(Cursor::new(text)) {
            Err(Error::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::to_value(record("a")).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(read_jsonl(Cursor::new(v.to_string())).is_err());
    }

    #[test]
    fn ledger_counts_by_source() {
        let recs = vec![record("a"), record("b")];
        let ledger = CorpusLedger::from_records(&recs);
        assert_eq!(
            ledger.total(),
            LedgerRow {
                clips: 2,
                qa_pairs: 2,
                descriptions: 0
            }
        );
        assert!(ledger.render().contains("test"));
    }
}
