//! Grounded-dialogue evaluation: mask mIoU / Recall, METEOR, CIDEr and CLAIR.

pub mod cider;
pub mod clair;
pub mod grounding;
pub mod meteor;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::CompletionClient;
use crate::datagen::record::{GroundedDialogueRecord, Role};
use crate::error::{Error, Result};
use crate::grounding_head::{parse_phrases, PhraseItem};
use crate::markup;
use crate::mask::MaskTrack;

pub use cider::{cider, CiderScorer};
pub use clair::{clair_judge, ClairOutcome};
pub use grounding::{grounding_scores, match_tracks, st_iou};
pub use meteor::{meteor, MeteorParams};

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub sample_id: String,
    pub predicted: Vec<(String, MaskTrack)>,
    pub reference: Vec<(String, MaskTrack)>,
    pub pred_text: String,
    pub ref_text: String,
}

impl EvalPair {
    pub fn new(
        sample_id: impl Into<String>,
        predicted: Vec<(String, MaskTrack)>,
        reference: Vec<(String, MaskTrack)>,
        pred_text: impl Into<String>,
        ref_text: impl Into<String>,
    ) -> Result<Self> {
        let dims: Vec<_> = predicted
            .iter()
            .chain(&reference)
            .map(|(_, t)| (t.len(), t.dims()))
            .collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Input(
                "mask tracks in one sample differ in frame count or resolution".into(),
            ));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            predicted,
            reference,
            pred_text: pred_text.into(),
            ref_text: ref_text.into(),
        })
    }

    /// Reference side from the record's assistant turns and object masks,
    /// prediction side from its `prediction` field.
    pub fn from_record(record: &GroundedDialogueRecord) -> Result<Self> {
        let prediction = record.prediction.as_ref().ok_or_else(|| {
            Error::Data(format!("record `{}` has no prediction", record.video_id))
        })?;
        let mut reference = Vec::new();
        let mut seen = Vec::new();
        let mut ref_text = Vec::new();
        for turn in record.conversation.iter().filter(|t| t.role == Role::Assistant) {
            ref_text.push(markup::strip(&turn.text).trim().to_string());
            for item in parse_phrases(&turn.text)? {
                if let PhraseItem::Phrase {
                    text,
                    seg_id: Some(Some(id)),
                    ..
                } = item
                {
                    if seen.contains(&id) {
                        continue;
                    }
                    let obj = record.object(&id).ok_or_else(|| {
                        Error::Data(format!("[SEG:{id}] names no object in `{}`", record.video_id))
                    })?;
                    reference.push((text, obj.track()?));
                    seen.push(id);
                }
            }
        }
        let predicted = prediction
            .objects
            .iter()
            .map(|o| Ok((o.phrase.clone(), MaskTrack::from_rle(&o.rle_masks, None)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            record.video_id.clone(),
            predicted,
            reference,
            markup::strip(&prediction.text).trim().to_string(),
            ref_text.join(" "),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub iou_threshold: f64,
    pub meteor: MeteorParams,
    pub cider_n: usize,
    pub cider_sigma: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            iou_threshold: grounding::DEFAULT_IOU_THRESHOLD,
            meteor: MeteorParams::default(),
            cider_n: cider::MAX_N,
            cider_sigma: cider::SIGMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub miou: Option<f64>,
    pub recall: Option<f64>,
    pub meteor: f64,
    pub cider: f64,
    pub clair: Option<f64>,
    pub clair_flagged: bool,
    pub num_reference_objects: usize,
    pub num_predicted_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub miou: f64,
    pub recall: f64,
    pub meteor: f64,
    pub cider: f64,
    pub clair: Option<f64>,
    pub num_samples: usize,
    pub num_grounded_samples: usize,
    pub num_clair_flagged: usize,
}

impl MetricReport {
    pub fn render_table(&self) -> String {
        let fmt = |v: f64| format!("{v:.3}");
        let mut s = String::new();
        s.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8}\n",
            "mIoU", "Recall", "METEOR", "CIDEr", "CLAIR"
        ));
        s.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8}\n",
            fmt(self.miou),
            fmt(self.recall),
            fmt(self.meteor),
            fmt(self.cider),
            self.clair.map_or("-".to_string(), fmt)
        ));
        s.push_str(&format!(
            "samples: {} (grounded: {}, clair flagged: {})\n",
            self.num_samples, self.num_grounded_samples, self.num_clair_flagged
        ));
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores every pair. CIDEr document frequencies come from this corpus's
/// references. When `judge` is given, CLAIR is requested once per sample,
/// keyed by `sample_id`.
pub fn evaluate(
    pairs: &[EvalPair],
    opts: &MetricOptions,
    judge: Option<&dyn CompletionClient>,
) -> Result<MetricReport> {
    let grounding: Vec<Option<(f64, f64)>> = pairs
        .par_iter()
        .map(|p| {
            let pred: Vec<MaskTrack> = p.predicted.iter().map(|(_, t)| t.clone()).collect();
            let refs: Vec<MaskTrack> = p.reference.iter().map(|(_, t)| t.clone()).collect();
            match_tracks(&pred, &refs)
                .map(|m| grounding::sample_grounding(&m, opts.iou_threshold))
        })
        .collect::<Result<_>>()?;
    let meteors: Vec<f64> = pairs
        .par_iter()
        .map(|p| meteor(&p.pred_text, &[p.ref_text.as_str()], opts.meteor))
        .collect();
    let ciders = if pairs.is_empty() {
        Vec::new()
    } else {
        let corpus: Vec<(String, Vec<String>)> = pairs
            .iter()
            .map(|p| (p.pred_text.clone(), vec![p.ref_text.clone()]))
            .collect();
        cider(&corpus, opts.cider_n, opts.cider_sigma)?.per_sample
    };
    let clairs: Vec<Option<ClairOutcome>> = match judge {
        Some(j) => pairs
            .par_iter()
            .map(|p| Some(clair_judge(&p.sample_id, &p.pred_text, &p.ref_text, j)))
            .collect(),
        None => vec![None; pairs.len()],
    };

    let samples: Vec<SampleMetrics> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| SampleMetrics {
            sample_id: p.sample_id.clone(),
            miou: grounding[i].map(|g| g.0),
            recall: grounding[i].map(|g| g.1),
            meteor: meteors[i],
            cider: ciders[i],
            clair: clairs[i].as_ref().and_then(|c| c.score),
            clair_flagged: clairs[i].as_ref().is_some_and(|c| c.flagged),
            num_reference_objects: p.reference.len(),
            num_predicted_objects: p.predicted.len(),
        })
        .collect();
    let clair = judge.and_then(|_| {
        let outcomes: Vec<ClairOutcome> = clairs.iter().flatten().cloned().collect();
        clair::aggregate(&outcomes)
    });
    Ok(MetricReport {
        miou: mean(samples.iter().filter_map(|s| s.miou)),
        recall: mean(samples.iter().filter_map(|s| s.recall)),
        meteor: mean(samples.iter().map(|s| s.meteor)),
        cider: mean(samples.iter().map(|s| s.cider)),
        clair,
        num_samples: samples.len(),
        num_grounded_samples: samples.iter().filter(|s| s.miou.is_some()).count(),
        num_clair_flagged: samples.iter().filter(|s| s.clair_flagged).count(),
        samples,
    })
}
