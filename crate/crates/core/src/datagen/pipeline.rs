//! End-to-end annotation path: pseudomasks, filtering, frame sampling,
//! set-of-mark rendering, dialogue synthesis and record assembly.

use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dialogue::{synthesize_dialogue, ObjectBrief, PromptTemplates, MAX_REPROMPTS};
use super::record::{GroundedDialogueRecord, ObjectEntry};
use super::som::{render_som_frames, Palette};
use super::sources::{
    boxes_to_pseudomasks, filter_sources, ObjectTrack, PseudoMaskFlag, Segmenter, SourceAnnotation, SourceKind,
    DEFAULT_BOX_INTERVAL,
};
use crate::client::CompletionClient;
use crate::error::{Error, Result};
use crate::mask::MaskTrack;
use crate::stc_aggregator::uniform_positions;

pub const ANNOTATION_FRAMES: usize = 16;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub num_frames: usize,
    pub box_interval: usize,
    pub max_reprompts: usize,
    /// Source kinds whose single-object videos are discarded.
    pub filter_single_object: Vec<SourceKind>,
    /// Where marked frames are written; image refs are relative to it.
    pub som_dir: Option<PathBuf>,
    pub palette: Palette,
    pub templates: PromptTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_frames: ANNOTATION_FRAMES,
            box_interval: DEFAULT_BOX_INTERVAL,
            max_reprompts: MAX_REPROMPTS,
            filter_single_object: vec![SourceKind::MaskIndex],
            som_dir: None,
            palette: Palette::default(),
            templates: PromptTemplates::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedVideo {
    pub video_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub records: Vec<GroundedDialogueRecord>,
    pub dropped: Vec<DroppedVideo>,
    pub flags: Vec<PseudoMaskFlag>,
}

enum Outcome {
    Kept(Box<GroundedDialogueRecord>, Vec<PseudoMaskFlag>),
    Dropped(String, Vec<PseudoMaskFlag>),
}

fn process(
    source: &SourceAnnotation,
    client: &dyn CompletionClient,
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<Outcome> {
    let (source, flags) = if source.has_boxes() {
        boxes_to_pseudomasks(source, segmenter, cfg.box_interval)?
    } else {
        (source.clone(), Vec::new())
    };
    if source.frames.len() < cfg.num_frames {
        return Ok(Outcome::Dropped(
            format!("{} frames, {} needed", source.frames.len(), cfg.num_frames),
            flags,
        ));
    }
    let picks = uniform_positions(source.frames.len(), cfg.num_frames);
    let mut tracks: Vec<MaskTrack> = Vec::new();
    let mut kept = Vec::new();
    for o in &source.objects {
        let ObjectTrack::Masks(t) = &o.track else {
            return Err(Error::Data(format!("object `{}` still has boxes", o.object_id)));
        };
        let sub = MaskTrack::new(picks.iter().map(|&i| t.masks[i].clone()).collect(), Some(o.object_id.clone()))?;
        if sub.masks.iter().all(|m| m.is_empty()) {
            warn!("`{}`: object `{}` is absent from every sampled frame", source.video_id, o.object_id);
            continue;
        }
        tracks.push(sub);
        kept.push(o);
    }
    if kept.is_empty() {
        return Ok(Outcome::Dropped("no object visible in the sampled frames".into(), flags));
    }
    let frames = picks.iter().map(|&i| source.load_frame(i)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = kept.iter().map(|o| o.object_id.clone()).collect();
    let (marked, colors) = render_som_frames(&frames, &tracks, &ids, &cfg.palette)?;
    let image_refs: Vec<String> = (0..marked.len())
        .map(|k| format!("{}/{k:02}.png", source.video_id))
        .collect();
    if let Some(dir) = &cfg.som_dir {
        std::fs::create_dir_all(dir.join(&source.video_id))?;
        for (img, r) in marked.iter().zip(&image_refs) {
            img.save(dir.join(r))?;
        }
    }
    let briefs: Vec<ObjectBrief> = kept
        .iter()
        .zip(&colors)
        .map(|(o, c)| ObjectBrief {
            object_id: o.object_id.clone(),
            color_tag: c.color.name.clone(),
            category: o.category.clone(),
            expression: o.expression.clone(),
        })
        .collect();
    let parsed = match synthesize_dialogue(&source.video_id, &image_refs, &briefs, client, &cfg.templates, cfg.max_reprompts) {
        Ok(Some(p)) => p,
        Ok(None) => return Ok(Outcome::Dropped("annotation failed validation".into(), flags)),
        Err(e) => return Ok(Outcome::Dropped(format!("annotation client: {e}"), flags)),
    };
    let objects = briefs
        .iter()
        .zip(&tracks)
        .map(|(b, t)| ObjectEntry {
            object_id: b.object_id.clone(),
            color_tag: b.color_tag.clone(),
            rle_masks: t.to_rle(),
            category: b.category.clone(),
        })
        .collect();
    let record = GroundedDialogueRecord {
        video_id: source.video_id.clone(),
        sampled_frames: picks.iter().map(|&i| source.frames[i].clone()).collect(),
        objects,
        descriptions: parsed.descriptions,
        conversation: parsed.conversation,
        source: Some(source.source.clone()),
        synthetic: None,
        prediction: None,
    };
    Ok(Outcome::Kept(Box::new(record), flags))
}

/// Runs every source through the annotation path in parallel; output order
/// follows input order.
pub fn run_pipeline(
    sources: Vec<SourceAnnotation>,
    client: &dyn CompletionClient,
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let total = sources.len();
    let sources = filter_sources(sources, &cfg.filter_single_object);
    let mut dropped: Vec<DroppedVideo> = Vec::new();
    if sources.len() < total {
        warn!("{} single-object video(s) filtered out", total - sources.len());
    }
    let outcomes = sources
        .par_iter()
        .map(|s| process(s, client, segmenter, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut flags = Vec::new();
    for (s, o) in sources.iter().zip(outcomes) {
        match o {
            Outcome::Kept(r, f) => {
                records.push(*r);
                flags.extend(f);
            }
            Outcome::Dropped(reason, f) => {
                warn!("dropped `{}`: {reason}", s.video_id);
                dropped.push(DroppedVideo {
                    video_id: s.video_id.clone(),
                    reason,
                });
                flags.extend(f);
            }
        }
    }
    info!("{} record(s) kept, {} dropped", records.len(), dropped.len());
    Ok(PipelineOutput {
        records,
        dropped,
        flags,
    })
}
