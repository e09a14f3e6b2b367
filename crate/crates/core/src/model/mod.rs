//! The toy end-to-end model: frozen patch encoder, aggregator, token stream,
//! causal LM and mask decoder, with losses, training, generation and
//! checkpoints.

pub mod checkpoint;
pub mod encoder;
pub mod generate;
pub mod lm;
pub mod train;
pub mod vocab;

use std::path::Path;
use std::rc::Rc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::datagen::record::{GroundedDialogueRecord, Role};
use crate::error::{Error, Result};
use crate::grounding_head::{MaskDecoder, ToyMaskDecoder};
use crate::mask::MaskTrack;
use crate::params::{xavier_uniform, zeros, ParamStore};
use crate::referring_prompts::{assemble_graph, mask_pool_graph, select_patches, StreamLayout, DEFAULT_MIN_COVERAGE};
use crate::stc_aggregator::{self, uniform_positions, AggregatorConfig, AttentionRecorder, VideoFeatures};

pub use checkpoint::Checkpoint;
pub use encoder::ToyEncoder;
pub use generate::{generate, predict_record, Generation};
pub use lm::LmConfig;
pub use train::{train, LossRow, TrainConfig, TrainReport};
pub use vocab::{Tok, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub aggregator: AggregatorConfig,
    pub lm: LmConfig,
    pub frame_width: usize,
    pub frame_height: usize,
    pub patch_size: usize,
    pub num_keyframes: usize,
    pub max_new_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            aggregator: AggregatorConfig::default(),
            lm: LmConfig::default(),
            frame_width: 32,
            frame_height: 32,
            patch_size: 8,
            num_keyframes: 5,
            max_new_tokens: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.aggregator.validate()?;
        self.lm.validate(self.aggregator.d_llm)?;
        if self.num_keyframes == 0 {
            return Err(Error::Config("num_keyframes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss term weights: `total = text·CE + bce·BCE + dice·Dice`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            bce: 1.0,
            dice: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
}

pub const DICE_SMOOTH: f64 = 1.0;

/// Frames of a record: re-rendered for synthetic clips, otherwise read from
/// `frames_root` joined with each sampled frame reference.
pub fn record_frames(record: &GroundedDialogueRecord, frames_root: Option<&Path>) -> Result<Vec<RgbImage>> {
    if let Some(scene) = &record.synthetic {
        if scene.num_frames != record.sampled_frames.len() {
            return Err(Error::Data(format!("`{}`: scene and frame list disagree", record.video_id)));
        }
        return Ok(scene.render_frames());
    }
    let root = frames_root.ok_or_else(|| {
        Error::Data(format!("`{}` is not synthetic and no frame directory was given", record.video_id))
    })?;
    record
        .sampled_frames
        .iter()
        .map(|f| {
            let path = root.join(f);
            image::open(&path)
                .map(|i| i.to_rgb8())
                .map_err(|e| Error::Data(format!("`{}`: cannot read frame {}: {e}", record.video_id, path.display())))
        })
        .collect()
}

/// A record with encoded frames, decoded masks and tokenized turns.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub video_id: String,
    pub features: VideoFeatures,
    pub object_ids: Vec<String>,
    pub tracks: Vec<MaskTrack>,
    /// Per object: frame and patches pooled for `<region>` references.
    pub regions: Vec<Option<(usize, Vec<usize>)>>,
    pub turns: Vec<(Role, Vec<Tok>)>,
}

impl PreparedRecord {
    pub fn num_exchanges(&self) -> usize {
        self.turns.len() / 2
    }

    fn object_index(&self, id: &str) -> Result<usize> {
        self.object_ids
            .iter()
            .position(|o| o == id)
            .ok_or_else(|| Error::Data(format!("`{}` references unknown object `{id}`", self.video_id)))
    }
}

/// Text side of one model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    /// `(text position, object index)` for each `<region>`.
    pub regions: Vec<(usize, usize)>,
    pub question: Vec<usize>,
    pub question_objects: Vec<usize>,
    /// Index of the first response token.
    pub response_start: usize,
}

/// Graph nodes of a teacher-forced forward pass.
pub struct ForwardOutput {
    /// `[L_resp, V]`, row `i` predicting response token `i`.
    pub logits: Var,
    pub targets: Vec<usize>,
    /// One `[N·H·W, 1]` pixel-logit track per response `[SEG]`.
    pub mask_logits: Vec<Var>,
    pub mask_targets: Vec<Rc<Mat>>,
    pub hidden: Var,
    pub layout: StreamLayout,
}

#[derive(Clone, Debug)]
pub struct SamaModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub encoder: ToyEncoder,
    pub decoder: ToyMaskDecoder,
}

pub const KEYFRAME_PROJ: &str = "proj.keyframe";
pub const OBJECT_PROJ: &str = "proj.object";

impl SamaModel {
    /// Random initialization; aggregator tensors exist only when the
    /// aggregator is enabled.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_v, d) = (config.aggregator.d_v, config.aggregator.d_llm);
        let encoder = ToyEncoder::new(config.frame_width, config.frame_height, config.patch_size, d_v, seed ^ 0x5eed)?;
        let decoder = ToyMaskDecoder::new(encoder.grid(), config.frame_width, config.frame_height)?;
        let mut params = encoder.to_params();
        params.merge(lm::init_params(&config.lm, vocab.len(), d, &mut rng));
        if config.aggregator.enabled {
            params.merge(stc_aggregator::init_params(&config.aggregator, &mut rng));
        }
        params.insert(format!("{KEYFRAME_PROJ}.weight"), xavier_uniform(&mut rng, d_v, d), true);
        params.insert(format!("{KEYFRAME_PROJ}.bias"), zeros(1, d), true);
        params.insert(format!("{OBJECT_PROJ}.weight"), xavier_uniform(&mut rng, d_v, d), true);
        params.merge(ToyMaskDecoder::init_params(d_v, d, &mut rng));
        Ok(Self {
            config,
            vocab,
            params,
            encoder,
            decoder,
        })
    }

    /// Restores a model from its parts; the encoder is rebuilt from the
    /// stored frozen weights.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let encoder = ToyEncoder::from_params(&params, config.frame_width, config.frame_height, config.patch_size)?;
        let decoder = ToyMaskDecoder::new(encoder.grid(), config.frame_width, config.frame_height)?;
        Ok(Self {
            config,
            vocab,
            params,
            encoder,
            decoder,
        })
    }

    /// Encoder stays frozen; `freeze_lm` also freezes every `lm.*` tensor.
    pub fn set_trainability(&mut self, freeze_lm: bool) {
        self.params.set_trainable_prefix("", true);
        self.params.set_trainable_prefix("encoder.", false);
        if freeze_lm {
            self.params.set_trainable_prefix("lm.", false);
        }
    }

    pub fn prepare(&self, record: &GroundedDialogueRecord, frames_root: Option<&Path>) -> Result<PreparedRecord> {
        let frames = record_frames(record, frames_root)?;
        let features = self.encoder.encode(&frames)?;
        let n = frames.len();
        let dims = (self.config.frame_width, self.config.frame_height);
        let mut tracks = Vec::with_capacity(record.objects.len());
        let mut regions = Vec::with_capacity(record.objects.len());
        for o in &record.objects {
            let t = o.track()?;
            if t.len() != n || t.dims() != Some(dims) {
                return Err(Error::Data(format!(
                    "`{}`: object `{}` masks do not match the {n} frames",
                    record.video_id, o.object_id
                )));
            }
            regions.push(match t.masks.iter().position(|m| !m.is_empty()) {
                Some(f) => Some((f, select_patches(&t.masks[f], self.encoder.grid(), DEFAULT_MIN_COVERAGE)?)),
                None => None,
            });
            tracks.push(t);
        }
        let turns: Vec<(Role, Vec<Tok>)> = record
            .conversation
            .iter()
            .map(|t| (t.role, self.vocab.encode(&t.text)))
            .collect();
        for (i, (role, _)) in turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if *role != expected {
                return Err(Error::Data(format!("`{}`: turn {i} should be {expected:?}", record.video_id)));
            }
        }
        Ok(PreparedRecord {
            video_id: record.video_id.clone(),
            features,
            object_ids: record.objects.iter().map(|o| o.object_id.clone()).collect(),
            tracks,
            regions,
            turns,
        })
    }

    /// History of exchanges before `exchange`, then its question, ending
    /// with the assistant marker.
    pub fn prompt(&self, prep: &PreparedRecord, exchange: usize) -> Result<Sequence> {
        if exchange >= prep.num_exchanges() {
            return Err(Error::Input(format!("`{}` has no exchange {exchange}", prep.video_id)));
        }
        let v = &self.vocab;
        let mut tokens = vec![v.id(vocab::BOS)];
        let mut regions = Vec::new();
        let mut question = Vec::new();
        let mut question_objects = Vec::new();
        for (i, (role, toks)) in prep.turns[..2 * exchange + 1].iter().enumerate() {
            let current = i == 2 * exchange;
            match role {
                Role::User => tokens.push(v.id(vocab::USER)),
                Role::Assistant => tokens.push(v.id(vocab::ASSISTANT)),
            }
            for t in toks {
                if t.id == v.region_id() {
                    let id = t
                        .object
                        .as_deref()
                        .ok_or_else(|| Error::Data(format!("`{}`: <region> without object id", prep.video_id)))?;
                    let k = prep.object_index(id)?;
                    if prep.regions[k].is_none() {
                        return Err(Error::Data(format!("`{}`: object `{id}` is never visible", prep.video_id)));
                    }
                    regions.push((tokens.len(), k));
                    if current && !question_objects.contains(&k) {
                        question_objects.push(k);
                    }
                }
                if current {
                    question.push(t.id);
                }
                tokens.push(t.id);
            }
            if *role == Role::Assistant {
                tokens.push(v.eos_id());
            }
        }
        tokens.push(v.id(vocab::ASSISTANT));
        let response_start = tokens.len();
        Ok(Sequence {
            tokens,
            regions,
            question,
            question_objects,
            response_start,
        })
    }

    /// Builds the token stream on `g` and returns final hidden states.
    pub fn run(&self, g: &mut Graph, prep: &PreparedRecord, seq: &Sequence) -> Result<(Var, StreamLayout, Vec<Var>)> {
        let cfg = &self.config;
        let p = &self.params;
        let frames: Vec<Var> = prep.features.frames().iter().map(|f| g.constant(f.clone())).collect();

        let kw = g.param(p, &format!("{KEYFRAME_PROJ}.weight"));
        let kb = g.param(p, &format!("{KEYFRAME_PROJ}.bias"));
        let key_pos = uniform_positions(frames.len(), cfg.num_keyframes);
        let mut keys = Vec::with_capacity(key_pos.len());
        for &i in &key_pos {
            let k = g.matmul(frames[i], kw);
            keys.push(g.add_row(k, kb));
        }
        let keyframes = g.concat_rows(&keys);
        let n_key = g.shape(keyframes).0;

        let pooled = |g: &mut Graph, k: usize| {
            let (f, sel) = prep.regions[k].as_ref().expect("checked in prompt");
            let rows = g.gather_rows(frames[*f], sel);
            g.mean_rows(rows)
        };
        let aggregated = if cfg.aggregator.enabled {
            let long: Vec<Var> = match cfg.aggregator.long_frames {
                Some(k) => uniform_positions(frames.len(), k).iter().map(|&i| frames[i]).collect(),
                None => frames.clone(),
            };
            let question = if seq.question.is_empty() {
                None
            } else {
                let emb = g.param(p, "lm.tok_emb");
                let tp = g.param(p, "agg.text_proj");
                let rows = g.gather_rows(emb, &seq.question);
                Some(g.matmul(rows, tp))
            };
            let objects = if seq.question_objects.is_empty() {
                None
            } else {
                let rows: Vec<Var> = seq.question_objects.iter().map(|&k| pooled(g, k)).collect();
                Some(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
            };
            stc_aggregator::aggregate_graph(g, &cfg.aggregator, p, &long, question, objects, &mut AttentionRecorder::off())?
        } else {
            None
        };
        let n_agg = aggregated.map_or(0, |a| g.shape(a).0);

        let emb = g.param(p, "lm.tok_emb");
        let text = g.gather_rows(emb, &seq.tokens);
        let op = g.param(p, &format!("{OBJECT_PROJ}.weight"));
        let mut objects = Vec::with_capacity(seq.regions.len());
        for &(pos, k) in &seq.regions {
            let (f, sel) = prep.regions[k].as_ref().expect("checked in prompt");
            objects.push((pos, mask_pool_graph(g, frames[*f], sel, op)));
        }
        let stream = assemble_graph(g, Some(keyframes), aggregated, text, &objects);
        let positions: Vec<usize> = seq.regions.iter().map(|r| r.0).collect();
        let layout = StreamLayout::new(n_key, n_agg, &seq.tokens, &positions, self.vocab.seg_id())?;
        let hidden = lm::hidden_states(g, p, &cfg.lm, stream, &layout.attention_mask())?;
        Ok((hidden, layout, frames))
    }

    /// Teacher-forced pass over exchange `exchange`: text logits for the
    /// answer (and its end token) and one mask-logit track per answer `[SEG]`.
    pub fn forward(&self, g: &mut Graph, prep: &PreparedRecord, exchange: usize) -> Result<ForwardOutput> {
        let mut seq = self.prompt(prep, exchange)?;
        let answer = &prep.turns[2 * exchange + 1].1;
        seq.tokens.extend(answer.iter().map(|t| t.id));
        seq.tokens.push(self.vocab.eos_id());
        let (hidden, layout, frames) = self.run(g, prep, &seq)?;
        let prefix = layout.prefix_len();
        let rows: Vec<usize> = (seq.response_start..seq.tokens.len()).map(|i| prefix + i - 1).collect();
        let h = g.gather_rows(hidden, &rows);
        let logits = lm::logits(g, &self.params, h);
        let targets = seq.tokens[seq.response_start..].to_vec();

        let mut mask_logits = Vec::new();
        let mut mask_targets = Vec::new();
        for (i, t) in answer.iter().enumerate() {
            if t.id != self.vocab.seg_id() {
                continue;
            }
            let id = t
                .object
                .as_deref()
                .ok_or_else(|| Error::Data(format!("`{}`: [SEG] without object id", prep.video_id)))?;
            let k = prep.object_index(id)?;
            let h = g.gather_rows(hidden, &[prefix + seq.response_start + i]);
            let per_frame = self.decoder.decode_logits(g, &self.params, h, &frames)?;
            mask_logits.push(g.concat_rows(&per_frame));
            mask_targets.push(Rc::new(track_column(&prep.tracks[k])));
        }
        Ok(ForwardOutput {
            logits,
            targets,
            mask_logits,
            mask_targets,
            hidden,
            layout,
        })
    }
}

/// Track pixels as a `[N·H·W, 1]` 0/1 column, frames then rows.
pub fn track_column(track: &MaskTrack) -> Mat {
    let data: Vec<f64> = track
        .masks
        .iter()
        .flat_map(|m| m.pixels().iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Mat::from_shape_vec((data.len(), 1), data).expect("column")
}

/// `total = w.text·CE + w.bce·BCE + w.dice·Dice`. Without `[SEG]` targets the
/// mask terms are exactly zero.
pub fn loss(g: &mut Graph, out: &ForwardOutput, w: LossWeights) -> (Var, LossBreakdown) {
    let ce = g.cross_entropy(out.logits, &out.targets);
    let (bce, dice) = if out.mask_logits.is_empty() {
        (g.constant(zeros(1, 1)), g.constant(zeros(1, 1)))
    } else {
        let logits = g.concat_rows(&out.mask_logits);
        let targets: Vec<_> = out.mask_targets.iter().map(|t| t.view()).collect();
        let all = ndarray::concatenate(ndarray::Axis(0), &targets).expect("columns");
        let bce = g.bce_with_logits(logits, Rc::new(all));
        let mut dice: Option<Var> = None;
        for (l, t) in out.mask_logits.iter().zip(&out.mask_targets) {
            let d = g.dice_loss(*l, Rc::clone(t), DICE_SMOOTH);
            dice = Some(match dice {
                Some(acc) => g.add(acc, d),
                None => d,
            });
        }
        let dice = g.scale(dice.expect("non-empty"), 1.0 / out.mask_logits.len() as f64);
        (bce, dice)
    };
    let a = g.scale(ce, w.text);
    let b = g.scale(bce, w.bce);
    let c = g.scale(dice, w.dice);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    let breakdown = LossBreakdown {
        total: g.scalar(total),
        ce: g.scalar(ce),
        bce: g.scalar(bce),
        dice: g.scalar(dice),
    };
    (total, breakdown)
}
