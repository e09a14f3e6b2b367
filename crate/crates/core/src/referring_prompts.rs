//! Visual prompts, mask pooling into object embeddings, and assembly of the
//! multimodal token stream.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};

/// Placeholder marking an object reference in user text.
pub const REGION_TOKEN: &str = "<region>";
/// Token whose hidden state is handed to the mask decoder.
pub const SEG_TOKEN: &str = "[SEG]";

pub const DEFAULT_POINT_RADIUS: f64 = 1.0;
pub const DEFAULT_MIN_COVERAGE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectPrompt {
    Box {
        frame_index: usize,
        bbox: BBox,
    },
    Mask {
        frame_index: usize,
        #[serde(skip)]
        mask: Option<BinaryMask>,
    },
    Points {
        frame_index: usize,
        points: Vec<(f64, f64)>,
    },
}

impl ObjectPrompt {
    pub fn frame_index(&self) -> usize {
        match self {
            ObjectPrompt::Box { frame_index, .. }
            | ObjectPrompt::Mask { frame_index, .. }
            | ObjectPrompt::Points { frame_index, .. } => *frame_index,
        }
    }

    pub fn from_mask(frame_index: usize, mask: BinaryMask) -> Self {
        ObjectPrompt::Mask {
            frame_index,
            mask: Some(mask),
        }
    }

    /// Checks the prompt against a `width x height` frame.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        match self {
            ObjectPrompt::Box { bbox, .. } => {
                if !bbox.is_well_ordered() {
                    return Err(Error::Input(format!("degenerate box {bbox:?}")));
                }
                if bbox.x0 < 0.0 || bbox.y0 < 0.0 || bbox.x1 > w || bbox.y1 > h {
                    return Err(Error::Input(format!("box {bbox:?} outside {width}x{height} frame")));
                }
            }
            ObjectPrompt::Mask { mask, .. } => match mask {
                None => return Err(Error::Input("mask prompt without mask".into())),
                Some(m) if m.dims() != (width, height) => {
                    return Err(Error::Input("mask prompt resolution differs from frame".into()))
                }
                Some(m) if m.is_empty() => return Err(Error::Input("empty mask prompt".into())),
                _ => {}
            },
            ObjectPrompt::Points { points, .. } => {
                if ![1, 2, 4, 8].contains(&points.len()) {
                    return Err(Error::Input(format!(
                        "point prompts take 1, 2, 4 or 8 points, got {}",
                        points.len()
                    )));
                }
                if points
                    .iter()
                    .any(|&(x, y)| x < 0.0 || y < 0.0 || x >= w || y >= h)
                {
                    return Err(Error::Input("point outside frame".into()));
                }
            }
        }
        Ok(())
    }
}

/// Converts a prompt into a binary mask: boxes fill, points become the union
/// of Euclidean disks of `point_radius`, masks pass through.
pub fn prompt_to_mask(
    prompt: &ObjectPrompt,
    width: usize,
    height: usize,
    point_radius: f64,
) -> Result<BinaryMask> {
    prompt.validate(width, height)?;
    let mask = match prompt {
        ObjectPrompt::Box { bbox, .. } => BinaryMask::filled_box(width, height, *bbox),
        ObjectPrompt::Mask { mask, .. } => mask.clone().expect("validated"),
        ObjectPrompt::Points { points, .. } => BinaryMask::from_fn(width, height, |x, y| {
            points.iter().any(|&(px, py)| {
                let dx = x as f64 - px;
                let dy = y as f64 - py;
                dx * dx + dy * dy <= point_radius * point_radius
            })
        }),
    };
    if mask.is_empty() {
        return Err(Error::Input("prompt produced an empty mask".into()));
    }
    Ok(mask)
}

/// Fraction of each patch cell covered by the mask, row-major over the grid.
pub fn patch_coverage(mask: &BinaryMask, grid: (usize, usize)) -> Vec<f64> {
    let (gh, gw) = grid;
    let (w, h) = mask.dims();
    let mut out = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        let (y0, y1) = (r * h / gh, (r + 1) * h / gh);
        for c in 0..gw {
            let (x0, x1) = (c * w / gw, (c + 1) * w / gw);
            let cell = ((y1 - y0) * (x1 - x0)).max(1);
            let mut hits = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    hits += mask.get(x, y) as usize;
                }
            }
            out.push(hits as f64 / cell as f64);
        }
    }
    out
}

/// Patches whose coverage reaches `min_coverage`; falls back to the single
/// best-covered patch when none does.
pub fn select_patches(mask: &BinaryMask, grid: (usize, usize), min_coverage: f64) -> Result<Vec<usize>> {
    if mask.is_empty() {
        return Err(Error::Input("cannot pool under an all-zero mask".into()));
    }
    let coverage = patch_coverage(mask, grid);
    let selected: Vec<usize> = coverage
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0 && c >= min_coverage)
        .map(|(i, _)| i)
        .collect();
    if !selected.is_empty() {
        return Ok(selected);
    }
    let best = coverage
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    Ok(vec![best])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEmbedding {
    pub data: Vec<f64>,
    pub source_prompt: Option<ObjectPrompt>,
}

/// Mean of the selected patch features followed by `projection` (`[D_v, D_llm]`).
pub fn mask_pool(
    frame_features: &Mat,
    mask: &BinaryMask,
    grid: (usize, usize),
    projection: &Mat,
) -> Result<ObjectEmbedding> {
    if grid.0 * grid.1 != frame_features.nrows() {
        return Err(Error::Config(format!(
            "patch grid {}x{} does not match {} patches",
            grid.0,
            grid.1,
            frame_features.nrows()
        )));
    }
    if projection.nrows() != frame_features.ncols() {
        return Err(Error::Config("projection input width differs from features".into()));
    }
    let selected = select_patches(mask, grid, DEFAULT_MIN_COVERAGE)?;
    let mut g = Graph::inference();
    let f = g.constant(frame_features.clone());
    let p = g.constant(projection.clone());
    let out = mask_pool_graph(&mut g, f, &selected, p);
    Ok(ObjectEmbedding {
        data: g.value(out).iter().copied().collect(),
        source_prompt: None,
    })
}

/// Graph form of pooling: `mean(features[selected]) · projection`.
pub fn mask_pool_graph(g: &mut Graph, frame_features: Var, selected: &[usize], projection: Var) -> Var {
    let rows = g.gather_rows(frame_features, selected);
    let pooled = g.mean_rows(rows);
    g.matmul(pooled, projection)
}

/// Prompt → mask → pooled embedding, keeping the prompt as provenance.
pub fn embed_prompt(
    prompt: &ObjectPrompt,
    frame_features: &Mat,
    frame_dims: (usize, usize),
    grid: (usize, usize),
    projection: &Mat,
) -> Result<ObjectEmbedding> {
    let mask = prompt_to_mask(prompt, frame_dims.0, frame_dims.1, DEFAULT_POINT_RADIUS)?;
    let mut e = mask_pool(frame_features, &mask, grid, projection)?;
    e.source_prompt = Some(prompt.clone());
    Ok(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    KeyframeVisual,
    AggregatedVisual,
    Text,
    ObjectRef,
    SegToken,
}

/// Position bookkeeping for a token stream, independent of the embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamLayout {
    pub segment_map: Vec<Segment>,
    pub object_slots: Vec<usize>,
    pub seg_positions: Vec<usize>,
    pub num_keyframe_tokens: usize,
    pub num_aggregated_tokens: usize,
    pub num_text_tokens: usize,
}

impl StreamLayout {
    /// `object_positions` index into `text_tokens`; each replaces the token
    /// at that position.
    pub fn new(
        num_keyframe_tokens: usize,
        num_aggregated_tokens: usize,
        text_tokens: &[usize],
        object_positions: &[usize],
        seg_vocab_id: usize,
    ) -> Result<Self> {
        for &p in object_positions {
            if p >= text_tokens.len() {
                return Err(Error::Input(format!(
                    "object position {p} outside text of length {}",
                    text_tokens.len()
                )));
            }
        }
        let mut sorted = object_positions.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("two objects share one text position".into()));
        }
        let prefix = num_keyframe_tokens + num_aggregated_tokens;
        let mut segment_map = Vec::with_capacity(prefix + text_tokens.len());
        segment_map.extend(std::iter::repeat_n(Segment::KeyframeVisual, num_keyframe_tokens));
        segment_map.extend(std::iter::repeat_n(Segment::AggregatedVisual, num_aggregated_tokens));
        let mut seg_positions = Vec::new();
        for (i, &t) in text_tokens.iter().enumerate() {
            let label = if sorted.binary_search(&i).is_ok() {
                Segment::ObjectRef
            } else if t == seg_vocab_id {
                seg_positions.push(prefix + i);
                Segment::SegToken
            } else {
                Segment::Text
            };
            segment_map.push(label);
        }
        Ok(Self {
            segment_map,
            object_slots: sorted.iter().map(|p| prefix + p).collect(),
            seg_positions,
            num_keyframe_tokens,
            num_aggregated_tokens,
            num_text_tokens: text_tokens.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.segment_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_map.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.num_keyframe_tokens + self.num_aggregated_tokens
    }

    /// Additive attention mask: the visual prefix attends within itself,
    /// text attends to the prefix and causally to earlier text.
    pub fn attention_mask(&self) -> Mat {
        let n = self.len();
        let prefix = self.prefix_len();
        Mat::from_shape_fn((n, n), |(i, j)| {
            let visible = if i < prefix { j < prefix } else { j <= i };
            if visible {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub embeddings: Mat,
    pub layout: StreamLayout,
    pub attention_mask: Mat,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn segment_map(&self) -> &[Segment] {
        &self.layout.segment_map
    }

    pub fn object_slots(&self) -> &[usize] {
        &self.layout.object_slots
    }
}

/// Splices prefix, aggregated tokens and text (with objects replacing their
/// placeholders) on a graph. `text` holds one embedding row per text token.
pub fn assemble_graph(
    g: &mut Graph,
    keyframes: Option<Var>,
    aggregated: Option<Var>,
    text: Var,
    objects: &[(usize, Var)],
) -> Var {
    let mut sorted: Vec<(usize, Var)> = objects.to_vec();
    sorted.sort_by_key(|(p, _)| *p);
    let mut parts: Vec<Var> = keyframes.into_iter().chain(aggregated).collect();
    let n_text = g.shape(text).0;
    let mut cursor = 0;
    for (pos, obj) in sorted {
        if pos > cursor {
            parts.push(g.slice_rows(text, cursor, pos));
        }
        parts.push(obj);
        cursor = pos + 1;
    }
    if cursor == 0 {
        parts.push(text);
    } else if cursor < n_text {
        parts.push(g.slice_rows(text, cursor, n_text));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    }
}

/// Builds `[keyframe tokens][aggregated tokens][text with objects spliced]`.
///
/// `keyframes` are per-keyframe `[P, D_llm]` projected features and
/// `token_table` is the `[vocab, D_llm]` embedding table.
pub fn assemble_stream(
    keyframes: &[Mat],
    aggregated: &crate::stc_aggregator::AggregatedContext,
    text_tokens: &[usize],
    token_table: &Mat,
    objects: &[(usize, ObjectEmbedding)],
    seg_vocab_id: usize,
) -> Result<TokenStream> {
    let d = token_table.ncols();
    if aggregated.data.ncols() != d || keyframes.iter().any(|k| k.ncols() != d) {
        return Err(Error::Config("stream parts differ in embedding width".into()));
    }
    if let Some(&t) = text_tokens.iter().find(|&&t| t >= token_table.nrows()) {
        return Err(Error::Input(format!("token id {t} outside vocabulary")));
    }
    if objects.iter().any(|(_, e)| e.data.len() != d) {
        return Err(Error::Config("object embedding width differs from stream".into()));
    }
    let positions: Vec<usize> = objects.iter().map(|(p, _)| *p).collect();
    let n_key: usize = keyframes.iter().map(|k| k.nrows()).sum();
    let layout = StreamLayout::new(n_key, aggregated.num_tokens(), text_tokens, &positions, seg_vocab_id)?;

    let mut g = Graph::inference();
    let key = (!keyframes.is_empty()).then(|| {
        let parts: Vec<Var> = keyframes.iter().map(|k| g.constant(k.clone())).collect();
        g.concat_rows(&parts)
    });
    let agg = (aggregated.num_tokens() > 0).then(|| g.constant(aggregated.data.clone()));
    let table = g.constant(token_table.clone());
    let text = g.gather_rows(table, text_tokens);
    let objs: Vec<(usize, Var)> = objects
        .iter()
        .map(|(p, e)| (*p, g.constant(Mat::from_shape_vec((1, d), e.data.clone()).expect("row"))))
        .collect();
    let out = assemble_graph(&mut g, key, agg, text, &objs);
    let attention_mask = layout.attention_mask();
    Ok(TokenStream {
        embeddings: g.value(out).clone(),
        layout,
        attention_mask,
    })
}
