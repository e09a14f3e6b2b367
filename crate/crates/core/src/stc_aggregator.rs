//! Spatial-temporal-context aggregation of long-range frame features.
//!
//! Three stages, each a query-based attention block:
//!
//! 1. **Spatial**: `K_S` learnable queries cross-attend to the `P` patches of
//!    each frame independently (shared weights), then an FFN.
//! 2. **Temporal**: frames are grouped into sliding windows; per window `K_T`
//!    learnable queries, concatenated with the question (and object)
//!    embeddings, self-attend, cross-attend to the window's spatial tokens and
//!    pass an FFN. Only the `K_T` query slots are kept.
//! 3. **Context**: frame patches query the temporal tokens,
//!    `softmax((F Wq)(Z Wk)ᵀ / √C)(Z Wv)`, are mean-pooled to one vector per
//!    frame and projected by `Wp` into the language width.
//!
//! Every stage is available both as a graph builder (for training) and as a
//! plain function returning tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{normal, xavier_uniform, zeros, ParamStore};

pub const PREFIX: &str = "agg.";

/// Per-frame patch features `[N, P, D_v]` plus their source frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    frames: Vec<Mat>,
    frame_indices: Vec<usize>,
}

impl VideoFeatures {
    pub fn new(frames: Vec<Mat>, frame_indices: Vec<usize>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Input("video features need at least one frame".into()));
        };
        let (p, d) = first.dim();
        if p == 0 || d == 0 {
            return Err(Error::Input("frames need at least one patch and channel".into()));
        }
        if frames.iter().any(|f| f.dim() != (p, d)) {
            return Err(Error::Input("frames differ in patch count or width".into()));
        }
        if frame_indices.len() != frames.len() {
            return Err(Error::Input(format!(
                "{} frame indices for {} frames",
                frame_indices.len(),
                frames.len()
            )));
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("frame indices must be strictly increasing".into()));
        }
        if frames.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input("non-finite frame feature".into()));
        }
        Ok(Self {
            frames,
            frame_indices,
        })
    }

    /// Frames numbered `0..N`.
    pub fn from_frames(frames: Vec<Mat>) -> Result<Self> {
        let n = frames.len();
        Self::new(frames, (0..n).collect())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_patches(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].ncols()
    }

    pub fn frames(&self) -> &[Mat] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Mat {
        &self.frames[i]
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    /// Index selection of frames by position.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let frames = positions.iter().map(|&i| self.frames[i].clone()).collect();
        let indices = positions.iter().map(|&i| self.frame_indices[i]).collect();
        Self::new(frames, indices)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    /// Spatial queries per frame.
    pub k_s: usize,
    /// Temporal queries per window.
    pub k_t: usize,
    /// Window length in frames.
    pub w_t: usize,
    pub stride: usize,
    pub spatial_heads: usize,
    pub temporal_heads: usize,
    pub context_heads: usize,
    pub d_v: usize,
    pub d_llm: usize,
    pub ffn_mult: usize,
    /// Uniformly sampled long-range frame count; `None` uses every frame.
    pub long_frames: Option<usize>,
    /// `false` reproduces the "without aggregator" ablation.
    pub enabled: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            k_s: 32,
            k_t: 8,
            w_t: 4,
            stride: 4,
            spatial_heads: 4,
            temporal_heads: 4,
            context_heads: 1,
            d_v: 32,
            d_llm: 128,
            ffn_mult: 4,
            long_frames: None,
            enabled: true,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k_s == 0 || self.k_t == 0 {
            return bad("k_s and k_t must be at least 1");
        }
        if self.w_t == 0 || self.stride == 0 || self.stride > self.w_t {
            return bad("window requires 1 <= stride <= w_t");
        }
        if self.d_v == 0 || self.d_llm == 0 || self.ffn_mult == 0 {
            return bad("widths must be positive");
        }
        for (name, h) in [
            ("spatial_heads", self.spatial_heads),
            ("temporal_heads", self.temporal_heads),
            ("context_heads", self.context_heads),
        ] {
            if h == 0 || !self.d_v.is_multiple_of(h) {
                return Err(Error::Config(format!(
                    "{name}={h} must be positive and divide d_v={}",
                    self.d_v
                )));
            }
        }
        if self.long_frames == Some(0) {
            return bad("long_frames must be at least 1");
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.d_v * self.ffn_mult
    }
}

/// `[N_L, K_S, D_v]`, one matrix per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTokens {
    pub data: Vec<Mat>,
}

/// `[num_windows × K_T, D_v]` with inclusive `(start, end)` frame windows.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalTokens {
    pub data: Mat,
    pub window_boundaries: Vec<(usize, usize)>,
}

/// One `D_llm` token per long-range frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedContext {
    pub data: Mat,
}

impl AggregatedContext {
    /// The `[0, D_llm]` context produced when the aggregator is switched off.
    pub fn disabled(d_llm: usize) -> Self {
        Self {
            data: Mat::zeros((0, d_llm)),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.data.nrows()
    }
}

/// Windows of `w_t` frames starting at 0 and stepping by `stride`; the last
/// window may be partial. Enumeration stops once a window reaches the end.
pub fn enumerate_windows(n_frames: usize, w_t: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_frames {
        let end = (start + w_t).min(n_frames);
        out.push((start, end - 1));
        if end == n_frames {
            break;
        }
        start += stride;
    }
    out
}

/// Uniformly spaced positions `round(i (n-1) / (k-1))`; all positions when `k >= n`.
pub fn uniform_positions(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..k)
        .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Which attention a recorded weight matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Spatial,
    TemporalSelf,
    TemporalCross,
    Context,
}

/// Collects attention weight nodes while a graph is being built.
#[derive(Debug, Default)]
pub struct AttentionRecorder {
    enabled: bool,
    entries: Vec<(Stage, Var)>,
}

impl AttentionRecorder {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn on() -> Self {
        Self {
            enabled: true,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, stage: Stage, v: Var) {
        if self.enabled {
            self.entries.push((stage, v));
        }
    }

    pub fn weights(&self, g: &Graph) -> Vec<(Stage, Mat)> {
        self.entries
            .iter()
            .map(|(s, v)| (*s, g.value(*v).clone()))
            .collect()
    }
}

/// Random initialization: queries ~ N(0, 0.02²), projections Xavier-uniform,
/// biases zero.
pub fn init_params<R: Rng>(cfg: &AggregatorConfig, rng: &mut R) -> ParamStore {
    let d = cfg.d_v;
    let mut p = ParamStore::new();
    let attn = |p: &mut ParamStore, rng: &mut R, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{prefix}.{w}"), xavier_uniform(rng, d, d), true);
        }
    };
    let ffn = |p: &mut ParamStore, rng: &mut R, prefix: &str| {
        p.insert(format!("{prefix}.w1"), xavier_uniform(rng, d, cfg.ffn_width()), true);
        p.insert(format!("{prefix}.b1"), zeros(1, cfg.ffn_width()), true);
        p.insert(format!("{prefix}.w2"), xavier_uniform(rng, cfg.ffn_width(), d), true);
        p.insert(format!("{prefix}.b2"), zeros(1, d), true);
    };

    p.insert("agg.spatial.queries", normal(rng, cfg.k_s, d, 0.02), true);
    attn(&mut p, rng, "agg.spatial.cross");
    ffn(&mut p, rng, "agg.spatial.ffn");

    p.insert("agg.temporal.queries", normal(rng, cfg.k_t, d, 0.02), true);
    attn(&mut p, rng, "agg.temporal.self");
    attn(&mut p, rng, "agg.temporal.cross");
    ffn(&mut p, rng, "agg.temporal.ffn");
    p.insert("agg.text_proj", xavier_uniform(rng, cfg.d_llm, d), true);

    for w in ["wq", "wk", "wv"] {
        p.insert(format!("agg.context.{w}"), xavier_uniform(rng, d, d), true);
    }
    p.insert("agg.context.wp", xavier_uniform(rng, d, cfg.d_llm), true);
    p
}

/// Scaled dot-product attention on already-projected inputs, split across
/// `heads` column groups. Scale is `1/√(D/heads)`.
pub fn attention_heads(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Mat>,
    stage: Stage,
    rec: &mut AttentionRecorder,
) -> Var {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh),
                g.slice_cols(k, h * dh, (h + 1) * dh),
                g.slice_cols(v, h * dh, (h + 1) * dh),
            )
        };
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = match mask {
            Some(m) => g.masked_softmax_rows(scores, m),
            None => g.softmax_rows(scores),
        };
        rec.record(stage, weights);
        outs.push(g.matmul(weights, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Projected multi-head attention with output projection, using parameters
/// `{prefix}.wq/wk/wv/wo`.
#[allow(clippy::too_many_arguments)]
pub fn projected_attention(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    heads: usize,
    mask: Option<&Mat>,
    stage: Stage,
    rec: &mut AttentionRecorder,
) -> Var {
    let wq = g.param(params, &format!("{prefix}.wq"));
    let wk = g.param(params, &format!("{prefix}.wk"));
    let wv = g.param(params, &format!("{prefix}.wv"));
    let wo = g.param(params, &format!("{prefix}.wo"));
    let q = g.matmul(queries, wq);
    let k = g.matmul(keys_values, wk);
    let v = g.matmul(keys_values, wv);
    let attended = attention_heads(g, q, k, v, heads, mask, stage, rec);
    g.matmul(attended, wo)
}

pub fn feed_forward(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Var {
    let w1 = g.param(params, &format!("{prefix}.w1"));
    let b1 = g.param(params, &format!("{prefix}.b1"));
    let w2 = g.param(params, &format!("{prefix}.w2"));
    let b2 = g.param(params, &format!("{prefix}.b2"));
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let o = g.matmul(h, w2);
    g.add_row(o, b2)
}

fn check_width(g: &Graph, vars: &[Var], d_v: usize, what: &str) -> Result<()> {
    for v in vars {
        let w = g.shape(*v).1;
        if w != d_v {
            return Err(Error::Config(format!("{what} width {w} != d_v {d_v}")));
        }
    }
    Ok(())
}

/// Spatial stage on graph nodes; one `[P, D_v]` node per frame in, one
/// `[K_S, D_v]` node per frame out.
pub fn spatial_graph(
    g: &mut Graph,
    cfg: &AggregatorConfig,
    params: &ParamStore,
    frames: &[Var],
    rec: &mut AttentionRecorder,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    check_width(g, frames, cfg.d_v, "frame feature")?;
    let queries = g.param(params, "agg.spatial.queries");
    let mut out = Vec::with_capacity(frames.len());
    for &frame in frames {
        let attn = projected_attention(
            g,
            params,
            "agg.spatial.cross",
            queries,
            frame,
            cfg.spatial_heads,
            None,
            Stage::Spatial,
            rec,
        );
        let x = g.add(queries, attn);
        let f = feed_forward(g, params, "agg.spatial.ffn", x);
        out.push(g.add(x, f));
    }
    Ok(out)
}

/// Temporal stage on graph nodes. `question` and `objects` are `[L, D_v]`
/// conditioning rows placed after the temporal queries.
pub fn temporal_graph(
    g: &mut Graph,
    cfg: &AggregatorConfig,
    params: &ParamStore,
    spatial: &[Var],
    question: Option<Var>,
    objects: Option<Var>,
    rec: &mut AttentionRecorder,
) -> Result<(Var, Vec<(usize, usize)>)> {
    cfg.validate()?;
    if spatial.is_empty() {
        return Err(Error::Input("temporal stage needs at least one frame".into()));
    }
    check_width(g, spatial, cfg.d_v, "spatial token")?;
    let cond: Vec<Var> = question
        .into_iter()
        .chain(objects)
        .filter(|v| g.shape(*v).0 > 0)
        .collect();
    check_width(g, &cond, cfg.d_v, "conditioning embedding")?;

    let queries = g.param(params, "agg.temporal.queries");
    let mut query_side = vec![queries];
    query_side.extend(&cond);
    let query_side = if query_side.len() == 1 {
        queries
    } else {
        g.concat_rows(&query_side)
    };

    let windows = enumerate_windows(spatial.len(), cfg.w_t, cfg.stride);
    let mut outs = Vec::with_capacity(windows.len());
    for &(start, end) in &windows {
        let tokens = if start == end {
            spatial[start]
        } else {
            g.concat_rows(&spatial[start..=end])
        };
        let sa = projected_attention(
            g,
            params,
            "agg.temporal.self",
            query_side,
            query_side,
            cfg.temporal_heads,
            None,
            Stage::TemporalSelf,
            rec,
        );
        let x = g.add(query_side, sa);
        let ca = projected_attention(
            g,
            params,
            "agg.temporal.cross",
            x,
            tokens,
            cfg.temporal_heads,
            None,
            Stage::TemporalCross,
            rec,
        );
        let x = g.add(x, ca);
        let f = feed_forward(g, params, "agg.temporal.ffn", x);
        let x = g.add(x, f);
        outs.push(g.slice_rows(x, 0, cfg.k_t));
    }
    let z = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_rows(&outs)
    };
    Ok((z, windows))
}

/// Context stage on graph nodes: returns `[N_L, D_llm]`.
pub fn context_graph(
    g: &mut Graph,
    cfg: &AggregatorConfig,
    params: &ParamStore,
    frames: &[Var],
    temporal: Var,
    rec: &mut AttentionRecorder,
) -> Result<Var> {
    cfg.validate()?;
    check_width(g, frames, cfg.d_v, "frame feature")?;
    check_width(g, &[temporal], cfg.d_v, "temporal token")?;
    let wq = g.param(params, "agg.context.wq");
    let wk = g.param(params, "agg.context.wk");
    let wv = g.param(params, "agg.context.wv");
    let wp = g.param(params, "agg.context.wp");
    let k = g.matmul(temporal, wk);
    let v = g.matmul(temporal, wv);
    let mut pooled = Vec::with_capacity(frames.len());
    for &frame in frames {
        let q = g.matmul(frame, wq);
        let enhanced = attention_heads(g, q, k, v, cfg.context_heads, None, Stage::Context, rec);
        pooled.push(g.mean_rows(enhanced));
    }
    let pooled = g.concat_rows(&pooled);
    Ok(g.matmul(pooled, wp))
}

/// Full three-stage pipeline on graph nodes. `frames` are the long-range
/// frames. Returns `None` when the aggregator is disabled.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_graph(
    g: &mut Graph,
    cfg: &AggregatorConfig,
    params: &ParamStore,
    frames: &[Var],
    question: Option<Var>,
    objects: Option<Var>,
    rec: &mut AttentionRecorder,
) -> Result<Option<Var>> {
    if !cfg.enabled {
        return Ok(None);
    }
    let spatial = spatial_graph(g, cfg, params, frames, rec)?;
    let (temporal, _) = temporal_graph(g, cfg, params, &spatial, question, objects, rec)?;
    context_graph(g, cfg, params, frames, temporal, rec).map(Some)
}

fn frame_consts(g: &mut Graph, frames: &VideoFeatures) -> Vec<Var> {
    frames.frames().iter().map(|f| g.constant(f.clone())).collect()
}

fn optional_rows(g: &mut Graph, m: Option<&Mat>) -> Option<Var> {
    m.filter(|m| m.nrows() > 0).map(|m| g.constant(m.clone()))
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("non-finite {what}")))
    }
}

pub fn spatial_aggregate(
    frames: &VideoFeatures,
    cfg: &AggregatorConfig,
    params: &ParamStore,
) -> Result<SpatialTokens> {
    let mut g = Graph::inference();
    let vars = frame_consts(&mut g, frames);
    let out = spatial_graph(&mut g, cfg, params, &vars, &mut AttentionRecorder::off())?;
    Ok(SpatialTokens {
        data: out.iter().map(|v| g.value(*v).clone()).collect(),
    })
}

pub fn temporal_aggregate(
    spatial: &SpatialTokens,
    question: Option<&Mat>,
    objects: Option<&Mat>,
    cfg: &AggregatorConfig,
    params: &ParamStore,
) -> Result<TemporalTokens> {
    for m in spatial.data.iter().chain(question).chain(objects) {
        check_finite(m, "temporal input")?;
    }
    let mut g = Graph::inference();
    let vars: Vec<Var> = spatial.data.iter().map(|m| g.constant(m.clone())).collect();
    let q = optional_rows(&mut g, question);
    let o = optional_rows(&mut g, objects);
    let (z, windows) = temporal_graph(&mut g, cfg, params, &vars, q, o, &mut AttentionRecorder::off())?;
    Ok(TemporalTokens {
        data: g.value(z).clone(),
        window_boundaries: windows,
    })
}

pub fn context_aggregate(
    frames: &VideoFeatures,
    temporal: &TemporalTokens,
    cfg: &AggregatorConfig,
    params: &ParamStore,
) -> Result<AggregatedContext> {
    check_finite(&temporal.data, "temporal token")?;
    let mut g = Graph::inference();
    let vars = frame_consts(&mut g, frames);
    let t = g.constant(temporal.data.clone());
    let out = context_graph(&mut g, cfg, params, &vars, t, &mut AttentionRecorder::off())?;
    Ok(AggregatedContext {
        data: g.value(out).clone(),
    })
}

/// `context(frames, temporal(spatial(frames), question, objects))`, or the
/// empty context when `cfg.enabled` is false. Long-range frames are selected
/// by `cfg.long_frames`.
pub fn aggregate(
    frames: &VideoFeatures,
    question: Option<&Mat>,
    objects: Option<&Mat>,
    cfg: &AggregatorConfig,
    params: &ParamStore,
) -> Result<AggregatedContext> {
    aggregate_traced(frames, question, objects, cfg, params, &mut AttentionRecorder::off())
        .map(|(ctx, _)| ctx)
}

/// Like [`aggregate`] but also returns every attention weight matrix when the
/// recorder is on.
pub fn aggregate_traced(
    frames: &VideoFeatures,
    question: Option<&Mat>,
    objects: Option<&Mat>,
    cfg: &AggregatorConfig,
    params: &ParamStore,
    rec: &mut AttentionRecorder,
) -> Result<(AggregatedContext, Vec<(Stage, Mat)>)> {
    if !cfg.enabled {
        return Ok((AggregatedContext::disabled(cfg.d_llm), Vec::new()));
    }
    for m in question.into_iter().chain(objects) {
        check_finite(m, "conditioning embedding")?;
    }
    let long = match cfg.long_frames {
        Some(k) => frames.select(&uniform_positions(frames.num_frames(), k))?,
        None => frames.clone(),
    };
    let mut g = Graph::inference();
    let vars = frame_consts(&mut g, &long);
    let q = optional_rows(&mut g, question);
    let o = optional_rows(&mut g, objects);
    let out = aggregate_graph(&mut g, cfg, params, &vars, q, o, rec)?
        .expect("enabled aggregator yields output");
    let weights = rec.weights(&g);
    Ok((
        AggregatedContext {
            data: g.value(out).clone(),
        },
        weights,
    ))
}
