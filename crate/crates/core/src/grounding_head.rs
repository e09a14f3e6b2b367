//! `[SEG]` hidden-state extraction, the mask decoder seam, and binding of
//! decoded mask tracks to `<p>…</p>[SEG]` phrases in a response.

use std::sync::Arc;

use log::warn;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::markup::{lex, MarkupToken};
use crate::mask::{BinaryMask, MaskTrack};
use crate::params::{xavier_uniform, zeros, ParamStore};
use crate::stc_aggregator::VideoFeatures;

pub const PREFIX: &str = "decoder.";

#[derive(Clone, Debug, PartialEq)]
pub struct SegHiddenState {
    pub data: Vec<f64>,
    pub response_position: usize,
    pub turn_index: usize,
}

impl SegHiddenState {
    pub fn as_row(&self) -> Mat {
        Mat::from_shape_vec((1, self.data.len()), self.data.clone()).expect("row vector")
    }
}

/// One `SegHiddenState` per occurrence of `seg_vocab_id`, in generation order.
/// `turn_indices[i]` is the dialogue turn that produced token `i`.
pub fn extract_seg_states(
    response_tokens: &[usize],
    turn_indices: &[usize],
    hidden: &Mat,
    seg_vocab_id: usize,
) -> Result<Vec<SegHiddenState>> {
    if hidden.nrows() != response_tokens.len() || turn_indices.len() != response_tokens.len() {
        return Err(Error::Input(format!(
            "{} tokens, {} turn indices, {} hidden rows",
            response_tokens.len(),
            turn_indices.len(),
            hidden.nrows()
        )));
    }
    Ok(response_tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == seg_vocab_id)
        .map(|(i, _)| SegHiddenState {
            data: hidden.row(i).to_vec(),
            response_position: i,
            turn_index: turn_indices[i],
        })
        .collect())
}

/// A promptable mask decoder driven by a `[SEG]` hidden state.
///
/// `decode_logits` must be differentiable with respect to `hidden`; it returns
/// one `[H·W, 1]` row-major pixel-logit node per frame.
pub trait MaskDecoder {
    fn output_size(&self) -> (usize, usize);

    fn decode_logits(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        hidden: Var,
        frames: &[Var],
    ) -> Result<Vec<Var>>;

    /// Binary track thresholded at logit 0 (strictly positive is foreground).
    fn decode(
        &self,
        params: &ParamStore,
        hidden: &SegHiddenState,
        frames: &VideoFeatures,
    ) -> Result<MaskTrack> {
        let mut g = Graph::inference();
        let h = g.constant(hidden.as_row());
        let fs: Vec<Var> = frames.frames().iter().map(|f| g.constant(f.clone())).collect();
        let logits = self.decode_logits(&mut g, params, h, &fs)?;
        let (w, hgt) = self.output_size();
        let masks = logits
            .iter()
            .map(|v| {
                let data = g.value(*v).iter().map(|&z| z > 0.0).collect();
                BinaryMask::from_vec(w, hgt, data)
            })
            .collect::<Result<Vec<_>>>()?;
        MaskTrack::new(masks, None)
    }
}

/// Bilinear stand-in decoder: per frame, patch logits are
/// `F · W_m · hᵀ + b`, upsampled to pixels by nearest neighbour.
#[derive(Clone, Debug)]
pub struct ToyMaskDecoder {
    grid: (usize, usize),
    width: usize,
    height: usize,
    upsample: Arc<Mat>,
}

impl ToyMaskDecoder {
    /// `grid` is `(rows, cols)` of patches; output is `width x height` pixels.
    pub fn new(grid: (usize, usize), width: usize, height: usize) -> Result<Self> {
        let (gh, gw) = grid;
        if gh == 0 || gw == 0 || !height.is_multiple_of(gh) || !width.is_multiple_of(gw) {
            return Err(Error::Config(format!(
                "{width}x{height} output is not divisible by a {gh}x{gw} patch grid"
            )));
        }
        let (ch, cw) = (height / gh, width / gw);
        let mut up = Mat::zeros((width * height, gh * gw));
        for y in 0..height {
            for x in 0..width {
                up[[y * width + x, (y / ch) * gw + x / cw]] = 1.0;
            }
        }
        Ok(Self {
            grid,
            width,
            height,
            upsample: Arc::new(up),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn init_params<R: Rng>(d_v: usize, d_llm: usize, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("decoder.w_m", xavier_uniform(rng, d_v, d_llm), true);
        p.insert("decoder.bias", zeros(1, 1), true);
        p
    }

    /// Patch-level logits `[P, 1]` for one frame.
    pub fn patch_logits(&self, g: &mut Graph, params: &ParamStore, hidden: Var, frame: Var) -> Var {
        let w = g.param(params, "decoder.w_m");
        let b = g.param(params, "decoder.bias");
        let projected = g.matmul(frame, w);
        let logits = g.matmul_t(projected, hidden);
        g.add_row(logits, b)
    }
}

impl MaskDecoder for ToyMaskDecoder {
    fn output_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn decode_logits(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        hidden: Var,
        frames: &[Var],
    ) -> Result<Vec<Var>> {
        let p = self.grid.0 * self.grid.1;
        let up = g.constant((*self.upsample).clone());
        frames
            .iter()
            .map(|&f| {
                if g.shape(f).0 != p {
                    return Err(Error::Input(format!(
                        "frame has {} patches, decoder grid expects {p}",
                        g.shape(f).0
                    )));
                }
                let logits = self.patch_logits(g, params, hidden, f);
                Ok(g.matmul(up, logits))
            })
            .collect()
    }
}

/// Convenience wrapper for [`ToyMaskDecoder`] decoding.
pub fn toy_decode(
    decoder: &ToyMaskDecoder,
    params: &ParamStore,
    hidden: &SegHiddenState,
    frames: &VideoFeatures,
) -> Result<MaskTrack> {
    decoder.decode(params, hidden, frames)
}

/// A phrase span and whether a `[SEG]` follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PhraseItem {
    Phrase {
        text: String,
        offset: usize,
        seg_id: Option<Option<String>>,
    },
    DanglingSeg {
        offset: usize,
        id: Option<String>,
    },
}

/// Parses `<p>…</p>[SEG]` markup. A `[SEG]` binds to the closest preceding
/// phrase that is still unbound; otherwise it dangles.
pub fn parse_phrases(text: &str) -> Result<Vec<PhraseItem>> {
    let mut items = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let mut last_unbound: Option<usize> = None;
    for tok in lex(text) {
        match tok {
            MarkupToken::Open { offset } => {
                if let Some((outer, _)) = open {
                    return Err(Error::Parse {
                        offset: outer,
                        message: "nested <p>: outer tag is not closed".into(),
                    });
                }
                open = Some((offset, String::new()));
            }
            MarkupToken::Close { offset } => match open.take() {
                Some((start, phrase)) => {
                    items.push(PhraseItem::Phrase {
                        text: phrase.trim().to_string(),
                        offset: start,
                        seg_id: None,
                    });
                    last_unbound = Some(items.len() - 1);
                }
                None => {
                    return Err(Error::Parse {
                        offset,
                        message: "</p> without matching <p>".into(),
                    })
                }
            },
            MarkupToken::Text { text, .. } => {
                if let Some((_, phrase)) = open.as_mut() {
                    phrase.push_str(text);
                }
            }
            MarkupToken::Seg { offset, id } => {
                if let Some((start, _)) = open {
                    return Err(Error::Parse {
                        offset: start,
                        message: "[SEG] inside an unclosed <p>".into(),
                    });
                }
                let id = id.map(str::to_string);
                match last_unbound.take() {
                    Some(i) => {
                        if let PhraseItem::Phrase { seg_id, .. } = &mut items[i] {
                            *seg_id = Some(id);
                        }
                    }
                    None => items.push(PhraseItem::DanglingSeg { offset, id }),
                }
            }
            MarkupToken::Region { .. } => {}
        }
    }
    if let Some((offset, _)) = open {
        return Err(Error::Parse {
            offset,
            message: "unclosed <p>".into(),
        });
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundedPhrase {
    pub phrase: String,
    pub track: MaskTrack,
    /// Set when the `[SEG]` had no phrase to bind to.
    pub dangling: bool,
}

/// Decodes one mask track per `[SEG]` in `response` and binds each to its
/// phrase. `seg_states` are the hidden states of those `[SEG]` tokens in order.
pub fn ground_response(
    response: &str,
    seg_states: &[SegHiddenState],
    decoder: &dyn MaskDecoder,
    params: &ParamStore,
    frames: &VideoFeatures,
) -> Result<Vec<GroundedPhrase>> {
    let items = parse_phrases(response)?;
    let bound: Vec<(String, bool)> = items
        .into_iter()
        .filter_map(|item| match item {
            PhraseItem::Phrase {
                text,
                seg_id: Some(_),
                ..
            } => Some((text, false)),
            PhraseItem::Phrase { .. } => None,
            PhraseItem::DanglingSeg { offset, .. } => {
                warn!("[SEG] at byte {offset} has no preceding phrase");
                Some((String::new(), true))
            }
        })
        .collect();
    if bound.len() != seg_states.len() {
        return Err(Error::Input(format!(
            "response has {} [SEG] tokens but {} hidden states",
            bound.len(),
            seg_states.len()
        )));
    }
    bound
        .into_iter()
        .zip(seg_states)
        .map(|((phrase, dangling), state)| {
            Ok(GroundedPhrase {
                phrase,
                track: decoder.decode(params, state, frames)?,
                dangling,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn extracts_in_generation_order_with_turns() {
        let seg = 9;
        let tokens = [3, 9, 4, 5, 9, 2, 9];
        let turns = [1, 1, 1, 2, 3, 3, 3];
        let hidden = Array2::from_shape_fn((7, 2), |(i, j)| (i * 10 + j) as f64);
        let states = extract_seg_states(&tokens, &turns, &hidden, seg).unwrap();
        assert_eq!(
            states.iter().map(|s| s.response_position).collect::<Vec<_>>(),
            vec![1, 4, 6]
        );
        assert_eq!(states.iter().map(|s| s.turn_index).collect::<Vec<_>>(), vec![1, 3, 3]);
        assert_eq!(states[1].data, vec![40.0, 41.0]);
        assert!(extract_seg_states(&[1, 2], &[0, 0], &Mat::zeros((2, 2)), seg)
            .unwrap()
            .is_empty());
    }

    fn decoder_params(w_m: Mat) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("decoder.w_m", w_m, true);
        p.insert("decoder.bias", zeros(1, 1), true);
        p
    }

    #[test]
    fn orthogonal_hidden_gives_empty_track() {
        let dec = ToyMaskDecoder::new((4, 4), 32, 32).unwrap();
        let params = decoder_params(Array2::eye(2));
        let frames = VideoFeatures::from_frames(vec![
            Array2::from_shape_fn((16, 2), |(i, j)| if j == 0 { i as f64 } else { 0.0 });
            3
        ])
        .unwrap();
        let hidden = SegHiddenState {
            data: vec![0.0, 1.0],
            response_position: 0,
            turn_index: 0,
        };
        let track = toy_decode(&dec, &params, &hidden, &frames).unwrap();
        assert_eq!(track.len(), 3);
        assert!(track.masks.iter().all(|m| m.dims() == (32, 32) && m.is_empty()));
    }

    #[test]
    fn one_aligned_patch_lights_its_block() {
        let dec = ToyMaskDecoder::new((4, 4), 32, 32).unwrap();
        let params = decoder_params(Array2::eye(2));
        // patch 6 (row 1, col 2) has feature [1, 0]; others [-1, 0]
        let frame = Array2::from_shape_fn((16, 2), |(i, j)| match (i, j) {
            (6, 0) => 1.0,
            (_, 0) => -1.0,
            _ => 0.0,
        });
        let frames = VideoFeatures::from_frames(vec![frame]).unwrap();
        let hidden = SegHiddenState {
            data: vec![2.0, 5.0],
            response_position: 0,
            turn_index: 0,
        };
        let track = toy_decode(&dec, &params, &hidden, &frames).unwrap();
        let expected = BinaryMask::from_fn(32, 32, |x, y| (16..24).contains(&x) && (8..16).contains(&y));
        assert_eq!(track.masks[0], expected);
        assert_eq!(expected.area(), 64);
    }

    #[test]
    fn decoder_rejects_non_divisible_output() {
        assert!(ToyMaskDecoder::new((3, 3), 32, 32).is_err());
    }

    #[test]
    fn parses_two_pairs() {
        let items = parse_phrases("<p>the brown dog</p>[SEG] chases <p>the ball</p>[SEG]").unwrap();
        assert_eq!(items.len(), 2);
        assert!(matches!(&items[0], PhraseItem::Phrase { text, seg_id: Some(None), .. } if text == "the brown dog"));
        assert!(matches!(&items[1], PhraseItem::Phrase { text, seg_id: Some(None), .. } if text == "the ball"));
        assert!(parse_phrases("no markup here").unwrap().is_empty());
    }

    #[test]
    fn unclosed_and_nested_tags_report_offsets() {
        match parse_phrases("a <p>dog <p>cat</p>[SEG]") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        match parse_phrases("ok <p>dog") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        match parse_phrases("x</p>") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grounding_binds_phrases_and_flags_dangling_seg() {
        let dec = ToyMaskDecoder::new((1, 1), 2, 2).unwrap();
        let params = decoder_params(Array2::eye(1));
        let frames = VideoFeatures::from_frames(vec![array![[1.0]]]).unwrap();
        let st = |v: f64| SegHiddenState {
            data: vec![v],
            response_position: 0,
            turn_index: 0,
        };
        let out = ground_response(
            "<p>a cat</p>[SEG] and <p>a hat</p> then [SEG]",
            &[st(1.0), st(-1.0)],
            &dec,
            &params,
            &frames,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].phrase, "a cat");
        assert!(!out[0].dangling);
        assert_eq!(out[0].track.masks[0].area(), 4);
        // "a hat" is bound by the second [SEG] since it is the nearest unbound phrase
        assert_eq!(out[1].phrase, "a hat");
        assert!(out[1].track.masks[0].is_empty());

        let out = ground_response("[SEG] alone", &[st(1.0)], &dec, &params, &frames).unwrap();
        assert!(out[0].dangling && out[0].phrase.is_empty());
        assert!(ground_response("<p>x</p>[SEG]", &[], &dec, &params, &frames).is_err());
    }

    #[test]
    fn decoder_is_frame_permutation_equivariant() {
        let dec = ToyMaskDecoder::new((2, 2), 4, 4).unwrap();
        let params = decoder_params(array![[1.0, -0.5], [0.25, 2.0]]);
        let frames: Vec<Mat> = (0..3)
            .map(|f| Array2::from_shape_fn((4, 2), |(i, j)| ((f * 7 + i * 3 + j) % 5) as f64 - 2.0))
            .collect();
        let hidden = SegHiddenState {
            data: vec![0.7, -0.3],
            response_position: 0,
            turn_index: 0,
        };
        let a = toy_decode(&dec, &params, &hidden, &VideoFeatures::from_frames(frames.clone()).unwrap()).unwrap();
        let perm = [2, 0, 1];
        let pf = perm.iter().map(|&i| frames[i].clone()).collect();
        let b = toy_decode(&dec, &params, &hidden, &VideoFeatures::from_frames(pf).unwrap()).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(b.masks[slot], a.masks[src]);
        }
    }
}
