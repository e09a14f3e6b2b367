use log::warn;

use super::{PreparedRecord, SamaModel, Sequence};
use crate::autograd::Graph;
use crate::datagen::record::{PredictedObject, Prediction};
use crate::error::Result;
use crate::grounding_head::{extract_seg_states, ground_response, GroundedPhrase};

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<usize>,
    pub phrases: Vec<GroundedPhrase>,
}

impl Generation {
    pub fn num_seg(&self, seg_id: usize) -> usize {
        self.tokens.iter().filter(|&&t| t == seg_id).count()
    }
}

/// Greedy decoding for exchange `exchange`, conditioned on the ground-truth
/// history before it. `forced` replaces decoding with the given response ids.
pub fn generate(
    model: &SamaModel,
    prep: &PreparedRecord,
    exchange: usize,
    forced: Option<&[usize]>,
) -> Result<Generation> {
    let mut seq = model.prompt(prep, exchange)?;
    let eos = model.vocab.eos_id();
    let banned = model.vocab.non_generable();
    let limit = model.config.lm.max_seq_len.saturating_sub(seq.tokens.len() + 1);
    match forced {
        Some(ids) => seq.tokens.extend_from_slice(ids),
        None => {
            for _ in 0..model.config.max_new_tokens.min(limit) {
                let next = next_token(model, prep, &seq, &banned)?;
                if next == eos {
                    break;
                }
                seq.tokens.push(next);
            }
        }
    }
    let response = seq.tokens[seq.response_start..].to_vec();
    let text = model.vocab.decode(&response);

    let mut g = Graph::inference();
    let (hidden, layout, _) = model.run(&mut g, prep, &seq)?;
    let start = layout.prefix_len() + seq.response_start;
    let rows = g.value(hidden).slice(ndarray::s![start.., ..]).to_owned();
    let states = extract_seg_states(&response, &vec![exchange; response.len()], &rows, model.vocab.seg_id())?;
    let phrases = match ground_response(&text, &states, &model.decoder, &model.params, &prep.features) {
        Ok(p) => p,
        Err(e) => {
            warn!("`{}` exchange {exchange}: cannot bind phrases ({e}); masks kept unbound", prep.video_id);
            states
                .iter()
                .map(|s| {
                    Ok(GroundedPhrase {
                        phrase: String::new(),
                        track: crate::grounding_head::MaskDecoder::decode(&model.decoder, &model.params, s, &prep.features)?,
                        dangling: true,
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(Generation {
        text,
        tokens: response,
        phrases,
    })
}

fn next_token(model: &SamaModel, prep: &PreparedRecord, seq: &Sequence, banned: &[usize]) -> Result<usize> {
    let mut g = Graph::inference();
    let (hidden, layout, _) = model.run(&mut g, prep, seq)?;
    let last = layout.len() - 1;
    let h = g.gather_rows(hidden, &[last]);
    let logits = super::lm::logits(&mut g, &model.params, h);
    let row = g.value(logits).row(0);
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if !banned.contains(&i) && v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Generates every exchange of a record and packs the result as a
/// prediction: answers joined by spaces, one object per grounded phrase.
pub fn predict_record(model: &SamaModel, prep: &PreparedRecord) -> Result<Prediction> {
    let mut texts = Vec::new();
    let mut objects = Vec::new();
    for j in 0..prep.num_exchanges() {
        let gen = generate(model, prep, j, None)?;
        texts.push(gen.text);
        objects.extend(gen.phrases.into_iter().map(|p| PredictedObject {
            phrase: p.phrase,
            rle_masks: p.track.to_rle(),
        }));
    }
    Ok(Prediction {
        text: texts.join(" "),
        objects,
    })
}
