//! Runtime self-checks: finite-difference gradients through the whole model,
//! attention normalization, a loop-level context-stage oracle, RLE round trips
//! and metric identities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Mat};
use crate::datagen::record::{GroundedDialogueRecord, ObjectEntry, Role, ShapeKind, ShapeSpec, SyntheticScene, Turn};
use crate::error::Result;
use crate::mask::{BinaryMask, MaskTrack};
use crate::metrics::{cider, meteor, st_iou, MeteorParams};
use crate::model::{loss, lm::LmConfig, LossWeights, ModelConfig, PreparedRecord, SamaModel, Vocab};
use crate::params::{normal, ParamStore};
use crate::stc_aggregator::{
    self, aggregate_traced, context_aggregate, AggregatorConfig, AttentionRecorder, TemporalTokens, VideoFeatures,
};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Micro instance: 4x4 frames in 2x2 patches, 2 frames, a 16-token vocabulary
/// and one exchange referring to and grounding a single square.
pub fn micro_instance(enabled: bool, seed: u64) -> Result<(SamaModel, PreparedRecord)> {
    let user = "where is <region:0>";
    let assistant = "<p>red square</p>[SEG:0] moves.";
    let vocab = Vocab::build([user, assistant]);
    debug_assert_eq!(vocab.len(), 16);
    let config = ModelConfig {
        aggregator: AggregatorConfig {
            k_s: 2,
            k_t: 2,
            w_t: 2,
            stride: 1,
            spatial_heads: 2,
            temporal_heads: 2,
            context_heads: 1,
            d_v: 4,
            d_llm: 8,
            ffn_mult: 2,
            long_frames: None,
            enabled,
        },
        lm: LmConfig {
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq_len: 24,
        },
        frame_width: 4,
        frame_height: 4,
        patch_size: 2,
        num_keyframes: 2,
        max_new_tokens: 4,
    };
    let model = SamaModel::new(config, vocab, seed)?;
    let scene = SyntheticScene {
        width: 4,
        height: 4,
        background: [40, 40, 40],
        num_frames: 2,
        shapes: vec![ShapeSpec {
            object_id: "0".into(),
            kind: ShapeKind::Square,
            color_name: "red".into(),
            rgb: [230, 25, 75],
            size: 2,
            x0: 0,
            y0: 0,
            vx: 1,
            vy: 1,
        }],
    };
    let track = &scene.render_masks()[0];
    let record = GroundedDialogueRecord {
        video_id: "micro".into(),
        sampled_frames: vec!["synthetic:micro/0".into(), "synthetic:micro/1".into()],
        objects: vec![ObjectEntry {
            object_id: "0".into(),
            color_tag: "red".into(),
            rle_masks: track.to_rle(),
            category: None,
        }],
        descriptions: vec![],
        conversation: vec![
            Turn {
                role: Role::User,
                text: user.into(),
            },
            Turn {
                role: Role::Assistant,
                text: assistant.into(),
            },
        ],
        source: None,
        synthetic: Some(scene),
        prediction: None,
    };
    let prep = model.prepare(&record, None)?;
    Ok((model, prep))
}

fn loss_value(model: &SamaModel, prep: &PreparedRecord, w: LossWeights) -> Result<f64> {
    let mut g = Graph::inference();
    let out = model.forward(&mut g, prep, 0)?;
    Ok(loss(&mut g, &out, w).1.total)
}

/// Per trainable tensor, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// with central differences of step [`FD_STEP`].
pub fn gradient_errors(model: &SamaModel, prep: &PreparedRecord, w: LossWeights) -> Result<BTreeMap<String, f64>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, prep, 0)?;
    let (total, _) = loss(&mut g, &out, w);
    g.backward(total);
    let analytic = g.param_grads();

    let mut probe = model.clone();
    let mut errors = BTreeMap::new();
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let shape = model.params.value(&name).dim();
        let mut numeric = Mat::zeros(shape);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = model.params.value(&name)[[i, j]];
                probe.params.get_mut(&name).expect("present").value[[i, j]] = orig + FD_STEP;
                let up = loss_value(&probe, prep, w)?;
                probe.params.get_mut(&name).expect("present").value[[i, j]] = orig - FD_STEP;
                let down = loss_value(&probe, prep, w)?;
                probe.params.get_mut(&name).expect("present").value[[i, j]] = orig;
                numeric[[i, j]] = (up - down) / (2.0 * FD_STEP);
            }
        }
        let a = analytic.get(&name).cloned().unwrap_or_else(|| Mat::zeros(shape));
        let norm = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = norm(&a).max(norm(&numeric));
        let err = if scale == 0.0 { 0.0 } else { norm(&(&a - &numeric)) / scale };
        errors.insert(name, err);
    }
    Ok(errors)
}

fn gradient_check() -> Result<CheckOutcome> {
    let (model, prep) = micro_instance(true, 3)?;
    let errors = gradient_errors(&model, &prep, LossWeights::default())?;
    let (worst, err) = errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap_or_default();
    Ok(CheckOutcome {
        name: "gradient".into(),
        passed: err <= GRADIENT_TOLERANCE,
        detail: format!("{} tensors, worst relative error {err:.2e} ({worst})", errors.len()),
    })
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, p: usize, d: usize) -> Result<VideoFeatures> {
    VideoFeatures::from_frames((0..n).map(|_| normal(rng, p, d, 1.0)).collect())
}

fn attention_normalization(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let w_t = rng.gen_range(1..5);
        let cfg = AggregatorConfig {
            k_s: rng.gen_range(1..6),
            k_t: rng.gen_range(1..4),
            w_t,
            stride: rng.gen_range(1..=w_t),
            spatial_heads: heads,
            temporal_heads: heads,
            context_heads: [1, heads][rng.gen_range(0..2)],
            d_v: 4 * rng.gen_range(1..3),
            d_llm: rng.gen_range(2..10),
            ffn_mult: 2,
            long_frames: None,
            enabled: true,
        };
        let params = stc_aggregator::init_params(&cfg, rng);
        let (n, p) = (rng.gen_range(1..9), rng.gen_range(1..7));
        let frames = random_features(rng, n, p, cfg.d_v)?;
        let question = if rng.gen_bool(0.5) {
            let l = rng.gen_range(1..4);
            Some(normal(rng, l, cfg.d_v, 1.0))
        } else {
            None
        };
        let (_, weights) = aggregate_traced(
            &frames,
            question.as_ref(),
            None,
            &cfg,
            &params,
            &mut AttentionRecorder::on(),
        )?;
        for (_, w) in &weights {
            for row in w.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
    }
    Ok(CheckOutcome {
        name: "attention_normalization".into(),
        passed: worst <= 1e-6,
        detail: format!("100 configurations, max |row sum - 1| = {worst:.2e}"),
    })
}

/// Explicit-loop context stage with one head.
pub fn context_oracle(frames: &VideoFeatures, z: &Mat, params: &ParamStore) -> Mat {
    let (wq, wk, wv, wp) = (
        params.value("agg.context.wq"),
        params.value("agg.context.wk"),
        params.value("agg.context.wv"),
        params.value("agg.context.wp"),
    );
    let c = wq.ncols();
    let lin = |x: &[f64], w: &Mat| -> Vec<f64> {
        (0..w.ncols()).map(|j| (0..x.len()).map(|i| x[i] * w[[i, j]]).sum()).collect()
    };
    let keys: Vec<Vec<f64>> = z.rows().into_iter().map(|r| lin(&r.to_vec(), wk)).collect();
    let values: Vec<Vec<f64>> = z.rows().into_iter().map(|r| lin(&r.to_vec(), wv)).collect();
    let mut out = Mat::zeros((frames.num_frames(), wp.ncols()));
    for (f, feat) in frames.frames().iter().enumerate() {
        let mut pooled = vec![0.0; c];
        for patch in feat.rows() {
            let q = lin(&patch.to_vec(), wq);
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| (0..c).map(|i| q[i] * k[i]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for (k, v) in values.iter().enumerate() {
                for i in 0..c {
                    pooled[i] += e[k] / total * v[i] / feat.nrows() as f64;
                }
            }
        }
        let row = lin(&pooled, wp);
        for (j, v) in row.into_iter().enumerate() {
            out[[f, j]] = v;
        }
    }
    out
}

fn context_equivalence(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let cfg = AggregatorConfig {
        k_s: 2,
        k_t: 2,
        w_t: 2,
        stride: 2,
        spatial_heads: 1,
        temporal_heads: 1,
        context_heads: 1,
        d_v: 3,
        d_llm: 5,
        ffn_mult: 1,
        long_frames: None,
        enabled: true,
    };
    let params = stc_aggregator::init_params(&cfg, rng);
    let frames = random_features(rng, 2, 2, 3)?;
    let z = normal(rng, 2, 3, 1.0);
    let temporal = TemporalTokens {
        data: z.clone(),
        window_boundaries: vec![(0, 1)],
    };
    let fast = context_aggregate(&frames, &temporal, &cfg, &params)?.data;
    let slow = context_oracle(&frames, &z, &params);
    let diff = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(CheckOutcome {
        name: "context_oracle".into(),
        passed: diff <= 1e-6,
        detail: format!("max elementwise difference {diff:.2e}"),
    })
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let p = rng.gen::<f64>();
    let data = (0..w * h).map(|_| rng.gen_bool(p)).collect();
    BinaryMask::from_vec(w, h, data).expect("sized")
}

fn rle_round_trip(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut failures = 0;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let m = random_mask(rng, w, h);
        if m.to_rle().decode()? != m {
            failures += 1;
        }
    }
    Ok(CheckOutcome {
        name: "rle_round_trip".into(),
        passed: failures == 0,
        detail: format!("{failures}/200 masks differ after decode(encode(m))"),
    })
}

fn metric_oracles(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut iou_mismatch = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..4);
        let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let a = MaskTrack::new((0..n).map(|_| random_mask(rng, w, h)).collect(), None)?;
        let b = MaskTrack::new((0..n).map(|_| random_mask(rng, w, h)).collect(), None)?;
        let (mut inter, mut union) = (0, 0);
        for (ma, mb) in a.masks.iter().zip(&b.masks) {
            for (&x, &y) in ma.pixels().iter().zip(mb.pixels()) {
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
        }
        let oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        if st_iou(&a, &b)? != oracle {
            iou_mismatch += 1;
        }
    }
    let m = meteor("cat", &["cat"], MeteorParams::default());
    let corpus = vec![
        ("a red square moves left".to_string(), vec!["a red square moves left".to_string()]),
        ("blue circles drift away".to_string(), vec!["the green circle waits".to_string()]),
    ];
    let c = cider(&corpus, 4, 6.0)?.per_sample[0];
    let passed = iou_mismatch == 0 && m == 0.5 && (c - 10.0).abs() <= 1e-9;
    Ok(CheckOutcome {
        name: "metric_oracles".into(),
        passed,
        detail: format!("st_iou mismatches {iou_mismatch}/100, meteor(cat, cat) = {m}, identical cider = {c}"),
    })
}

/// Runs every check; an error inside a check is reported as a failure.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<CheckOutcome>| {
        out.push(r.unwrap_or_else(|e| CheckOutcome {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        }))
    };
    push("gradient", gradient_check());
    push("attention_normalization", attention_normalization(&mut rng));
    push("context_oracle", context_equivalence(&mut rng));
    push("rle_round_trip", rle_round_trip(&mut rng));
    push("metric_oracles", metric_oracles(&mut rng));
    out
}
