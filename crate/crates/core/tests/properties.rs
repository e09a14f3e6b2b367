use ndarray::Axis;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sama_core::autograd::Mat;
use sama_core::datagen::record::{read_jsonl, write_jsonl};
use sama_core::datagen::som::{render_som_frames, Palette, BORDER_WIDTH};
use sama_core::datagen::{generate_synthetic_corpus, validate_record, SyntheticConfig};
use sama_core::markup::{self, MarkupToken};
use sama_core::mask::{BBox, BinaryMask, MaskTrack};
use sama_core::metrics::{cider, st_iou};
use sama_core::params::normal;
use sama_core::referring_prompts::{
    assemble_stream, embed_prompt, mask_pool, ObjectEmbedding, ObjectPrompt, Segment, StreamLayout,
};
use sama_core::stc_aggregator::{
    enumerate_windows, init_params, spatial_aggregate, AggregatedContext, AggregatorConfig, VideoFeatures,
};

fn small_cfg() -> AggregatorConfig {
    AggregatorConfig {
        k_s: 3,
        k_t: 2,
        w_t: 2,
        stride: 2,
        spatial_heads: 2,
        temporal_heads: 2,
        context_heads: 1,
        d_v: 4,
        d_llm: 6,
        ffn_mult: 2,
        long_frames: None,
        enabled: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_tile_the_clip_with_stride_spacing(n in 1usize..60, w_t in 1usize..12, s in 1usize..12) {
        let stride = s.min(w_t);
        let w = enumerate_windows(n, w_t, stride);
        prop_assert_eq!(w[0].0, 0);
        prop_assert_eq!(w.last().unwrap().1, n - 1);
        for (i, &(a, b)) in w.iter().enumerate() {
            prop_assert_eq!(a, i * stride);
            prop_assert!(b >= a && b - a < w_t);
        }
        for pair in w.windows(2) {
            prop_assert!(pair[1].0 <= pair[0].1 + 1);
            prop_assert!(pair[0].1 < n - 1);
        }
    }

    #[test]
    fn spatial_stage_is_frame_permutation_equivariant(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg();
        let params = init_params(&cfg, &mut rng);
        let frames: Vec<Mat> = (0..n).map(|_| normal(&mut rng, 5, cfg.d_v, 1.0)).collect();
        let perm: Vec<usize> = (0..n).rev().collect();
        let a = spatial_aggregate(&VideoFeatures::from_frames(frames.clone()).unwrap(), &cfg, &params).unwrap();
        let shuffled = perm.iter().map(|&i| frames[i].clone()).collect();
        let b = spatial_aggregate(&VideoFeatures::from_frames(shuffled).unwrap(), &cfg, &params).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&b.data[k], &a.data[i]);
        }
    }

    #[test]
    fn mask_pool_ignores_simultaneous_patch_permutation(seed in any::<u64>(), x0 in 0usize..10, y0 in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = (4, 4);
        let feats = normal(&mut rng, 16, 5, 1.0);
        let proj = normal(&mut rng, 5, 3, 1.0);
        let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + 6) as f64, (y0 + 5) as f64);
        let mask = BinaryMask::filled_box(16, 16, bbox);
        let base = mask_pool(&feats, &mask, grid, &proj).unwrap();

        // Mirror the patch grid left-right together with the feature rows.
        let mirrored = BinaryMask::from_fn(16, 16, |x, y| mask.get(15 - x, y));
        let order: Vec<usize> = (0..16).map(|i| (i / 4) * 4 + (3 - i % 4)).collect();
        let permuted = feats.select(Axis(0), &order);
        let other = mask_pool(&permuted, &mirrored, grid, &proj).unwrap();
        for (a, b) in base.data.iter().zip(&other.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn box_prompt_equals_its_filled_mask(seed in any::<u64>(), x0 in 0.0f64..20.0, y0 in 0.0f64..20.0, w in 1.0f64..12.0, h in 1.0f64..12.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = normal(&mut rng, 16, 4, 1.0);
        let proj = normal(&mut rng, 4, 4, 1.0);
        let bbox = BBox::new(x0, y0, (x0 + w).min(32.0), (y0 + h).min(32.0));
        let a = embed_prompt(&ObjectPrompt::Box { frame_index: 0, bbox }, &feats, (32, 32), (4, 4), &proj).unwrap();
        let m = ObjectPrompt::from_mask(0, BinaryMask::filled_box(32, 32, bbox));
        let b = embed_prompt(&m, &feats, (32, 32), (4, 4), &proj).unwrap();
        prop_assert_eq!(a.data, b.data);
    }

    #[test]
    fn segment_map_partitions_the_stream(
        n_key in 0usize..5,
        n_agg in 0usize..5,
        text in proptest::collection::vec(0usize..6, 1..20),
        picks in proptest::collection::vec(any::<bool>(), 20),
    ) {
        let positions: Vec<usize> = (0..text.len()).filter(|&i| picks[i]).collect();
        let layout = StreamLayout::new(n_key, n_agg, &text, &positions, 5).unwrap();
        prop_assert_eq!(layout.len(), n_key + n_agg + text.len());
        let (key, rest) = layout.segment_map.split_at(n_key);
        let (agg, txt) = rest.split_at(n_agg);
        prop_assert!(key.iter().all(|s| *s == Segment::KeyframeVisual));
        prop_assert!(agg.iter().all(|s| *s == Segment::AggregatedVisual));
        prop_assert!(txt.iter().all(|s| matches!(s, Segment::Text | Segment::ObjectRef | Segment::SegToken)));
        prop_assert!(layout.object_slots.iter().all(|&p| p >= n_key + n_agg));
        prop_assert_eq!(layout.object_slots.len(), positions.len());
    }

    #[test]
    fn deleting_spliced_slots_recovers_the_text(
        seed in any::<u64>(),
        text in proptest::collection::vec(0usize..8, 1..15),
        picks in proptest::collection::vec(any::<bool>(), 15),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let table = normal(&mut rng, 8, d, 1.0);
        let keyframes = vec![normal(&mut rng, 2, d, 1.0)];
        let agg = AggregatedContext { data: normal(&mut rng, 3, d, 1.0) };
        let objects: Vec<(usize, ObjectEmbedding)> = (0..text.len())
            .filter(|&i| picks[i])
            .map(|i| (i, ObjectEmbedding { data: vec![100.0 + i as f64; d], source_prompt: None }))
            .collect();
        let stream = assemble_stream(&keyframes, &agg, &text, &table, &objects, 7).unwrap();
        let prefix = stream.layout.prefix_len();
        for (i, &t) in text.iter().enumerate() {
            let row = stream.embeddings.row(prefix + i);
            if objects.iter().any(|(p, _)| *p == i) {
                prop_assert!(row.iter().all(|&v| v == 100.0 + i as f64));
            } else {
                prop_assert_eq!(row, table.row(t));
            }
        }
        let kept: Vec<usize> = (0..stream.len())
            .filter(|p| !stream.object_slots().contains(p) && *p >= prefix)
            .collect();
        let original: Vec<usize> = (0..text.len()).filter(|i| !picks[*i]).collect();
        prop_assert_eq!(kept.len(), original.len());
        for (p, i) in kept.iter().zip(&original) {
            prop_assert_eq!(stream.embeddings.row(*p), table.row(text[*i]));
        }
    }

    #[test]
    fn st_iou_is_symmetric_and_monotone(
        a in proptest::collection::vec(any::<bool>(), 48),
        b in proptest::collection::vec(any::<bool>(), 48),
        flip in 0usize..48,
    ) {
        let track = |bits: &[bool]| {
            MaskTrack::new(
                bits.chunks(16).map(|c| BinaryMask::from_vec(4, 4, c.to_vec()).unwrap()).collect(),
                None,
            )
            .unwrap()
        };
        let (ta, tb) = (track(&a), track(&b));
        let ab = st_iou(&ta, &tb).unwrap();
        prop_assert_eq!(ab, st_iou(&tb, &ta).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        // Turning a pixel of `a` on where `b` is on adds intersection at fixed union.
        if b[flip] && !a[flip] {
            let mut a2 = a.clone();
            a2[flip] = true;
            prop_assert!(st_iou(&track(&a2), &tb).unwrap() >= ab);
        }
    }

    #[test]
    fn cider_ignores_sample_order(rot in 0usize..4) {
        let corpus: Vec<(String, Vec<String>)> = [
            ("a dog runs to the ball", "the dog runs after a ball"),
            ("the red car stops", "a red car stops at the light"),
            ("two birds fly away", "the birds fly over the lake"),
            ("a cat sleeps", "the cat sleeps on a box"),
        ]
        .iter()
        .map(|(c, r)| (c.to_string(), vec![r.to_string()]))
        .collect();
        let base = cider(&corpus, 4, 6.0).unwrap();
        let mut turned = corpus.clone();
        turned.rotate_left(rot);
        let other = cider(&turned, 4, 6.0).unwrap();
        prop_assert!((base.corpus - other.corpus).abs() <= 1e-12);
        for i in 0..corpus.len() {
            prop_assert!((base.per_sample[(i + rot) % corpus.len()] - other.per_sample[i]).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_records_are_valid_and_round_trip(seed in any::<u64>(), n in 1usize..6) {
        let recs = generate_synthetic_corpus(n, seed, &SyntheticConfig::default()).unwrap();
        for r in &recs {
            prop_assert!(validate_record(r).is_empty());
            prop_assert!(r.colors_are_bijective());
            for turn in &r.conversation {
                for t in markup::lex(&turn.text) {
                    if let MarkupToken::Seg { id, .. } | MarkupToken::Region { id, .. } = t {
                        prop_assert!(id.and_then(|id| r.object(id)).is_some());
                    }
                }
            }
        }
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        prop_assert_eq!(read_jsonl(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn som_marks_stay_on_box_borders(seed in any::<u64>()) {
        let recs = generate_synthetic_corpus(1, seed, &SyntheticConfig::default()).unwrap();
        let scene = recs[0].synthetic.as_ref().unwrap();
        let frames = scene.render_frames();
        let tracks: Vec<MaskTrack> = recs[0].objects.iter().map(|o| o.track().unwrap()).collect();
        let ids: Vec<String> = recs[0].objects.iter().map(|o| o.object_id.clone()).collect();
        let (marked, _) = render_som_frames(&frames, &tracks, &ids, &Palette::default()).unwrap();
        for (t, (before, after)) in frames.iter().zip(&marked).enumerate() {
            for (x, y, px) in after.enumerate_pixels() {
                if px == before.get_pixel(x, y) {
                    continue;
                }
                let on_border = tracks.iter().any(|tr| {
                    tr.masks[t].bounds().is_some_and(|b| {
                        let (x, y) = (x as f64, y as f64);
                        b.contains(x, y)
                            && [x - b.x0, b.x1 - 1.0 - x, y - b.y0, b.y1 - 1.0 - y]
                                .iter()
                                .any(|d| *d < BORDER_WIDTH as f64)
                    })
                });
                prop_assert!(on_border, "pixel ({x}, {y}) of frame {t} changed off a border");
            }
        }
    }
}
