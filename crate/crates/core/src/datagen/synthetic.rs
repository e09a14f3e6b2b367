//! Moving-shapes corpus: 2–4 colored squares or circles translating over a
//! plain background, with exact masks and template dialogues.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{
    Description, GroundedDialogueRecord, ObjectEntry, Role, ShapeKind, ShapeSpec, SyntheticScene, Turn,
};
use super::som::Palette;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskTrack};

pub const SOURCE_NAME: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: i32,
    pub max_size: i32,
    pub max_speed: i32,
    pub background: [u8; 3],
    /// Minimum visible fraction of every shape on every frame.
    pub min_visible: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            num_frames: 8,
            min_objects: 2,
            max_objects: 4,
            min_size: 5,
            max_size: 8,
            max_speed: 2,
            background: [40, 40, 40],
            min_visible: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=16).contains(&self.num_frames) {
            return Err(Error::Config("synthetic clips need 4 to 16 frames".into()));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(Error::Config("synthetic clips need 2 <= min_objects <= max_objects".into()));
        }
        if self.min_size < 2 || self.max_size < self.min_size {
            return Err(Error::Config("shape sizes need 2 <= min_size <= max_size".into()));
        }
        if self.max_size as usize * 2 > self.width.min(self.height) {
            return Err(Error::Config("canvas too small for the largest shape".into()));
        }
        if self.max_speed < 1 {
            return Err(Error::Config("max_speed must be >= 1".into()));
        }
        Ok(())
    }
}

impl ShapeSpec {
    /// Top-left corner at frame `t`.
    pub fn position(&self, t: usize) -> (i32, i32) {
        (self.x0 + self.vx * t as i32, self.y0 + self.vy * t as i32)
    }

    /// Pixels covered at frame `t`, ignoring occlusion.
    pub fn covers(&self, t: usize, x: usize, y: usize) -> bool {
        let (px, py) = self.position(t);
        let (x, y) = (x as i32, y as i32);
        if x < px || y < py || x >= px + self.size || y >= py + self.size {
            return false;
        }
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = self.size as f64 / 2.0;
                let dx = (x - px) as f64 + 0.5 - r;
                let dy = (y - py) as f64 + 0.5 - r;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    pub fn motion_phrase(&self) -> String {
        let h = match self.vx.signum() {
            1 => Some("right"),
            -1 => Some("left"),
            _ => None,
        };
        let v = match self.vy.signum() {
            1 => Some("down"),
            -1 => Some("up"),
            _ => None,
        };
        match (h, v) {
            (Some(h), Some(v)) => format!("moves {v} and {h}"),
            (Some(d), None) | (None, Some(d)) => format!("moves {d}"),
            (None, None) => "stays still".into(),
        }
    }

    pub fn noun(&self) -> String {
        let k = match self.kind {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        };
        format!("{} {k}", self.color_name)
    }
}

impl SyntheticScene {
    /// Frames with later shapes painted over earlier ones.
    pub fn render_frames(&self) -> Vec<RgbImage> {
        (0..self.num_frames)
            .map(|t| {
                let mut img = RgbImage::from_pixel(self.width as u32, self.height as u32, Rgb(self.background));
                for s in &self.shapes {
                    for y in 0..self.height {
                        for x in 0..self.width {
                            if s.covers(t, x, y) {
                                img.put_pixel(x as u32, y as u32, Rgb(s.rgb));
                            }
                        }
                    }
                }
                img
            })
            .collect()
    }

    /// Visible-pixel masks after occlusion, one track per shape.
    pub fn render_masks(&self) -> Vec<MaskTrack> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let masks = (0..self.num_frames)
                    .map(|t| {
                        BinaryMask::from_fn(self.width, self.height, |x, y| {
                            s.covers(t, x, y) && !self.shapes[k + 1..].iter().any(|o| o.covers(t, x, y))
                        })
                    })
                    .collect();
                MaskTrack::new(masks, Some(s.object_id.clone())).expect("uniform dims")
            })
            .collect()
    }

    /// Full (unoccluded) area of each shape on frame 0.
    fn full_area(&self, k: usize) -> usize {
        let s = &self.shapes[k];
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| s.covers(0, x, y))
            .count()
    }
}

fn sample_shape<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, k: usize, color: (&str, [u8; 3])) -> ShapeSpec {
    let size = rng.gen_range(cfg.min_size..=cfg.max_size);
    let travel = |extent: usize| {
        let room = extent as i32 - size;
        let steps = cfg.num_frames as i32 - 1;
        (room / steps).min(cfg.max_speed)
    };
    let pick = |rng: &mut R, max: i32| {
        if max <= 0 {
            0
        } else {
            let v = rng.gen_range(0..=max);
            if rng.gen_bool(0.5) {
                -v
            } else {
                v
            }
        }
    };
    let (mut vx, vy) = (pick(rng, travel(cfg.width)), pick(rng, travel(cfg.height)));
    if vx == 0 && vy == 0 {
        vx = if rng.gen_bool(0.5) { 1 } else { -1 };
    }
    let steps = cfg.num_frames as i32 - 1;
    let start = |rng: &mut R, extent: usize, v: i32| {
        let lo = if v < 0 { -v * steps } else { 0 };
        let hi = extent as i32 - size - if v > 0 { v * steps } else { 0 };
        rng.gen_range(lo..=hi.max(lo))
    };
    let x0 = start(rng, cfg.width, vx);
    let y0 = start(rng, cfg.height, vy);
    ShapeSpec {
        object_id: k.to_string(),
        kind: if rng.gen_bool(0.5) { ShapeKind::Square } else { ShapeKind::Circle },
        color_name: color.0.to_string(),
        rgb: color.1,
        size,
        x0,
        y0,
        vx,
        vy,
    }
}

const MAX_SCENE_TRIES: usize = 200;

/// A scene whose shapes each stay at least `min_visible` visible.
pub fn sample_scene<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let palette = Palette::default().take(cfg.max_objects.max(8), &[cfg.background])?;
    for _ in 0..MAX_SCENE_TRIES {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let colors: Vec<_> = palette.choose_multiple(rng, n).cloned().collect();
        let shapes = colors
            .iter()
            .enumerate()
            .map(|(k, c)| sample_shape(rng, cfg, k, (c.name.as_str(), c.rgb)))
            .collect();
        let scene = SyntheticScene {
            width: cfg.width,
            height: cfg.height,
            background: cfg.background,
            num_frames: cfg.num_frames,
            shapes,
        };
        let masks = scene.render_masks();
        let ok = masks.iter().enumerate().all(|(k, track)| {
            let full = scene.full_area(k) as f64;
            track.masks.iter().all(|m| m.area() as f64 >= cfg.min_visible * full)
        });
        if ok {
            return Ok(scene);
        }
    }
    Err(Error::Config("could not place shapes with the requested visibility".into()))
}

fn position_phrase(s: &ShapeSpec, width: usize, height: usize) -> &'static str {
    let (x, y) = s.position(0);
    let cx = x as f64 + s.size as f64 / 2.0;
    let cy = y as f64 + s.size as f64 / 2.0;
    match (cy < height as f64 / 2.0, cx < width as f64 / 2.0) {
        (true, true) => "starts in the top left",
        (true, false) => "starts in the top right",
        (false, true) => "starts in the bottom left",
        (false, false) => "starts in the bottom right",
    }
}

/// Template dialogue: a region question about one shape, then a question
/// naming another by color.
pub fn template_dialogue<R: Rng>(rng: &mut R, scene: &SyntheticScene) -> (Vec<Description>, Vec<Turn>) {
    let descriptions = scene
        .shapes
        .iter()
        .map(|s| Description {
            object_id: s.object_id.clone(),
            text: format!("A {} of size {} that {}.", s.noun(), s.size, s.motion_phrase()),
        })
        .collect();
    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.shuffle(rng);
    let a = &scene.shapes[order[0]];
    let b = &scene.shapes[order[1]];
    let turn = |role, text: String| Turn { role, text };
    let conversation = vec![
        turn(Role::User, format!("What is <region:{}> doing?", a.object_id)),
        turn(
            Role::Assistant,
            format!("<p>the {}</p>[SEG:{}] {}.", a.noun(), a.object_id, a.motion_phrase()),
        ),
        turn(Role::User, format!("Where is the {}?", b.noun())),
        turn(
            Role::Assistant,
            format!(
                "<p>the {}</p>[SEG:{}] {}.",
                b.noun(),
                b.object_id,
                position_phrase(b, scene.width, scene.height)
            ),
        ),
    ];
    (descriptions, conversation)
}

pub fn scene_record<R: Rng>(rng: &mut R, video_id: String, scene: SyntheticScene) -> GroundedDialogueRecord {
    let (descriptions, conversation) = template_dialogue(rng, &scene);
    let masks = scene.render_masks();
    let objects = scene
        .shapes
        .iter()
        .zip(&masks)
        .map(|(s, track)| ObjectEntry {
            object_id: s.object_id.clone(),
            color_tag: s.color_name.clone(),
            rle_masks: track.to_rle(),
            category: Some(match s.kind {
                ShapeKind::Square => "square".into(),
                ShapeKind::Circle => "circle".into(),
            }),
        })
        .collect();
    GroundedDialogueRecord {
        sampled_frames: (0..scene.num_frames).map(|t| format!("{SOURCE_NAME}:{video_id}/{t}")).collect(),
        video_id,
        objects,
        descriptions,
        conversation,
        source: Some(SOURCE_NAME.into()),
        synthetic: Some(scene),
        prediction: None,
    }
}

/// `n` records; record `i` depends only on `(seed, i)`.
pub fn generate_synthetic_corpus(n: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Vec<GroundedDialogueRecord>> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus size must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = sample_scene(&mut rng, cfg)?;
            Ok(scene_record(&mut rng, format!("syn{seed}_{i:05}"), scene))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::validate::validate_record;

    #[test]
    fn six_by_six_square_has_36_pixels() {
        let scene = SyntheticScene {
            width: 16,
            height: 16,
            background: [0, 0, 0],
            num_frames: 2,
            shapes: vec![ShapeSpec {
                object_id: "0".into(),
                kind: ShapeKind::Square,
                color_name: "red".into(),
                rgb: [255, 0, 0],
                size: 6,
                x0: 3,
                y0: 4,
                vx: 1,
                vy: 0,
            }],
        };
        let track = &scene.render_masks()[0];
        assert_eq!(track.masks[0].area(), 36);
        assert!(track.masks[1].get(9, 4) && !track.masks[1].get(3, 4));
        assert_eq!(MaskTrack::from_rle(&track.to_rle(), None).unwrap().masks, track.masks);
        let frames = scene.render_frames();
        assert_eq!(*frames[0].get_pixel(3, 4), Rgb([255, 0, 0]));
    }

    #[test]
    fn occluded_pixels_belong_to_the_top_shape() {
        let sq = |id: &str, x0| ShapeSpec {
            object_id: id.into(),
            kind: ShapeKind::Square,
            color_name: id.into(),
            rgb: [1, 2, 3],
            size: 4,
            x0,
            y0: 0,
            vx: 0,
            vy: 0,
        };
        let scene = SyntheticScene {
            width: 8,
            height: 4,
            background: [0, 0, 0],
            num_frames: 1,
            shapes: vec![sq("a", 0), sq("b", 2)],
        };
        let m = scene.render_masks();
        assert_eq!(m[0].masks[0].area(), 8);
        assert_eq!(m[1].masks[0].area(), 16);
        assert_eq!(m[0].masks[0].intersection_area(&m[1].masks[0]), 0);
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic_corpus(10, 3, &cfg).unwrap();
        let b = generate_synthetic_corpus(10, 3, &cfg).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(r.objects.len() >= 2 && r.objects.len() <= 4);
            assert!(r.colors_are_bijective());
            assert_eq!(validate_record(r), vec![]);
            assert_eq!(r.sampled_frames.len(), 8);
            let scene = r.synthetic.as_ref().unwrap();
            for (o, t) in r.objects.iter().zip(scene.render_masks()) {
                assert_eq!(o.track().unwrap().masks, t.masks);
            }
        }
        assert_ne!(a[0], generate_synthetic_corpus(1, 4, &cfg).unwrap()[0]);
    }

    #[test]
    fn shapes_stay_on_canvas() {
        let cfg = SyntheticConfig {
            num_frames: 16,
            ..Default::default()
        };
        for r in generate_synthetic_corpus(20, 1, &cfg).unwrap() {
            let scene = r.synthetic.unwrap();
            for s in &scene.shapes {
                for t in 0..scene.num_frames {
                    let (x, y) = s.position(t);
                    assert!(x >= 0 && y >= 0 && x + s.size <= 32 && y + s.size <= 32);
                }
            }
        }
    }
}
