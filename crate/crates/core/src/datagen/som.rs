//! Set-of-mark rendering: colored rectangles around tracked objects.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskTrack;

pub const MIN_CHANNEL_DISTANCE: u8 = 64;
pub const BORDER_WIDTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl PaletteColor {
    pub fn new(name: impl Into<String>, rgb: [u8; 3]) -> Self {
        Self {
            name: name.into(),
            rgb,
        }
    }
}

/// Largest per-channel difference.
pub fn channel_distance(a: [u8; 3], b: [u8; 3]) -> u8 {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0)
}

const BASE: [(&str, [u8; 3]); 20] = [
    ("red", [255, 0, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("green", [0, 128, 0]),
    ("magenta", [255, 0, 255]),
    ("cyan", [0, 255, 255]),
    ("orange", [255, 128, 0]),
    ("purple", [128, 0, 255]),
    ("lime", [0, 255, 0]),
    ("maroon", [128, 0, 0]),
    ("navy", [0, 0, 128]),
    ("olive", [128, 128, 0]),
    ("teal", [0, 128, 128]),
    ("violet", [128, 0, 128]),
    ("salmon", [255, 128, 128]),
    ("mint", [128, 255, 128]),
    ("lavender", [128, 128, 255]),
    ("pink", [255, 128, 255]),
    ("azure", [0, 128, 255]),
    ("rose", [255, 0, 128]),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette {
    pub colors: Vec<PaletteColor>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: BASE.iter().map(|(n, c)| PaletteColor::new(*n, *c)).collect(),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    [c(r), c(g), c(b)]
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const RINGS: [(f64, f64); 4] = [(1.0, 1.0), (1.0, 0.5), (0.5, 1.0), (0.5, 0.75)];
const MAX_CANDIDATES: usize = 20_000;

impl Palette {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.check()?;
        Ok(p)
    }

    /// Verifies names are unique and colors pairwise separated.
    pub fn check(&self) -> Result<()> {
        for (i, a) in self.colors.iter().enumerate() {
            for b in &self.colors[i + 1..] {
                if a.name == b.name {
                    return Err(Error::Config(format!("duplicate palette color `{}`", a.name)));
                }
                if channel_distance(a.rgb, b.rgb) < MIN_CHANNEL_DISTANCE {
                    return Err(Error::Config(format!(
                        "palette colors `{}` and `{}` are closer than {MIN_CHANNEL_DISTANCE}",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// The first `n` colors, extending by golden-ratio hue steps when the
    /// palette is too small. Candidates too close to a chosen color, or to
    /// `avoid`, are skipped.
    pub fn take(&self, n: usize, avoid: &[[u8; 3]]) -> Result<Vec<PaletteColor>> {
        let far = |rgb: [u8; 3], chosen: &[PaletteColor]| {
            chosen.iter().all(|c| channel_distance(c.rgb, rgb) >= MIN_CHANNEL_DISTANCE)
                && avoid.iter().all(|&a| channel_distance(a, rgb) >= MIN_CHANNEL_DISTANCE)
        };
        let mut out: Vec<PaletteColor> = Vec::with_capacity(n);
        for c in &self.colors {
            if out.len() == n {
                return Ok(out);
            }
            if far(c.rgb, &out) {
                out.push(c.clone());
            }
        }
        let mut k = 0;
        while out.len() < n {
            if k >= MAX_CANDIDATES {
                return Err(Error::Config(format!(
                    "cannot find {n} colors separated by {MIN_CHANNEL_DISTANCE}"
                )));
            }
            let hue = (k as f64 * GOLDEN).fract();
            let (s, v) = RINGS[(k / 64) % RINGS.len()];
            let rgb = hsv_to_rgb(hue, s, v);
            if far(rgb, &out) {
                out.push(PaletteColor::new(format!("hue{:03}", (hue * 360.0).round() as u32 % 360), rgb));
            }
            k += 1;
        }
        Ok(out)
    }
}

/// Color assigned to one object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorAssignment {
    pub object_id: String,
    pub color: PaletteColor,
}

/// Draws a `BORDER_WIDTH` rectangle along the inside of the mask's tight
/// bounds on each frame; frames where the mask is empty are left untouched.
pub fn draw_boxes(frames: &mut [RgbImage], track: &MaskTrack, rgb: [u8; 3]) -> Result<()> {
    if track.len() != frames.len() {
        return Err(Error::Input(format!(
            "{} frames but a {}-frame mask track",
            frames.len(),
            track.len()
        )));
    }
    for (img, mask) in frames.iter_mut().zip(&track.masks) {
        if (img.width() as usize, img.height() as usize) != mask.dims() {
            return Err(Error::Input("frame and mask resolutions differ".into()));
        }
        let Some(b) = mask.bounds() else { continue };
        let (x0, y0, x1, y1) = (b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize);
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = (x - x0).min(x1 - 1 - x).min(y - y0).min(y1 - 1 - y);
                if edge < BORDER_WIDTH {
                    img.put_pixel(x as u32, y as u32, Rgb(rgb));
                }
            }
        }
    }
    Ok(())
}

/// Marks every object on copies of `frames`, one palette color per object.
pub fn render_som_frames(
    frames: &[RgbImage],
    tracks: &[MaskTrack],
    object_ids: &[String],
    palette: &Palette,
) -> Result<(Vec<RgbImage>, Vec<ColorAssignment>)> {
    if tracks.len() != object_ids.len() {
        return Err(Error::Input("one object id per track required".into()));
    }
    let colors = palette.take(tracks.len(), &[])?;
    let mut out = frames.to_vec();
    let mut map = Vec::with_capacity(tracks.len());
    for ((track, id), color) in tracks.iter().zip(object_ids).zip(colors) {
        draw_boxes(&mut out, track, color.rgb)?;
        map.push(ColorAssignment {
            object_id: id.clone(),
            color,
        });
    }
    Ok((out, map))
}
