//! Source annotations and their adapters: a mask-track directory with a JSON
//! index, and a box-track CSV over frame directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask, MaskTrack, Rle};

pub const BOX_MARGIN: f64 = 0.1;
pub const DEFAULT_BOX_INTERVAL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    MaskIndex,
    BoxCsv,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectTrack {
    Masks(MaskTrack),
    /// One optional box per frame; `None` where the object is absent.
    Boxes(Vec<Option<BBox>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceObject {
    pub object_id: String,
    pub category: Option<String>,
    pub expression: Option<String>,
    pub track: ObjectTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceAnnotation {
    /// Dataset name used in the corpus ledger.
    pub source: String,
    pub kind: SourceKind,
    pub video_id: String,
    /// Frame files relative to `root`, in temporal order.
    pub frames: Vec<String>,
    pub root: PathBuf,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SourceObject>,
}

impl SourceAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Data(format!("video `{}` has no objects", self.video_id)));
        }
        for o in &self.objects {
            let n = match &o.track {
                ObjectTrack::Masks(t) => {
                    if !t.is_empty() && t.dims() != Some((self.width, self.height)) {
                        return Err(Error::Data(format!(
                            "object `{}` of `{}` has masks of the wrong size",
                            o.object_id, self.video_id
                        )));
                    }
                    t.len()
                }
                ObjectTrack::Boxes(b) => b.len(),
            };
            if n != self.frames.len() {
                return Err(Error::Data(format!(
                    "object `{}` of `{}` covers {n} of {} frames",
                    o.object_id,
                    self.video_id,
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load_frame(&self, index: usize) -> Result<RgbImage> {
        let path = self.root.join(&self.frames[index]);
        let img = image::open(&path)
            .map_err(|e| Error::Input(format!("cannot read frame {}: {e}", path.display())))?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize) != (self.width, self.height) {
            return Err(Error::Data(format!("frame {} has unexpected size", path.display())));
        }
        Ok(img)
    }

    pub fn has_boxes(&self) -> bool {
        self.objects.iter().any(|o| matches!(o.track, ObjectTrack::Boxes(_)))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    source: String,
    videos: Vec<IndexVideo>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexVideo {
    video_id: String,
    frames: Vec<String>,
    objects: Vec<IndexObject>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexObject {
    object_id: String,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    expression: Option<String>,
    /// JSON array of run-length masks, one per frame.
    masks: String,
}

/// Reads `index.json`-style mask-track sources. Paths inside are relative
/// to the index file's directory.
pub fn load_mask_index(path: &Path) -> Result<Vec<SourceAnnotation>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let index: IndexFile = serde_json::from_str(&text)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    index
        .videos
        .into_iter()
        .map(|v| {
            let objects = v
                .objects
                .into_iter()
                .map(|o| {
                    let rles: Vec<Rle> = serde_json::from_str(&std::fs::read_to_string(root.join(&o.masks))?)?;
                    Ok(SourceObject {
                        track: ObjectTrack::Masks(MaskTrack::from_rle(&rles, Some(o.object_id.clone()))?),
                        object_id: o.object_id,
                        category: o.category,
                        expression: o.expression,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (width, height) = objects
                .iter()
                .find_map(|o| match &o.track {
                    ObjectTrack::Masks(t) => t.dims(),
                    ObjectTrack::Boxes(_) => None,
                })
                .ok_or_else(|| Error::Data(format!("video `{}` has no masks", v.video_id)))?;
            let s = SourceAnnotation {
                source: index.source.clone(),
                kind: SourceKind::MaskIndex,
                video_id: v.video_id,
                frames: v.frames,
                root: root.clone(),
                width,
                height,
                objects,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

#[derive(Deserialize)]
struct BoxRow {
    video_id: String,
    frame: usize,
    object_id: String,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    #[serde(default)]
    category: Option<String>,
}

fn list_frames(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("cannot list frames in {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Reads a box-track CSV (`video_id,frame,object_id,x0,y0,x1,y1,category`).
/// Frames of video `v` are the PNG files in `frames_root/v`, sorted by name;
/// `frame` indexes into that list.
pub fn load_box_csv(path: &Path, frames_root: &Path, source: &str) -> Result<Vec<SourceAnnotation>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut videos: BTreeMap<String, BTreeMap<String, (Option<String>, Vec<(usize, BBox)>)>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<BoxRow>().enumerate() {
        let row = row.map_err(|e| Error::Line {
            line: i + 2,
            message: e.to_string(),
        })?;
        let b = BBox::new(row.x0, row.y0, row.x1, row.y1);
        if !b.is_well_ordered() {
            return Err(Error::Line {
                line: i + 2,
                message: "box corners are not ordered".into(),
            });
        }
        let entry = videos
            .entry(row.video_id)
            .or_default()
            .entry(row.object_id)
            .or_insert_with(|| (None, Vec::new()));
        if entry.0.is_none() {
            entry.0 = row.category;
        }
        entry.1.push((row.frame, b));
    }
    videos
        .into_iter()
        .map(|(video_id, objects)| {
            let dir = frames_root.join(&video_id);
            let frames: Vec<String> = list_frames(&dir)?
                .into_iter()
                .map(|n| format!("{video_id}/{n}"))
                .collect();
            if frames.is_empty() {
                return Err(Error::Input(format!("no frames in {}", dir.display())));
            }
            let first = image::open(frames_root.join(&frames[0]))
                .map_err(|e| Error::Input(format!("cannot read {}: {e}", frames[0])))?;
            let objects = objects
                .into_iter()
                .map(|(object_id, (category, boxes))| {
                    let mut track = vec![None; frames.len()];
                    for (f, b) in boxes {
                        *track.get_mut(f).ok_or_else(|| {
                            Error::Data(format!("box on frame {f} of `{video_id}` beyond its {} frames", frames.len()))
                        })? = Some(b);
                    }
                    Ok(SourceObject {
                        object_id,
                        category,
                        expression: None,
                        track: ObjectTrack::Boxes(track),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SourceAnnotation {
                source: source.to_string(),
                kind: SourceKind::BoxCsv,
                video_id,
                frames,
                root: frames_root.to_path_buf(),
                width: first.width() as usize,
                height: first.height() as usize,
                objects,
            })
        })
        .collect()
}

/// Promptable segmentation from a box.
pub trait Segmenter: Sync {
    fn segment(&self, frame: &RgbImage, bbox: BBox) -> Result<BinaryMask>;
}

/// Fills the box.
#[derive(Clone, Copy, Debug, Default)]
pub struct FilledBoxSegmenter;

impl Segmenter for FilledBoxSegmenter {
    fn segment(&self, frame: &RgbImage, bbox: BBox) -> Result<BinaryMask> {
        Ok(BinaryMask::filled_box(frame.width() as usize, frame.height() as usize, bbox))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMaskIssue {
    /// The segmenter failed; the filled box was used.
    Fallback,
    /// Pixels outside the dilated box were removed.
    Clipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoMaskFlag {
    pub video_id: String,
    pub object_id: String,
    /// Index into the sampled frames.
    pub frame: usize,
    pub issue: PseudoMaskIssue,
}

/// Converts box tracks to masks on every `interval`-th frame; the result
/// keeps only those frames. Masks are clipped to the box grown by 10%.
pub fn boxes_to_pseudomasks(
    source: &SourceAnnotation,
    segmenter: &dyn Segmenter,
    interval: usize,
) -> Result<(SourceAnnotation, Vec<PseudoMaskFlag>)> {
    if interval == 0 {
        return Err(Error::Config("box sampling interval must be >= 1".into()));
    }
    if !source.has_boxes() {
        return Err(Error::Input(format!("video `{}` has no box tracks", source.video_id)));
    }
    let sampled: Vec<usize> = (0..source.frames.len()).step_by(interval).collect();
    let (w, h) = (source.width, source.height);
    let mut images: BTreeMap<usize, RgbImage> = BTreeMap::new();
    let mut flags = Vec::new();
    let mut objects = Vec::with_capacity(source.objects.len());
    for o in &source.objects {
        let track = match &o.track {
            ObjectTrack::Masks(t) => MaskTrack::new(
                sampled.iter().map(|&f| t.masks[f].clone()).collect(),
                Some(o.object_id.clone()),
            )?,
            ObjectTrack::Boxes(boxes) => {
                let mut masks = Vec::with_capacity(sampled.len());
                for (k, &f) in sampled.iter().enumerate() {
                    let Some(b) = boxes[f] else {
                        masks.push(BinaryMask::new(w, h));
                        continue;
                    };
                    if let std::collections::btree_map::Entry::Vacant(e) = images.entry(f) {
                        e.insert(source.load_frame(f)?);
                    }
                    let flag = |issue| PseudoMaskFlag {
                        video_id: source.video_id.clone(),
                        object_id: o.object_id.clone(),
                        frame: k,
                        issue,
                    };
                    let m = match segmenter.segment(&images[&f], b) {
                        Ok(m) if m.dims() == (w, h) => m,
                        Ok(_) | Err(_) => {
                            warn!("segmenter failed on `{}` frame {f}; using the box", source.video_id);
                            flags.push(flag(PseudoMaskIssue::Fallback));
                            masks.push(BinaryMask::filled_box(w, h, b));
                            continue;
                        }
                    };
                    let margin = b.dilate(BOX_MARGIN);
                    let clipped = BinaryMask::from_fn(w, h, |x, y| m.get(x, y) && margin.contains(x as f64, y as f64));
                    if clipped.area() != m.area() {
                        flags.push(flag(PseudoMaskIssue::Clipped));
                    }
                    masks.push(clipped);
                }
                MaskTrack::new(masks, Some(o.object_id.clone()))?
            }
        };
        objects.push(SourceObject {
            object_id: o.object_id.clone(),
            category: o.category.clone(),
            expression: o.expression.clone(),
            track: ObjectTrack::Masks(track),
        });
    }
    Ok((
        SourceAnnotation {
            frames: sampled.iter().map(|&f| source.frames[f].clone()).collect(),
            objects,
            ..source.clone()
        },
        flags,
    ))
}

/// Drops single-object videos of the listed kinds.
pub fn filter_sources(sources: Vec<SourceAnnotation>, kinds: &[SourceKind]) -> Vec<SourceAnnotation> {
    sources
        .into_iter()
        .filter(|s| {
            let keep = s.objects.len() >= 2 || !kinds.contains(&s.kind);
            if !keep {
                warn!("dropping single-object video `{}`", s.video_id);
            }
            keep
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn box_source(frames: usize, objects: usize) -> (tempfile::TempDir, SourceAnnotation) {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        let names: Vec<String> = (0..frames)
            .map(|i| {
                let n = format!("{i:03}.png");
                img.save(dir.path().join(&n)).unwrap();
                n
            })
            .collect();
        let s = SourceAnnotation {
            source: "boxes".into(),
            kind: SourceKind::BoxCsv,
            video_id: "v".into(),
            frames: names,
            root: dir.path().to_path_buf(),
            width: 20,
            height: 20,
            objects: (0..objects)
                .map(|k| SourceObject {
                    object_id: k.to_string(),
                    category: None,
                    expression: None,
                    track: ObjectTrack::Boxes(vec![Some(BBox::new(0.0, 0.0, 4.0, 4.0)); frames]),
                })
                .collect(),
        };
        (dir, s)
    }

    #[test]
    fn fallback_fills_box() {
        let (_d, s) = box_source(1, 1);
        let (out, flags) = boxes_to_pseudomasks(&s, &FilledBoxSegmenter, 1).unwrap();
        let ObjectTrack::Masks(t) = &out.objects[0].track else { panic!() };
        assert_eq!(t.masks[0].area(), 16);
        assert!(flags.is_empty());
    }

    struct Oversized;
    impl Segmenter for Oversized {
        fn segment(&self, frame: &RgbImage, _: BBox) -> Result<BinaryMask> {
            Ok(BinaryMask::from_fn(frame.width() as usize, frame.height() as usize, |_, _| true))
        }
    }

    struct Failing;
    impl Segmenter for Failing {
        fn segment(&self, _: &RgbImage, _: BBox) -> Result<BinaryMask> {
            Err(Error::Input("no".into()))
        }
    }

    #[test]
    fn masks_outside_margin_are_clipped_and_flagged() {
        let (_d, s) = box_source(1, 1);
        let (out, flags) = boxes_to_pseudomasks(&s, &Oversized, 1).unwrap();
        let ObjectTrack::Masks(t) = &out.objects[0].track else { panic!() };
        // box (0,0,4,4) grown by 10% is (-0.4,-0.4,4.4,4.4): pixels 0..=4
        assert_eq!(t.masks[0].area(), 25);
        assert_eq!(flags[0].issue, PseudoMaskIssue::Clipped);
        let (_, flags) = boxes_to_pseudomasks(&s, &Failing, 1).unwrap();
        assert_eq!(flags[0].issue, PseudoMaskIssue::Fallback);
    }

    struct Counting(AtomicUsize);
    impl Segmenter for Counting {
        fn segment(&self, frame: &RgbImage, b: BBox) -> Result<BinaryMask> {
            self.0.fetch_add(1, Ordering::SeqCst);
            FilledBoxSegmenter.segment(frame, b)
        }
    }

    #[test]
    fn only_every_fourth_frame_is_segmented() {
        let (_d, s) = box_source(10, 2);
        let c = Counting(AtomicUsize::new(0));
        let (out, _) = boxes_to_pseudomasks(&s, &c, DEFAULT_BOX_INTERVAL).unwrap();
        assert_eq!(out.frames, vec!["000.png", "004.png", "008.png"]);
        assert_eq!(c.0.load(Ordering::SeqCst), 6);
        out.validate().unwrap();
    }

    #[test]
    fn filtering_drops_single_object_videos() {
        let (_d1, one) = box_source(1, 1);
        let (_d2, two) = box_source(1, 2);
        let kept = filter_sources(vec![one.clone(), two.clone()], &[SourceKind::BoxCsv]);
        assert_eq!(kept, vec![two]);
        assert_eq!(filter_sources(vec![one.clone()], &[SourceKind::MaskIndex]).len(), 1);
        assert!(filter_sources(vec![], &[SourceKind::BoxCsv]).is_empty());
    }

    #[test]
    fn box_csv_adapter_reads_tracks() {
        let (dir, _) = box_source(3, 0);
        let root = dir.path().parent().unwrap().to_path_buf();
        let vid = dir.path().file_name().unwrap().to_string_lossy().into_owned();
        let csv_path = dir.path().join("boxes.csv");
        std::fs::write(
            &csv_path,
            format!("video_id,frame,object_id,x0,y0,x1,y1,category\n{vid},0,a,1,1,5,5,dog\n{vid},2,a,2,2,6,6,dog\n{vid},1,b,0,0,3,3,\n"),
        )
        .unwrap();
        let s = load_box_csv(&csv_path, &root, "grounding").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].frames.len(), 3);
        assert_eq!(s[0].objects[0].category.as_deref(), Some("dog"));
        let ObjectTrack::Boxes(b) = &s[0].objects[0].track else { panic!() };
        assert!(b[0].is_some() && b[1].is_none() && b[2].is_some());
        s[0].validate().unwrap();
        std::fs::write(&csv_path, "video_id,frame,object_id,x0,y0,x1,y1,category\nx,0,a,5,5,1,1,\n").unwrap();
        assert!(matches!(load_box_csv(&csv_path, &root, "g"), Err(Error::Line { line: 2, .. })));
    }
}
