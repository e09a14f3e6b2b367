//! Binary masks, mask tracks and the run-length codec shared by every
//! component that reads or writes masks.
//!
//! Encoding is row-major with alternating run lengths, always starting with a
//! run of zeros (which may be empty).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "mask data has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Filled rectangle `[x0, x1) x [y0, y1)`, clipped to the frame.
    pub fn filled_box(width: usize, height: usize, bbox: BBox) -> Self {
        Self::from_fn(width, height, |x, y| bbox.contains(x as f64, y as f64))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection_area(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union_area(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Tight bounding box (half-open), or `None` for an empty mask.
    pub fn bounds(&self) -> Option<BBox> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in &self.data {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            width: self.width,
            height: self.height,
            counts,
        }
    }
}

/// Axis-aligned box in pixel units, half-open on the right and bottom edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Pixel `(x, y)` belongs to the box when its top-left corner does.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Box grown by `fraction` of its width/height on every side.
    pub fn dilate(&self, fraction: f64) -> Self {
        let dx = (self.x1 - self.x0) * fraction;
        let dy = (self.y1 - self.y0) * fraction;
        Self::new(self.x0 - dx, self.y0 - dy, self.x1 + dx, self.y1 + dy)
    }
}

/// Serialized form of a [`BinaryMask`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::Input(format!(
                "run lengths sum to {total}, expected {}",
                self.width * self.height
            )));
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        let mut value = false;
        for &c in &self.counts {
            data.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        BinaryMask::from_vec(self.width, self.height, data)
    }
}

/// One binary mask per video frame for a single object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTrack {
    pub masks: Vec<BinaryMask>,
    pub object_id: Option<String>,
}

impl MaskTrack {
    pub fn new(masks: Vec<BinaryMask>, object_id: Option<String>) -> Result<Self> {
        if let Some(first) = masks.first() {
            if masks.iter().any(|m| m.dims() != first.dims()) {
                return Err(Error::Input(
                    "mask track frames differ in resolution".into(),
                ));
            }
        }
        Ok(Self { masks, object_id })
    }

    pub fn empty(frames: usize, width: usize, height: usize) -> Self {
        Self {
            masks: vec![BinaryMask::new(width, height); frames],
            object_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.masks.first().map(BinaryMask::dims)
    }

    pub fn to_rle(&self) -> Vec<Rle> {
        self.masks.iter().map(BinaryMask::to_rle).collect()
    }

    pub fn from_rle(rles: &[Rle], object_id: Option<String>) -> Result<Self> {
        let masks = rles.iter().map(Rle::decode).collect::<Result<Vec<_>>>()?;
        Self::new(masks, object_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::from_vec(2, 2, vec![true, true, false, true]).unwrap();
        assert_eq!(m.to_rle().counts, vec![0, 2, 1, 1]);
        let m = BinaryMask::from_vec(3, 1, vec![false, false, false]).unwrap();
        assert_eq!(m.to_rle().counts, vec![3]);
    }

    #[test]
    fn rle_rejects_wrong_total() {
        let rle = Rle {
            width: 2,
            height: 2,
            counts: vec![1, 1],
        };
        assert!(rle.decode().is_err());
    }

    #[test]
    fn six_by_six_square_has_36_pixels() {
        let m = BinaryMask::filled_box(16, 16, BBox::new(3.0, 5.0, 9.0, 11.0));
        assert_eq!(m.area(), 36);
        assert_eq!(m.to_rle().decode().unwrap(), m);
        assert_eq!(m.bounds(), Some(BBox::new(3.0, 5.0, 9.0, 11.0)));
    }

    #[test]
    fn track_rejects_mixed_resolution() {
        let r = MaskTrack::new(vec![BinaryMask::new(2, 2), BinaryMask::new(3, 2)], None);
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trips(w in 1usize..12, h in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = BinaryMask::from_vec(w, h, bits[..w * h].to_vec()).unwrap();
            let rle = m.to_rle();
            prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), w * h);
            prop_assert_eq!(rle.decode().unwrap(), m);
        }
    }
}
