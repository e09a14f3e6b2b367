//! Frozen patch encoder standing in for a pretrained vision backbone.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};
use crate::stc_aggregator::VideoFeatures;

/// Splits a frame into `patch × patch` tiles and maps each flattened RGB tile
/// (values in `[0, 1]`) through a fixed random linear map to `d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub weight: Mat,
    pub bias: Mat,
}

impl ToyEncoder {
    pub fn new(width: usize, height: usize, patch: usize, d_v: usize, seed: u64) -> Result<Self> {
        if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
            return Err(Error::Config(format!("{width}x{height} frames are not divisible into {patch}px patches")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = patch * patch * 3;
        Ok(Self {
            width,
            height,
            patch,
            weight: normal(&mut rng, input, d_v, 1.0 / (input as f64).sqrt()),
            bias: normal(&mut rng, 1, d_v, 0.1),
        })
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Stores the weights as frozen `encoder.*` entries.
    pub fn to_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("encoder.weight", self.weight.clone(), false);
        p.insert("encoder.bias", self.bias.clone(), false);
        p
    }

    pub fn from_params(params: &ParamStore, width: usize, height: usize, patch: usize) -> Result<Self> {
        let get = |n: &str| {
            params
                .get(n)
                .map(|p| p.value.clone())
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{n}`")))
        };
        let weight = get("encoder.weight")?;
        if weight.nrows() != patch * patch * 3 {
            return Err(Error::Data("encoder weight does not match the patch size".into()));
        }
        Ok(Self {
            width,
            height,
            patch,
            weight,
            bias: get("encoder.bias")?,
        })
    }

    /// `[P, d_v]` features, patches in row-major grid order.
    pub fn encode_frame(&self, img: &RgbImage) -> Result<Mat> {
        if (img.width() as usize, img.height() as usize) != (self.width, self.height) {
            return Err(Error::Data(format!(
                "frame is {}x{}, encoder expects {}x{}",
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        let (rows, cols) = self.grid();
        let p = self.patch;
        let mut tiles = Mat::zeros((rows * cols, p * p * 3));
        for r in 0..rows {
            for c in 0..cols {
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        let px = img.get_pixel((c * p + x) as u32, (r * p + y) as u32);
                        for ch in 0..3 {
                            tiles[[r * cols + c, k]] = px[ch] as f64 / 255.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(tiles.dot(&self.weight) + &self.bias)
    }

    pub fn encode(&self, frames: &[RgbImage]) -> Result<VideoFeatures> {
        VideoFeatures::from_frames(frames.iter().map(|f| self.encode_frame(f)).collect::<Result<_>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn deterministic_and_patch_local() {
        let e = ToyEncoder::new(8, 8, 4, 6, 1).unwrap();
        assert_eq!(e, ToyEncoder::new(8, 8, 4, 6, 1).unwrap());
        let mut img = RgbImage::from_pixel(8, 8, Rgb([0, 0, 0]));
        let a = e.encode_frame(&img).unwrap();
        img.put_pixel(7, 7, Rgb([255, 255, 255]));
        let b = e.encode_frame(&img).unwrap();
        assert_eq!(a.dim(), (4, 6));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn rejects_wrong_frame_size() {
        let e = ToyEncoder::new(8, 8, 4, 6, 1).unwrap();
        assert!(e.encode_frame(&RgbImage::new(4, 4)).is_err());
        assert!(ToyEncoder::new(9, 8, 4, 6, 1).is_err());
    }
}
