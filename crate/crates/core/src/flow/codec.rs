use serde::{Deserialize, Serialize};

use super::FlowError;
use crate::synthworld::RasterImage;

/// Space-to-depth factor of the pixel ↔ latent codec.
pub const CODEC_FACTOR: usize = 4;

/// Latent grid stored cell-major: index `(y·width + x)·channels + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "latent data length");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn check_same(&self, other: &LatentGrid) -> Result<(), FlowError> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(FlowError::Shape(format!(
                "{}×{}×{} vs {}×{}×{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> LatentGrid {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        LatentGrid::new(self.height, self.width, self.channels, data)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Space-to-depth with intensities mapped to `[-1, 1]`. Channel order within a
/// cell is `(dy, dx, rgb)`.
pub fn encode_latent(img: &RasterImage) -> Result<LatentGrid, FlowError> {
    let f = CODEC_FACTOR;
    if img.height % f != 0 || img.width % f != 0 {
        return Err(FlowError::Indivisible(img.height, img.width, f));
    }
    let (hl, wl, c) = (img.height / f, img.width / f, 3 * f * f);
    let mut data = vec![0.0; hl * wl * c];
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let cell = (y / f) * wl + x / f;
            let base = cell * c + ((y % f) * f + x % f) * 3;
            for k in 0..3 {
                data[base + k] = p[k] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(LatentGrid::new(hl, wl, c, data))
}

/// Inverse of [`encode_latent`]; values are rounded and clamped to 8 bits.
pub fn decode_latent(z: &LatentGrid) -> Result<RasterImage, FlowError> {
    let f = CODEC_FACTOR;
    if z.channels != 3 * f * f {
        return Err(FlowError::Shape(format!("{} channels, expected {}", z.channels, 3 * f * f)));
    }
    let (h, w) = (z.height * f, z.width * f);
    let mut img = RasterImage::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let base = ((y / f) * z.width + x / f) * z.channels + ((y % f) * f + x % f) * 3;
            let px: [u8; 3] =
                std::array::from_fn(|k| ((z.data[base + k] + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8);
            img.set_pixel(x, y, px);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut img = RasterImage::filled(32, 32, [0, 0, 0]);
            img.data.iter_mut().for_each(|v| *v = rng.gen());
            let z = encode_latent(&img).unwrap();
            assert_eq!((z.height, z.width, z.channels), (8, 8, 48));
            assert_eq!(decode_latent(&z).unwrap(), img);
        }
    }

    #[test]
    fn codec_is_spatially_local() {
        let img = RasterImage::filled(32, 32, [10, 20, 30]);
        let mut edited = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                edited.set_pixel(x, y, [200, 100, 0]);
            }
        }
        let (a, b) = (encode_latent(&img).unwrap(), encode_latent(&edited).unwrap());
        for cell in 0..64 {
            let same = a.data[cell * 48..(cell + 1) * 48] == b.data[cell * 48..(cell + 1) * 48];
            assert_eq!(same, cell != 0, "cell {cell}");
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let img = RasterImage::filled(30, 32, [0, 0, 0]);
        assert!(matches!(encode_latent(&img), Err(FlowError::Indivisible(30, 32, 4))));
    }
}
