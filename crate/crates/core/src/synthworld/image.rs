use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorldError;

/// Default world resolution.
pub const WORLD_SIZE: usize = 32;

/// 8-bit RGB raster, row-major `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, WorldError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| WorldError::Image(e.to_string()))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| WorldError::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, WorldError> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| WorldError::Image(e.to_string()))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(WorldError::Image("expected 8-bit RGB png".into()));
        }
        let (width, height) = (info.width as usize, info.height as usize);
        let mut data = vec![0u8; width * height * 3];
        reader
            .next_frame(&mut data)
            .map_err(|e| WorldError::Image(e.to_string()))?;
        Ok(Self { height, width, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| WorldError::Io(path.display().to_string(), e))
    }

    pub fn load_png(path: &Path) -> Result<Self, WorldError> {
        let bytes = std::fs::read(path).map_err(|e| WorldError::Io(path.display().to_string(), e))?;
        Self::from_png_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let mut img = RasterImage::filled(4, 5, [1, 2, 3]);
        img.set_pixel(3, 2, [250, 0, 17]);
        let back = RasterImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(img, back);
    }
}
