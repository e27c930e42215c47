use serde::{Deserialize, Serialize};

use super::OftError;
use crate::synthworld::PixelBox;

/// Pixel rectangle `[x1, x2) × [y1, y2)` with fractional bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl SubjectBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }
}

impl From<PixelBox> for SubjectBox {
    fn from(b: PixelBox) -> Self {
        Self::new(b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64)
    }
}

/// Half-open latent cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentRect {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

/// Grows width and height by `fraction` in total (half per side), clamped to the image.
pub fn pad_box(b: SubjectBox, fraction: f64, height: usize, width: usize) -> Result<SubjectBox, OftError> {
    if !(fraction >= 0.0) {
        return Err(OftError::Mask(format!("padding fraction {fraction} must be ≥ 0")));
    }
    let dx = (b.x2 - b.x1) * fraction / 2.0;
    let dy = (b.y2 - b.y1) * fraction / 2.0;
    Ok(SubjectBox {
        x1: (b.x1 - dx).max(0.0),
        y1: (b.y1 - dy).max(0.0),
        x2: (b.x2 + dx).min(width as f64),
        y2: (b.y2 + dy).min(height as f64),
    })
}

/// Proportional pixel → latent mapping, rounded outward; an empty result grows to one cell.
pub fn box_to_latent(
    b: SubjectBox,
    height: usize,
    width: usize,
    latent_height: usize,
    latent_width: usize,
) -> Result<LatentRect, OftError> {
    let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width as f64 && b.y2 <= height as f64;
    if !inside || !(b.x1 <= b.x2 && b.y1 <= b.y2) {
        return Err(OftError::Mask(format!("box {b:?} outside {width}×{height} image")));
    }
    let sx = latent_width as f64 / width as f64;
    let sy = latent_height as f64 / height as f64;
    let span = |lo: f64, hi: f64, s: f64, n: usize| {
        let mut a = ((lo * s).floor() as usize).min(n);
        let b = ((hi * s).ceil() as usize).min(n);
        if b > a {
            return (a, b);
        }
        if a == n {
            a = n - 1;
        }
        (a, a + 1)
    };
    let (x1, x2) = span(b.x1, b.x2, sx, latent_width);
    let (y1, y2) = span(b.y1, b.y2, sy, latent_height);
    Ok(LatentRect { x1, y1, x2, y2 })
}

/// Binary latent-cell mask, broadcast over channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
    pub source: Option<SubjectBox>,
    pub padding: f64,
}

impl LatentMask {
    pub fn all_ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
            source: None,
            padding: 0.0,
        }
    }

    pub fn from_rect(height: usize, width: usize, r: LatentRect) -> Self {
        let mut cells = vec![false; height * width];
        for y in r.y1..r.y2 {
            for x in r.x1..r.x2 {
                cells[y * width + x] = true;
            }
        }
        Self {
            height,
            width,
            cells,
            source: None,
            padding: 0.0,
        }
    }

    /// Pads `b` in pixel space, then maps it onto the latent grid.
    pub fn from_box(
        b: SubjectBox,
        padding: f64,
        image_hw: (usize, usize),
        latent_hw: (usize, usize),
    ) -> Result<Self, OftError> {
        let padded = pad_box(b, padding, image_hw.0, image_hw.1)?;
        let rect = box_to_latent(padded, image_hw.0, image_hw.1, latent_hw.0, latent_hw.1)?;
        let mut m = Self::from_rect(latent_hw.0, latent_hw.1, rect);
        m.source = Some(b);
        m.padding = padding;
        Ok(m)
    }

    pub fn active(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_mapping() {
        let r = box_to_latent(SubjectBox::new(8.0, 8.0, 24.0, 24.0), 32, 32, 8, 8).unwrap();
        assert_eq!(r, LatentRect { x1: 2, y1: 2, x2: 6, y2: 6 });
        let r = box_to_latent(SubjectBox::full(32, 32), 32, 32, 8, 8).unwrap();
        assert_eq!(r, LatentRect { x1: 0, y1: 0, x2: 8, y2: 8 });
        let r = box_to_latent(SubjectBox::new(1.0, 1.0, 3.0, 3.0), 32, 32, 8, 8).unwrap();
        assert_eq!(r, LatentRect { x1: 0, y1: 0, x2: 1, y2: 1 });
    }

    #[test]
    fn degenerate_box_becomes_one_cell() {
        let r = box_to_latent(SubjectBox::new(12.0, 32.0, 12.0, 32.0), 32, 32, 8, 8).unwrap();
        assert_eq!(r, LatentRect { x1: 3, y1: 7, x2: 4, y2: 8 });
        assert!(box_to_latent(SubjectBox::new(0.0, 0.0, 40.0, 4.0), 32, 32, 8, 8).is_err());
    }

    #[test]
    fn padding_rule() {
        let b = SubjectBox::new(10.0, 10.0, 20.0, 20.0);
        assert_eq!(pad_box(b, 0.0, 32, 32).unwrap(), b);
        assert_eq!(pad_box(b, 0.10, 32, 32).unwrap(), SubjectBox::new(9.5, 9.5, 20.5, 20.5));
        let edge = pad_box(SubjectBox::new(0.0, 4.0, 10.0, 32.0), 0.5, 32, 32).unwrap();
        assert_eq!(edge, SubjectBox::new(0.0, 0.0, 12.5, 32.0));
        assert!(pad_box(b, -0.1, 32, 32).is_err());
    }

    #[test]
    fn mask_from_box_pads_then_maps() {
        // 10% padding moves both edges of (8, 16) across a cell boundary: 2×2 cells become 4×4.
        let b = SubjectBox::new(8.0, 8.0, 16.0, 16.0);
        assert_eq!(LatentMask::from_box(b, 0.0, (32, 32), (8, 8)).unwrap().active(), 4);
        let m = LatentMask::from_box(b, 0.1, (32, 32), (8, 8)).unwrap();
        assert_eq!(m.active(), 16);
        assert_eq!(m.source, Some(b));
        assert!(LatentMask::all_ones(8, 8).is_full());
    }
}
