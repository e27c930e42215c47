use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{RasterImage, WORLD_SIZE};
use super::{Attribute, Position, Texture, World, WorldError};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Simple,
    Complex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
    Bar,
}

impl Shape {
    fn extent(self) -> (i32, i32) {
        match self {
            Shape::Bar => (6, 10),
            _ => (10, 10),
        }
    }

    fn covers(self, u: i32, v: i32, w: i32, h: i32) -> bool {
        let cx = u as f64 + 0.5 - w as f64 / 2.0;
        let cy = v as f64 + 0.5 - h as f64 / 2.0;
        let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
        match self {
            Shape::Square | Shape::Bar => true,
            Shape::Disc => (cx / rx).powi(2) + (cy / ry).powi(2) <= 1.0,
            Shape::Triangle => cx.abs() <= (v + 1) as f64 / h as f64 * rx,
            Shape::Diamond => cx.abs() / rx + cy.abs() / ry <= 1.0,
        }
    }
}

/// Half-open pixel rectangle `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PixelBox {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x1: 0,
            y1: 0,
            x2: width,
            y2: height,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Grows the box by `margin` on every side, clamped to the image.
    pub fn expanded(&self, margin: usize, width: usize, height: usize) -> Self {
        Self {
            x1: self.x1.saturating_sub(margin),
            y1: self.y1.saturating_sub(margin),
            x2: (self.x2 + margin).min(width),
            y2: (self.y2 + margin).min(height),
        }
    }
}

pub(crate) const STRIPE_DARKEN: f64 = 0.55;

fn darken(rgb: [u8; 3]) -> [u8; 3] {
    rgb.map(|c| (c as f64 * STRIPE_DARKEN).round() as u8)
}

/// Renders `subject` with `attribute` applied. Deterministic in all arguments;
/// `Complex` only adds clutter outside the returned subject box.
pub fn render_scene(
    world: &World,
    subject: &str,
    attribute: Attribute,
    complexity: Complexity,
    nuisance_seed: u64,
) -> Result<(RasterImage, PixelBox), WorldError> {
    let spec = world.subject(subject)?;
    let mut rng = stream_rng(nuisance_seed, 0);
    let shade: u8 = rng.gen_range(170..=215);
    let jx: i32 = rng.gen_range(-2..=2);
    let jy: i32 = rng.gen_range(-2..=2);

    let (color, position, texture) = match attribute {
        Attribute::Color(c) => (c.rgb(), Position::Middle, Texture::Plain),
        Attribute::Position(p) => (spec.base_color.rgb(), p, Texture::Plain),
        Attribute::Texture(t) => (spec.base_color.rgb(), Position::Middle, t),
    };

    let size = WORLD_SIZE as i32;
    let mut img = RasterImage::filled(WORLD_SIZE, WORLD_SIZE, [shade; 3]);
    let (w, h) = spec.shape.extent();
    let cx = size / 2 + jx;
    let cy = position.center_y() + jy;
    let (x0, y0) = (cx - w / 2, cy - h / 2);
    let (mut bx1, mut by1, mut bx2, mut by2) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for v in 0..h {
        for u in 0..w {
            if !spec.shape.covers(u, v, w, h) {
                continue;
            }
            let (x, y) = (x0 + u, y0 + v);
            if x < 0 || y < 0 || x >= size || y >= size {
                continue;
            }
            let rgb = if texture == Texture::Striped && v % 2 == 1 {
                darken(color)
            } else {
                color
            };
            let (x, y) = (x as usize, y as usize);
            img.set_pixel(x, y, rgb);
            bx1 = bx1.min(x);
            by1 = by1.min(y);
            bx2 = bx2.max(x + 1);
            by2 = by2.max(y + 1);
        }
    }
    let subject_box = PixelBox {
        x1: bx1,
        y1: by1,
        x2: bx2,
        y2: by2,
    };

    if complexity == Complexity::Complex {
        let mut clutter = stream_rng(nuisance_seed, 1);
        let n = clutter.gen_range(4..=6);
        for _ in 0..n {
            let (rw, rh) = (clutter.gen_range(3..=8), clutter.gen_range(3..=8));
            let (rx, ry) = (
                clutter.gen_range(0..=WORLD_SIZE - rw),
                clutter.gen_range(0..=WORLD_SIZE - rh),
            );
            let gray: i32 = clutter.gen_range(60..=240);
            let tint: [i32; 3] = [
                clutter.gen_range(-20..=20),
                clutter.gen_range(-20..=20),
                clutter.gen_range(-20..=20),
            ];
            let rgb = tint.map(|t| (gray + t).clamp(0, 255) as u8);
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    if !subject_box.contains(x, y) {
                        img.set_pixel(x, y, rgb);
                    }
                }
            }
        }
    }
    Ok((img, subject_box))
}
