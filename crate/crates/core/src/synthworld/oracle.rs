use serde::{Deserialize, Serialize};

use super::image::RasterImage;
use super::render::{PixelBox, STRIPE_DARKEN};
use super::{Attribute, AttributeKind, ColorName, Position, SciTuple, Texture};

/// Minimum channel spread for a pixel to count as subject (backgrounds and clutter are near-gray).
pub const SATURATION_THRESHOLD: i32 = 60;
const MIN_SUBJECT_PIXELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ExplicitLike,
    SuperficialLike,
    Neither,
}

fn is_subject(p: [u8; 3]) -> bool {
    let mx = *p.iter().max().unwrap() as i32;
    let mn = *p.iter().min().unwrap() as i32;
    mx - mn >= SATURATION_THRESHOLD
}

fn subject_pixels(img: &RasterImage, region: &PixelBox) -> Vec<(usize, usize, [u8; 3])> {
    let mut out = Vec::new();
    for y in region.y1..region.y2.min(img.height) {
        for x in region.x1..region.x2.min(img.width) {
            let p = img.pixel(x, y);
            if is_subject(p) {
                out.push((x, y, p));
            }
        }
    }
    out
}

fn classify_color(mean: [f64; 3]) -> Option<ColorName> {
    let mut dists: Vec<(f64, ColorName)> = ColorName::ALL
        .iter()
        .map(|&c| {
            let rgb = c.rgb();
            let d = (0..3).map(|k| (mean[k] - rgb[k] as f64).powi(2)).sum::<f64>().sqrt();
            (d, c)
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (d1, best) = dists[0];
    let d2 = dists[1].0;
    (d1 <= 70.0 && d2 - d1 >= 10.0).then_some(best)
}

/// Measures the attribute of `kind` around `hint` (the expected subject box).
///
/// Colors and textures are read inside the hint box (with a small margin);
/// vertical position is read over the hint's column band at full height.
pub fn measure_attribute(img: &RasterImage, kind: AttributeKind, hint: &PixelBox) -> Option<Attribute> {
    match kind {
        AttributeKind::Color => {
            let px = subject_pixels(img, &hint.expanded(3, img.width, img.height));
            if px.len() < MIN_SUBJECT_PIXELS {
                return None;
            }
            let mut mean = [0.0; 3];
            for (_, _, p) in &px {
                for k in 0..3 {
                    mean[k] += p[k] as f64;
                }
            }
            let mean = mean.map(|m| m / px.len() as f64);
            classify_color(mean).map(Attribute::Color)
        }
        AttributeKind::Position => {
            let band = PixelBox {
                x1: hint.x1.saturating_sub(3),
                y1: 0,
                x2: (hint.x2 + 3).min(img.width),
                y2: img.height,
            };
            let px = subject_pixels(img, &band);
            if px.len() < MIN_SUBJECT_PIXELS {
                return None;
            }
            let mut ys: Vec<usize> = px.iter().map(|p| p.1).collect();
            ys.sort_unstable();
            let median = ys[ys.len() / 2] as f64;
            let pos = if median < 11.5 {
                Position::Top
            } else if median < 20.5 {
                Position::Middle
            } else {
                Position::Bottom
            };
            Some(Attribute::Position(pos))
        }
        AttributeKind::Texture => {
            let region = hint.expanded(2, img.width, img.height);
            let px = subject_pixels(img, &region);
            if px.len() < MIN_SUBJECT_PIXELS {
                return None;
            }
            let mut rows: Vec<f64> = Vec::new();
            for y in region.y1..region.y2 {
                let vals: Vec<f64> = px
                    .iter()
                    .filter(|p| p.1 == y)
                    .map(|p| p.2.iter().map(|&c| c as f64).sum::<f64>() / 3.0)
                    .collect();
                if vals.len() >= 3 {
                    rows.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            if rows.len() < 3 {
                return None;
            }
            let mean_brightness = rows.iter().sum::<f64>() / rows.len() as f64;
            let contrast = rows.windows(2).map(|w| (w[0] - w[1]).abs()).sum::<f64>() / (rows.len() - 1) as f64;
            // A full stripe pattern alternates at (1 - STRIPE_DARKEN) relative contrast.
            let rel = contrast / (mean_brightness * (1.0 - STRIPE_DARKEN)).max(1.0);
            if rel > 0.5 {
                Some(Attribute::Texture(Texture::Striped))
            } else if rel < 0.2 {
                Some(Attribute::Texture(Texture::Plain))
            } else {
                None
            }
        }
    }
}

/// Ground-truth verdict: does `image` show the tuple's explicit or superficial attribute?
pub fn oracle_verdict(tuple: &SciTuple, image: &RasterImage) -> Verdict {
    match measure_attribute(image, tuple.explicit_attribute.kind(), &tuple.subject_box) {
        Some(a) if a == tuple.explicit_attribute => Verdict::ExplicitLike,
        Some(a) if a == tuple.superficial_attribute => Verdict::SuperficialLike,
        _ => Verdict::Neither,
    }
}

/// Bounding box of subject-colored pixels, the world's stand-in for an object detector.
pub fn detect_subject_box(img: &RasterImage) -> Option<PixelBox> {
    let px = subject_pixels(img, &PixelBox::full(img.width, img.height));
    if px.len() < MIN_SUBJECT_PIXELS {
        return None;
    }
    let x1 = px.iter().map(|p| p.0).min()?;
    let y1 = px.iter().map(|p| p.1).min()?;
    let x2 = px.iter().map(|p| p.0).max()? + 1;
    let y2 = px.iter().map(|p| p.1).max()? + 1;
    Some(PixelBox { x1, y1, x2, y2 })
}
