//! Synthetic handwritten-digit-like glyphs for exercising the image
//! pipeline without downloading a dataset.
//!
//! Each class is a fixed set of polyline strokes in the unit square. Every
//! sample jitters the control points, applies a random affine map and stroke
//! width, and renders with a soft edge.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const GLYPH_CLASSES: usize = 10;

type Stroke = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub n_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl GlyphSpec {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        GlyphSpec {
            n_per_class,
            side: 28,
            seed,
        }
    }
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = 14;
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn strokes(class: usize) -> Vec<Stroke> {
    // angles measured clockwise from +x since y points down
    match class {
        0 => vec![arc(0.5, 0.5, 0.24, 0.34, 0.0, 360.0)],
        1 => vec![vec![(0.38, 0.28), (0.52, 0.15), (0.52, 0.85)]],
        2 => {
            let mut s = arc(0.5, 0.34, 0.22, 0.19, 180.0, 360.0 + 35.0);
            s.extend([(0.26, 0.84), (0.76, 0.84)]);
            vec![s]
        }
        3 => vec![arc(0.48, 0.32, 0.2, 0.17, 200.0, 450.0), arc(0.48, 0.66, 0.23, 0.19, 270.0, 520.0)],
        4 => vec![vec![(0.62, 0.85), (0.62, 0.15), (0.24, 0.62), (0.8, 0.62)]],
        5 => {
            let mut s = vec![(0.74, 0.16), (0.34, 0.16), (0.31, 0.46)];
            s.extend(arc(0.5, 0.63, 0.23, 0.21, 230.0, 500.0));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.66, 0.14)];
            s.extend(arc(0.5, 0.64, 0.2, 0.2, 200.0, 560.0));
            vec![s]
        }
        7 => vec![vec![(0.24, 0.16), (0.78, 0.16), (0.42, 0.86)], vec![(0.4, 0.5), (0.68, 0.5)]],
        8 => vec![arc(0.5, 0.31, 0.17, 0.16, 0.0, 360.0), arc(0.5, 0.67, 0.22, 0.19, 0.0, 360.0)],
        9 => {
            let mut s = arc(0.48, 0.35, 0.2, 0.19, 10.0, 370.0);
            s.extend([(0.66, 0.86)]);
            vec![s]
        }
        _ => unreachable!("glyph class out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render_one(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let angle = rng.gen_range(-0.25..0.25);
    let scale = rng.gen_range(0.8..1.05);
    let shear = rng.gen_range(-0.25..0.25);
    let stretch = rng.gen_range(0.85..1.15);
    let (tx, ty) = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let width = rng.gen_range(1.1..2.1);
    let ink = rng.gen_range(0.8..1.0);
    let (s, c) = f64::sin_cos(angle);
    let px = side as f64;
    let segments: Vec<((f64, f64), (f64, f64))> = strokes(class)
        .into_iter()
        .flat_map(|stroke| {
            let pts: Vec<(f64, f64)> = stroke
                .into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + rng.gen_range(-0.025..0.025), y + rng.gen_range(-0.025..0.025));
                    // centre, shear, scale, rotate, translate, then to pixels
                    let (x, y) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
                    let (x, y) = (x * scale * stretch, y * scale);
                    let (x, y) = (c * x - s * y + 0.5 + tx, s * x + c * y + 0.5 + ty);
                    (x * px, y * px)
                })
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let mut img = vec![0.0; side * side];
    for yy in 0..side {
        for xx in 0..side {
            let p = (xx as f64 + 0.5, yy as f64 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            img[yy * side + xx] = ink * (1.0 - (d - width * 0.5)).clamp(0.0, 1.0);
        }
    }
    img
}

/// `n_per_class` glyphs of each of the ten classes, interleaved by class.
pub fn render_glyphs(spec: &GlyphSpec) -> Result<Dataset> {
    if spec.n_per_class == 0 || spec.side < 8 {
        return Err(Error::invalid(format!(
            "glyphs need n_per_class >= 1 and side >= 8, got {} and {}",
            spec.n_per_class, spec.side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(GLYPH_CLASSES * spec.n_per_class * spec.side * spec.side);
    let mut labels = Vec::with_capacity(GLYPH_CLASSES * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for class in 0..GLYPH_CLASSES {
            inputs.extend(render_one(class, spec.side, &mut rng));
            labels.push(class);
        }
    }
    Dataset::new(vec![spec.side, spec.side, 1], inputs, labels, GLYPH_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_range() {
        let d = render_glyphs(&GlyphSpec::new(2, 5)).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.sample_shape, vec![28, 28, 1]);
        assert!(d.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..d.len() {
            let ink: f64 = d.sample(i).iter().sum();
            assert!(ink > 20.0 && ink < 300.0, "class {} ink {ink}", d.labels[i]);
        }
        assert_eq!(d, render_glyphs(&GlyphSpec::new(2, 5)).unwrap());
    }

    #[test]
    fn classes_differ_on_average() {
        let d = render_glyphs(&GlyphSpec::new(20, 1)).unwrap();
        let mut means = vec![vec![0.0; 784]; 10];
        for i in 0..d.len() {
            for (m, v) in means[d.labels[i]].iter_mut().zip(d.sample(i)) {
                *m += v / 20.0;
            }
        }
        for a in 0..10 {
            for b in a + 1..10 {
                let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(dist > 5.0, "classes {a} and {b} too similar: {dist}");
            }
        }
    }
}
