//! Grayscale augmentation: a random subset of up to `max_ops` transforms,
//! each with a uniformly drawn magnitude.

use std::fmt;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Brightness,
    Contrast,
    Rotate,
    Shear,
    Equalize,
}

impl Transform {
    pub const ALL: [Transform; 5] = [
        Transform::Brightness,
        Transform::Contrast,
        Transform::Rotate,
        Transform::Shear,
        Transform::Equalize,
    ];
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Transform::Brightness => "brightness",
            Transform::Contrast => "contrast",
            Transform::Rotate => "rotate",
            Transform::Shear => "shear",
            Transform::Equalize => "equalize",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub transforms: Vec<Transform>,
    pub max_ops: usize,
    /// Additive delta.
    pub brightness: [f64; 2],
    /// Factor about the image mean.
    pub contrast: [f64; 2],
    /// Degrees.
    pub rotate: [f64; 2],
    /// Horizontal shear factor.
    pub shear: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            transforms: Transform::ALL.to_vec(),
            max_ops: 2,
            brightness: [-0.3, 0.3],
            contrast: [0.7, 1.3],
            rotate: [-30.0, 30.0],
            shear: [-0.3, 0.3],
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        AugmentSpec {
            max_ops: 0,
            ..AugmentSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("rotate", self.rotate),
            ("shear", self.shear),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is not an interval")));
            }
        }
        if self.contrast[0] < 0.0 {
            return Err(Error::invalid("contrast factors must be non-negative"));
        }
        Ok(())
    }

    fn range(&self, t: Transform) -> Option<[f64; 2]> {
        match t {
            Transform::Brightness => Some(self.brightness),
            Transform::Contrast => Some(self.contrast),
            Transform::Rotate => Some(self.rotate),
            Transform::Shear => Some(self.shear),
            Transform::Equalize => None,
        }
    }
}

/// Sample bilinearly with zeros outside the grid.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1.0) * fx } else { 0.0 };
    let bottom = if fy > 0.0 {
        at(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 }
    } else {
        0.0
    };
    top * (1.0 - fy) + bottom * fy
}

/// Inverse-map every output pixel through `src(y, x)` (coordinates relative
/// to the image centre).
fn resample(img: &[f64], h: usize, w: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64 - cy, x as f64 - cx);
            out[y * w + x] = bilinear(img, h, w, sy + cy, sx + cx);
        }
    }
    out
}

fn equalize(img: &[f64]) -> Vec<f64> {
    let bin = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for &v in img {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut running = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        running += h;
        *c = running;
    }
    let n = img.len();
    let cdf_min = cdf[bin(img.iter().copied().fold(f64::INFINITY, f64::min))];
    if n == cdf_min {
        return img.to_vec();
    }
    img.iter().map(|&v| (cdf[bin(v)] - cdf_min) as f64 / (n - cdf_min) as f64).collect()
}

/// Apply one transform with an explicit magnitude (ignored by equalize).
/// The result is clamped to `[0, 1]`.
pub fn apply_transform(img: &[f64], height: usize, width: usize, t: Transform, magnitude: f64) -> Result<Vec<f64>> {
    if img.len() != height * width {
        return Err(Error::invalid(format!(
            "image of {} pixels is not {height}x{width}",
            img.len()
        )));
    }
    let out = match t {
        Transform::Brightness => img.iter().map(|v| v + magnitude).collect(),
        Transform::Contrast => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            img.iter().map(|v| mean + magnitude * (v - mean)).collect()
        }
        Transform::Rotate => {
            let (s, c) = magnitude.to_radians().sin_cos();
            resample(img, height, width, |y, x| (-s * x + c * y, c * x + s * y))
        }
        Transform::Shear => resample(img, height, width, |y, x| (y, x + magnitude * y)),
        Transform::Equalize => equalize(img),
    };
    Ok(out.into_iter().map(|v: f64| v.clamp(0.0, 1.0)).collect())
}

/// Draw `k ∈ 0..=max_ops` distinct transforms in random order and apply them.
pub fn augment_image(img: &[f64], height: usize, width: usize, spec: &AugmentSpec, draw_seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    if img.len() != height * width {
        return Err(Error::invalid(format!(
            "image of {} pixels is not {height}x{width}",
            img.len()
        )));
    }
    if spec.max_ops == 0 {
        return Ok(img.to_vec());
    }
    if spec.transforms.is_empty() {
        warn!("augmentation enabled with no transforms; images pass through unchanged");
        return Ok(img.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let k = rng.gen_range(0..=spec.max_ops).min(spec.transforms.len());
    let chosen: Vec<Transform> = spec.transforms.choose_multiple(&mut rng, k).copied().collect();
    let mut out = img.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>();
    for t in chosen {
        let magnitude = match spec.range(t) {
            Some([lo, hi]) if lo < hi => rng.gen_range(lo..=hi),
            Some([lo, _]) => lo,
            None => 0.0,
        };
        out = apply_transform(&out, height, width, t, magnitude)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| (i % 7) as f64 / 7.0).collect()
    }

    #[test]
    fn zero_ops_is_identity() {
        let img = ramp(5, 4);
        let spec = AugmentSpec::disabled();
        assert_eq!(augment_image(&img, 5, 4, &spec, 3).unwrap(), img);
    }

    #[test]
    fn brightness_clamps() {
        assert_eq!(apply_transform(&[0.0; 6], 2, 3, Transform::Brightness, 1.0).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn zero_rotation_and_shear_are_identity() {
        let img = ramp(6, 5);
        for t in [Transform::Rotate, Transform::Shear] {
            let out = apply_transform(&img, 6, 5, t, 0.0).unwrap();
            for (a, b) in out.iter().zip(&img) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        // 3x3, single lit pixel at the top middle
        let mut img = vec![0.0; 9];
        img[1] = 1.0;
        let out = apply_transform(&img, 3, 3, Transform::Rotate, 90.0).unwrap();
        assert_eq!(out.iter().filter(|&&v| v > 0.99).count(), 1);
        assert!(out[1] < 1e-9);
    }

    #[test]
    fn equalize_spreads_levels() {
        let out = apply_transform(&[0.2, 0.2, 0.4, 0.6], 2, 2, Transform::Equalize, 0.0).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.5, 1.0]);
        assert_eq!(apply_transform(&[0.3; 4], 2, 2, Transform::Equalize, 0.0).unwrap(), vec![0.3; 4]);
    }

    #[test]
    fn deterministic_shape_and_range() {
        let img = ramp(8, 8);
        let spec = AugmentSpec::default();
        for seed in 0..50 {
            let a = augment_image(&img, 8, 8, &spec, seed).unwrap();
            assert_eq!(a, augment_image(&img, 8, 8, &spec, seed).unwrap());
            assert_eq!(a.len(), 64);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_transform_set_passes_through() {
        let spec = AugmentSpec {
            transforms: vec![],
            ..AugmentSpec::default()
        };
        let img = ramp(3, 3);
        assert_eq!(augment_image(&img, 3, 3, &spec, 1).unwrap(), img);
    }
}
