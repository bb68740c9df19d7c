use crate::backbone::BackbonePreset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scoring::{Decision, ScoreStats};
use crate::tensor::Scalar;

use super::model::Model;
use super::pipeline::score_dataset;

/// Square plotting window `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn square(half_width: f64) -> Self {
        Bounds {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
        }
    }
}

/// Grid of open-set decisions; row 0 is the top (`y_max`), column 0 the
/// left (`x_min`).
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSpaceMap {
    pub resolution: usize,
    pub bounds: Bounds,
    pub accepted: Vec<bool>,
    pub predicted: Vec<usize>,
    pub scores: Vec<f64>,
    pub num_classes: usize,
}

impl OpenSpaceMap {
    /// Grid coordinates of cell `(row, col)`.
    pub fn point(&self, row: usize, col: usize) -> [f64; 2] {
        cell_point(&self.bounds, self.resolution, row, col)
    }

    /// Cell nearest to `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let r = self.resolution as f64 - 1.0;
        let b = &self.bounds;
        let col = ((x - b.x_min) / (b.x_max - b.x_min) * r).round().clamp(0.0, r) as usize;
        let row = ((b.y_max - y) / (b.y_max - b.y_min) * r).round().clamp(0.0, r) as usize;
        (row, col)
    }

    pub fn accepted_at(&self, row: usize, col: usize) -> bool {
        self.accepted[row * self.resolution + col]
    }

    pub fn accepted_fraction(&self) -> f64 {
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len() as f64
    }

    /// Binary PGM; 255 = accepted, 0 = rejected.
    pub fn to_pgm(&self) -> Vec<u8> {
        pgm(self.resolution, self.accepted.iter().map(|&a| if a { 255 } else { 0 }))
    }

    /// Binary PGM of predicted classes, gray levels spread over `1..=255`
    /// and 0 where the cell is rejected.
    pub fn class_pgm(&self) -> Vec<u8> {
        let m = self.num_classes.max(1);
        pgm(
            self.resolution,
            self.accepted.iter().zip(&self.predicted).map(|(&a, &c)| {
                if a {
                    (255 * (c + 1) / m) as u8
                } else {
                    0
                }
            }),
        )
    }
}

fn pgm(side: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

fn cell_point(b: &Bounds, resolution: usize, row: usize, col: usize) -> [f64; 2] {
    let r = (resolution - 1) as f64;
    [
        b.x_min + (b.x_max - b.x_min) * col as f64 / r,
        b.y_max - (b.y_max - b.y_min) * row as f64 / r,
    ]
}

/// Evaluate the open-set decision on a `resolution × resolution` grid.
pub fn render_open_space_map<T: Scalar>(
    model: &mut Model<T>,
    stats: &ScoreStats,
    bounds: Bounds,
    resolution: usize,
) -> Result<OpenSpaceMap> {
    if model.config().backbone.preset != BackbonePreset::Mlp2d {
        return Err(Error::invalid(format!(
            "open-space maps need the 2-D backbone, model uses {}",
            model.config().backbone.preset
        )));
    }
    if resolution < 2 {
        return Err(Error::invalid(format!("resolution must be at least 2, got {resolution}")));
    }
    let finite = [bounds.x_min, bounds.x_max, bounds.y_min, bounds.y_max].iter().all(|v| v.is_finite());
    if !finite || bounds.x_min >= bounds.x_max || bounds.y_min >= bounds.y_max {
        return Err(Error::invalid(format!("bad bounds {bounds:?}")));
    }
    let mut inputs = Vec::with_capacity(resolution * resolution * 2);
    for row in 0..resolution {
        for col in 0..resolution {
            inputs.extend(cell_point(&bounds, resolution, row, col));
        }
    }
    let grid = Dataset::new(vec![2], inputs, vec![0; resolution * resolution], 1)?;
    let results = score_dataset(model, stats, &grid, false)?;
    Ok(OpenSpaceMap {
        resolution,
        bounds,
        accepted: results.iter().map(|r| matches!(r.decision, Decision::Known(_))).collect(),
        predicted: results.iter().map(|r| r.predicted).collect(),
        scores: results.iter().map(|r| r.fused).collect(),
        num_classes: stats.num_classes,
    })
}
