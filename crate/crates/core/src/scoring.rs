//! Unknown-detection scores.
//!
//! Three raw scores are computed for a feature map `Z` and its predicted
//! class `c`, each oriented so that higher means "more likely known":
//!
//! * the primary score `s_1`: for reconstruction heads the relative
//!   reconstruction score (`-d/‖z‖₁²` for CSSR, `d` for RCSSR, averaged over
//!   pixels); baselines supply their own (max SoftMax probability, nearest
//!   prototype, farthest reciprocal point);
//! * `s_2`, first-order: `|z|ᵀ μ̃_c` averaged over pixels, where `μ̃_c` is
//!   the class-mean activation normalised across classes;
//! * `s_3`, second-order: `Sum(G^c ⊙ G(Z))` against a class Gram template.
//!
//! Scores are standardised with means and standard deviations measured on
//! augmented training data, fused linearly, and thresholded.

use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::head::HeadMode;

/// Stand-in for `-∞` when a pixel's feature vector is all zero.
pub const DEGENERATE_SCORE: f64 = -1e9;
pub const DEFAULT_GRAM_POWER: u32 = 8;
pub const DEFAULT_TPR: f64 = 0.95;
pub const SCORE_NAMES: [&str; 3] = ["s1", "s2", "s3"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub primary: f64,
    pub first_order: f64,
    pub gram: f64,
}

impl RawScores {
    pub fn as_array(&self) -> [f64; 3] {
        [self.primary, self.first_order, self.gram]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconScore {
    pub value: f64,
    /// Pixels whose L1 norm was zero (scored with [`DEGENERATE_SCORE`]).
    pub degenerate_pixels: usize,
}

/// Reconstruction score of a feature map against its predicted class, given
/// each pixel's reconstruction error under that class.
pub fn score_recon(map: &FeatureMap, class_errors: &[f64], mode: HeadMode) -> Result<ReconScore> {
    if class_errors.len() != map.pixel_count() {
        return Err(Error::shape(
            "score_recon",
            format!("{} pixel errors for {} pixels", class_errors.len(), map.pixel_count()),
        ));
    }
    let mut degenerate = 0;
    let mut total = 0.0;
    for (z, &d) in map.pixels().zip(class_errors) {
        total += match mode {
            HeadMode::Cssr => {
                let l1: f64 = z.iter().map(|v| v.abs()).sum();
                if l1 == 0.0 {
                    degenerate += 1;
                    DEGENERATE_SCORE
                } else {
                    -d / (l1 * l1)
                }
            }
            HeadMode::Rcssr => d,
            other => return Err(Error::invalid(format!("{other} head has no reconstruction score"))),
        };
    }
    Ok(ReconScore {
        value: total / map.pixel_count() as f64,
        degenerate_pixels: degenerate,
    })
}

/// `G = (F^p (F^p)ᵀ)^{1/p}` with elementwise powers, where the columns of `F`
/// are the per-pixel absolute feature vectors. Returned row-major `D×D`.
pub fn gram_matrix(map: &FeatureMap, power: u32) -> Result<Vec<f64>> {
    if power < 1 {
        return Err(Error::invalid("gram power must be at least 1"));
    }
    let d = map.channels;
    let mut g = vec![0.0; d * d];
    let mut fp = vec![0.0; d];
    for z in map.pixels() {
        for (o, v) in fp.iter_mut().zip(z) {
            *o = v.abs().powi(power as i32);
        }
        for i in 0..d {
            let fi = fp[i];
            if fi == 0.0 {
                continue;
            }
            let row = &mut g[i * d..(i + 1) * d];
            for (o, &fj) in row.iter_mut().zip(&fp) {
                *o += fi * fj;
            }
        }
    }
    if power > 1 {
        let inv = 1.0 / power as f64;
        g.iter_mut().for_each(|v| *v = v.powf(inv));
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub means: [f64; 3],
    pub stds: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStats {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Class mean absolute activation `μ_i`.
    pub mu: Vec<Vec<f64>>,
    /// `μ_i / Σ_j μ_j` elementwise.
    pub mu_tilde: Vec<Vec<f64>>,
    /// Class Gram templates, row-major `D×D`.
    pub gram_templates: Vec<Vec<f64>>,
    pub gram_power: u32,
    pub calibration: Option<Calibration>,
    pub weights: [f64; 3],
    pub threshold: Option<f64>,
    /// Classes that received no predicted training samples.
    pub empty_classes: Vec<usize>,
}

impl ScoreStats {
    fn check_class(&self, c: usize, map: &FeatureMap) -> Result<()> {
        if c >= self.num_classes {
            return Err(Error::invalid(format!("no statistics for class {c} ({} classes)", self.num_classes)));
        }
        if map.channels != self.feature_dim {
            return Err(Error::shape(
                "score",
                format!("feature map has D={} but statistics have D={}", map.channels, self.feature_dim),
            ));
        }
        Ok(())
    }

    pub fn calibration(&self) -> Result<&Calibration> {
        self.calibration
            .as_ref()
            .ok_or_else(|| Error::invalid("score statistics are not calibrated"))
    }

    pub fn threshold(&self) -> Result<f64> {
        self.threshold
            .ok_or_else(|| Error::invalid("no acceptance threshold has been fitted"))
    }
}

/// Group training feature maps by predicted class and collect `μ`, `μ̃` and
/// Gram templates. Features must come from un-augmented data.
///
/// A class with no predicted samples gets a uniform `μ̃` row (`1/m`) and a
/// zero Gram template, with a warning. A feature silent in every class gets
/// `μ̃ = 0`.
pub fn collect_class_stats(samples: &[(FeatureMap, usize)], num_classes: usize, power: u32) -> Result<ScoreStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no samples to collect statistics from"))?;
    let d = first.0.channels;
    if power < 1 {
        return Err(Error::invalid("gram power must be at least 1"));
    }
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut pixel_counts = vec![0usize; num_classes];
    let mut sample_counts = vec![0usize; num_classes];
    let mut grams = vec![vec![0.0; d * d]; num_classes];
    for (map, c) in samples {
        if *c >= num_classes {
            return Err(Error::invalid(format!("predicted class {c} outside {num_classes} classes")));
        }
        if map.channels != d {
            return Err(Error::shape("collect_class_stats", format!("mixed feature widths {d} and {}", map.channels)));
        }
        for z in map.pixels() {
            for (s, v) in sums[*c].iter_mut().zip(z) {
                *s += v.abs();
            }
        }
        pixel_counts[*c] += map.pixel_count();
        sample_counts[*c] += 1;
        for (acc, v) in grams[*c].iter_mut().zip(gram_matrix(map, power)?) {
            *acc += v;
        }
    }

    let mut empty = Vec::new();
    let mu: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            if pixel_counts[c] == 0 {
                empty.push(c);
                vec![0.0; d]
            } else {
                sums[c].iter().map(|s| s / pixel_counts[c] as f64).collect()
            }
        })
        .collect();
    if !empty.is_empty() {
        warn!("no training samples predicted into classes {empty:?}; using uniform activation templates");
    }
    let totals: Vec<f64> = (0..d).map(|j| mu.iter().map(|row| row[j]).sum()).collect();
    let mu_tilde = (0..num_classes)
        .map(|c| {
            if sample_counts[c] == 0 {
                vec![1.0 / num_classes as f64; d]
            } else {
                mu[c]
                    .iter()
                    .zip(&totals)
                    .map(|(m, &t)| if t > 0.0 { m / t } else { 0.0 })
                    .collect()
            }
        })
        .collect();
    let gram_templates = grams
        .into_iter()
        .zip(&sample_counts)
        .map(|(g, &n)| {
            if n == 0 {
                g
            } else {
                g.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect();

    Ok(ScoreStats {
        num_classes,
        feature_dim: d,
        mu,
        mu_tilde,
        gram_templates,
        gram_power: power,
        calibration: None,
        weights: [1.0, 1.0, 1.0],
        threshold: None,
        empty_classes: empty,
    })
}

/// `s_2`: mean over pixels of `|z|ᵀ μ̃_c`.
pub fn score_first_order(map: &FeatureMap, class: usize, stats: &ScoreStats) -> Result<f64> {
    stats.check_class(class, map)?;
    let weights = &stats.mu_tilde[class];
    let total: f64 = map
        .pixels()
        .map(|z| z.iter().zip(weights).map(|(v, w)| v.abs() * w).sum::<f64>())
        .sum();
    Ok(total / map.pixel_count() as f64)
}

/// `s_3 = Sum(G^c ⊙ G(Z))`.
pub fn score_gram(map: &FeatureMap, class: usize, stats: &ScoreStats) -> Result<f64> {
    stats.check_class(class, map)?;
    let template = &stats.gram_templates[class];
    let g = gram_matrix(map, stats.gram_power)?;
    if g.len() != template.len() {
        return Err(Error::shape("score_gram", format!("gram of {} entries vs template of {}", g.len(), template.len())));
    }
    Ok(g.iter().zip(template).map(|(a, b)| a * b).sum())
}

pub fn mean_and_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 values for a standard deviation, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Fill in per-score means and unbiased standard deviations from raw scores
/// of augmented training samples.
pub fn calibrate_scores(stats: &mut ScoreStats, scores: &[RawScores]) -> Result<Calibration> {
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for k in 0..3 {
        let column: Vec<f64> = scores.iter().map(|s| s.as_array()[k]).collect();
        let (m, s) = mean_and_std(&column)?;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::DegenerateScore(SCORE_NAMES[k].to_string()));
        }
        means[k] = m;
        stds[k] = s;
    }
    let cal = Calibration { means, stds };
    stats.calibration = Some(cal);
    Ok(cal)
}

/// Standardised scores `(s - E) / Std`.
pub fn normalized_scores(raw: &RawScores, stats: &ScoreStats) -> Result<[f64; 3]> {
    let cal = stats.calibration()?;
    let r = raw.as_array();
    Ok([0, 1, 2].map(|k| (r[k] - cal.means[k]) / cal.stds[k]))
}

/// `s_all = w₁·s̃₁ + w₂·s̃₂ + w₃·s̃₃`; zero-weight terms are skipped.
pub fn fused_score(raw: &RawScores, stats: &ScoreStats) -> Result<f64> {
    let n = normalized_scores(raw, stats)?;
    Ok(stats
        .weights
        .iter()
        .zip(n)
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, s)| w * s)
        .sum())
}

/// Largest `δ` such that at least `tpr` of the scores are `≥ δ`: the
/// `⌊(1-tpr)·n⌋`-th smallest score (0-indexed).
pub fn fit_threshold(scores: &[f64], tpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot fit a threshold on no scores"));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::invalid(format!("target rate must lie in (0, 1], got {tpr}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            op: "fit_threshold".into(),
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // (1 - tpr)·n with a little slack so 0.95·100 lands on 5, not 4.9999
    let k = (((1.0 - tpr) * n as f64) + 1e-9).floor() as usize;
    Ok(sorted[k.min(n - 1)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Known(usize),
    Unknown,
}

impl Decision {
    /// Class index with unknown mapped to `num_known`.
    pub fn index(self, num_known: usize) -> usize {
        match self {
            Decision::Known(c) => c,
            Decision::Unknown => num_known,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Known(c) => write!(f, "{c}"),
            Decision::Unknown => f.write_str("unknown"),
        }
    }
}

/// Accept the predicted class when the score reaches the threshold.
pub fn decide(predicted: usize, score: f64, threshold: f64) -> Decision {
    if score >= threshold {
        Decision::Known(predicted)
    } else {
        Decision::Unknown
    }
}

pub fn open_set_infer(raw: &RawScores, predicted: usize, stats: &ScoreStats) -> Result<Decision> {
    Ok(decide(predicted, fused_score(raw, stats)?, stats.threshold()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map1(z: &[f64]) -> FeatureMap {
        FeatureMap::from_vector(z).unwrap()
    }

    #[test]
    fn recon_scores() {
        let m = FeatureMap::new(1, 1, 2, vec![1.5, -0.5]).unwrap();
        assert_eq!(score_recon(&m, &[0.5], HeadMode::Cssr).unwrap().value, -0.125);
        assert_eq!(score_recon(&m, &[0.5], HeadMode::Rcssr).unwrap().value, 0.5);
        let two = FeatureMap::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(score_recon(&two, &[0.1, 0.3], HeadMode::Cssr).unwrap().value, -0.2, epsilon = 1e-15);
        let zero = map1(&[0.0, 0.0]);
        let s = score_recon(&zero, &[0.0], HeadMode::Cssr).unwrap();
        assert_eq!((s.value, s.degenerate_pixels), (DEGENERATE_SCORE, 1));
        assert!(score_recon(&m, &[0.1, 0.2], HeadMode::Cssr).is_err());
    }

    #[test]
    fn gram_hand_values() {
        let m = map1(&[1.0, 2.0]);
        assert_eq!(gram_matrix(&m, 1).unwrap(), vec![1.0, 2.0, 2.0, 4.0]);
        let g2 = gram_matrix(&m, 2).unwrap();
        for (a, b) in g2.iter().zip([1.0, 2.0, 2.0, 4.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(gram_matrix(&m, 0).is_err());
    }

    #[test]
    fn class_stats_basics() {
        let stats = collect_class_stats(&[(map1(&[1.0, 2.0]), 0), (map1(&[1.0, 2.0]), 1)], 2, 1).unwrap();
        assert_eq!(stats.mu_tilde, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let single = collect_class_stats(&[(map1(&[1.0, -2.0]), 0), (map1(&[3.0, 0.0]), 1)], 2, 1).unwrap();
        assert_eq!(single.gram_templates[0], vec![1.0, 2.0, 2.0, 4.0]);
        // feature 1 silent in every class of this population
        let silent = collect_class_stats(&[(map1(&[1.0, 0.0]), 0), (map1(&[3.0, 0.0]), 1)], 2, 1).unwrap();
        assert_eq!(silent.mu_tilde[0][1], 0.0);
        assert_eq!(silent.mu_tilde[1][1], 0.0);
    }

    #[test]
    fn empty_class_fallback() {
        let stats = collect_class_stats(&[(map1(&[1.0, 2.0]), 0)], 3, 2).unwrap();
        assert_eq!(stats.empty_classes, vec![1, 2]);
        assert_eq!(stats.mu_tilde[2], vec![1.0 / 3.0; 2]);
        assert_eq!(stats.gram_templates[1], vec![0.0; 4]);
    }

    #[test]
    fn first_order_scores() {
        let mut stats = collect_class_stats(&[(map1(&[1.0, 1.0]), 0), (map1(&[1.0, 1.0]), 1)], 2, 1).unwrap();
        assert_eq!(score_first_order(&map1(&[2.0, -4.0]), 0, &stats).unwrap(), 3.0);
        assert_eq!(score_first_order(&map1(&[0.0, 0.0]), 1, &stats).unwrap(), 0.0);
        let z = map1(&[0.3, 1.7]);
        let once = score_first_order(&z, 1, &stats).unwrap();
        assert_abs_diff_eq!(score_first_order(&z.scaled(2.0), 1, &stats).unwrap(), 2.0 * once, epsilon = 1e-15);
        assert!(score_first_order(&z, 2, &stats).is_err());
        stats.gram_templates[0] = vec![1.0, 0.0, 0.0, 1.0];
        assert_abs_diff_eq!(score_gram(&z, 0, &stats).unwrap(), 0.09 + 2.89, epsilon = 1e-12);
        stats.gram_templates[0] = vec![0.0; 4];
        assert_eq!(score_gram(&z, 0, &stats).unwrap(), 0.0);
    }

    #[test]
    fn calibration_and_fusion() {
        let mut stats = collect_class_stats(&[(map1(&[1.0, 1.0]), 0), (map1(&[1.0, 1.0]), 1)], 2, 1).unwrap();
        let raw = |a: f64| RawScores {
            primary: a,
            first_order: a,
            gram: a,
        };
        let err = calibrate_scores(&mut stats, &[raw(1.0), raw(1.0)]).unwrap_err();
        assert!(matches!(err, Error::DegenerateScore(ref s) if s == "s1"));
        let cal = calibrate_scores(&mut stats, &[raw(1.0), raw(3.0)]).unwrap();
        assert_eq!(cal.means, [2.0; 3]);
        assert_abs_diff_eq!(cal.stds[0], 2f64.sqrt(), epsilon = 1e-15);

        stats.calibration = Some(Calibration {
            means: [0.0; 3],
            stds: [1.0; 3],
        });
        let r = RawScores {
            primary: 1.0,
            first_order: -1.0,
            gram: 2.0,
        };
        assert_eq!(normalized_scores(&r, &stats).unwrap(), [1.0, -1.0, 2.0]);
        assert_eq!(fused_score(&r, &stats).unwrap(), 2.0);
        stats.weights = [1.0, 0.0, 0.0];
        assert_eq!(fused_score(&r, &stats).unwrap(), 1.0);
        stats.weights = [0.0; 3];
        assert_eq!(fused_score(&r, &stats).unwrap(), 0.0);
    }

    #[test]
    fn threshold_order_statistics() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(fit_threshold(&scores, 0.95).unwrap(), 6.0);
        assert_eq!(fit_threshold(&scores, 1.0).unwrap(), 1.0);
        assert_eq!(fit_threshold(&[4.2], 0.3).unwrap(), 4.2);
        assert!(fit_threshold(&[], 0.95).is_err());
        assert!(fit_threshold(&scores, 0.0).is_err());
    }

    #[test]
    fn boundary_decisions() {
        assert_eq!(decide(2, 0.5, 0.5), Decision::Known(2));
        assert_eq!(decide(2, 0.5 - 1e-6, 0.5), Decision::Unknown);
        assert_eq!(Decision::Unknown.index(4), 4);
    }
}
