//! Prototype and reciprocal-point classifiers on fixed point sets, plus the
//! empirical checks of how the error norm shapes the class-probability
//! landscape around a prototype.
//!
//! Under an L1 (MAE) distance the probability of class `c` is maximal at its
//! own prototype: moving by `ε` changes every distance by at most `‖ε‖₁` and
//! the own-class distance by exactly `‖ε‖₁`. Under squared L2 (MSE) that
//! fails, and a concrete witness exists already in one dimension.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{distance, softmax, ErrorNorm};
use crate::rng::derive_seed;

/// Temperature used by the norm checks; any fixed positive value gives the
/// same ordering results.
pub const CHECK_GAMMA: f64 = 1.0;

/// Slack allowed before a probability increase counts as a violation.
pub const MONOTONICITY_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeModel {
    /// `points[i]` is the point set `U_i` of class `i`.
    pub points: Vec<Vec<Vec<f64>>>,
    pub norm: ErrorNorm,
    /// Per-class margins `R_i` (reciprocal regularizer only).
    pub margins: Vec<f64>,
}

impl PrototypeModel {
    /// One point per class.
    pub fn single(points: Vec<Vec<f64>>, norm: ErrorNorm) -> Result<Self> {
        let m = points.len();
        Self::new(points.into_iter().map(|p| vec![p]).collect(), norm, vec![0.0; m])
    }

    pub fn new(points: Vec<Vec<Vec<f64>>>, norm: ErrorNorm, margins: Vec<f64>) -> Result<Self> {
        let dim = points
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::invalid("prototype model has no points"))?;
        if let Some(i) = points.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("class {i} has an empty point set")));
        }
        if points.iter().flatten().any(|p| p.len() != dim) {
            return Err(Error::shape("prototype_model", format!("points must all have dimension {dim}")));
        }
        if margins.len() != points.len() {
            return Err(Error::shape(
                "prototype_model",
                format!("{} margins for {} classes", margins.len(), points.len()),
            ));
        }
        Ok(PrototypeModel { points, norm, margins })
    }

    pub fn num_classes(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0][0].len()
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape(
                "prototype",
                format!("sample of length {} for points of dimension {}", z.len(), self.dim()),
            ));
        }
        Ok(())
    }

    fn check_label(&self, c: usize) -> Result<()> {
        if c >= self.num_classes() {
            return Err(Error::invalid(format!("label {c} outside {} classes", self.num_classes())));
        }
        Ok(())
    }
}

fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    distance(a, b, ErrorNorm::Mse)
}

/// Nearest-prototype SoftMax with logits `-gamma·min_{u∈U_i} d(z, u)`.
pub fn prototype_prob_gamma(z: &[f64], model: &PrototypeModel, gamma: f64) -> Result<Vec<f64>> {
    model.check(z)?;
    let logits: Vec<f64> = model
        .points
        .iter()
        .map(|set| {
            let nearest = set
                .iter()
                .map(|u| distance(z, u, model.norm))
                .fold(f64::INFINITY, f64::min);
            -gamma * nearest
        })
        .collect();
    Ok(softmax(&logits))
}

pub fn prototype_prob(z: &[f64], model: &PrototypeModel) -> Result<Vec<f64>> {
    prototype_prob_gamma(z, model, 1.0)
}

/// Reciprocal-point SoftMax with logits `Σ_{u∈U_i} ‖z-u‖²`: the class whose
/// reciprocal points are farthest wins.
pub fn reciprocal_prob(z: &[f64], model: &PrototypeModel) -> Result<Vec<f64>> {
    model.check(z)?;
    let logits: Vec<f64> = model
        .points
        .iter()
        .map(|set| set.iter().map(|u| sq_l2(z, u)).sum())
        .collect();
    Ok(softmax(&logits))
}

/// `min_{u∈U_c} ‖z-u‖²`.
pub fn prototype_loss(z: &[f64], label: usize, model: &PrototypeModel) -> Result<f64> {
    model.check(z)?;
    model.check_label(label)?;
    Ok(model.points[label]
        .iter()
        .map(|u| sq_l2(z, u))
        .fold(f64::INFINITY, f64::min))
}

/// `Σ_{u∈U_c} (‖z-u‖² - R_c)²`.
pub fn reciprocal_reg(z: &[f64], label: usize, model: &PrototypeModel) -> Result<f64> {
    model.check(z)?;
    model.check_label(label)?;
    let r = model.margins[label];
    Ok(model.points[label]
        .iter()
        .map(|u| (sq_l2(z, u) - r).powi(2))
        .sum())
}

/// One configuration in which moving off the own prototype raised the
/// own-class probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub prototypes: Vec<Vec<f64>>,
    pub class: usize,
    pub offset: Vec<f64>,
    pub norm: ErrorNorm,
    pub gamma: f64,
    pub prob_at_prototype: f64,
    pub prob_at_offset: f64,
}

impl Witness {
    fn evaluate(prototypes: Vec<Vec<f64>>, class: usize, offset: Vec<f64>, norm: ErrorNorm) -> Result<Self> {
        let model = PrototypeModel::single(prototypes, norm)?;
        let at = model.points[class][0].clone();
        let moved: Vec<f64> = at.iter().zip(&offset).map(|(u, e)| u + e).collect();
        let p0 = prototype_prob_gamma(&at, &model, CHECK_GAMMA)?[class];
        let p1 = prototype_prob_gamma(&moved, &model, CHECK_GAMMA)?[class];
        Ok(Witness {
            prototypes: model.points.into_iter().map(|mut s| s.remove(0)).collect(),
            class,
            offset,
            norm,
            gamma: CHECK_GAMMA,
            prob_at_prototype: p0,
            prob_at_offset: p1,
        })
    }

    pub fn is_counterexample(&self) -> bool {
        self.prob_at_offset > self.prob_at_prototype
    }
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "norm: {:?}, gamma: {}", self.norm, self.gamma)?;
        writeln!(f, "prototypes: {:?}", self.prototypes)?;
        writeln!(f, "class: {}, offset: {:?}", self.class, self.offset)?;
        writeln!(f, "p(class | prototype)          = {:.6}", self.prob_at_prototype)?;
        write!(f, "p(class | prototype + offset) = {:.6}", self.prob_at_offset)
    }
}

/// The canonical one-dimensional configuration: prototypes 0 and 1, class 0,
/// offset -0.5.
pub fn canonical_witness(norm: ErrorNorm) -> Witness {
    Witness::evaluate(vec![vec![0.0], vec![1.0]], 0, vec![-0.5], norm).expect("fixed configuration")
}

/// Return a configuration where the MSE prototype probability increases
/// away from the prototype. The canonical case is tried first, then random
/// configurations.
pub fn find_mse_counterexample(seed: u64) -> Result<Witness> {
    let canonical = canonical_witness(ErrorNorm::Mse);
    if canonical.is_counterexample() {
        return Ok(canonical);
    }
    search_mse_counterexample(2, 2, seed, 100)
}

/// Random search over `budget` configurations of `num_classes` prototypes in
/// `dim` dimensions.
pub fn search_mse_counterexample(num_classes: usize, dim: usize, seed: u64, budget: usize) -> Result<Witness> {
    if num_classes < 2 {
        return Err(Error::invalid(
            "a counterexample needs at least 2 classes; with one class the probability is constant",
        ));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    for trial in 0..budget {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64));
        let protos: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let class = rng.gen_range(0..num_classes);
        for _ in 0..50 {
            let eps: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Witness::evaluate(protos.clone(), class, eps, ErrorNorm::Mse)?;
            if w.is_counterexample() {
                return Ok(w);
            }
        }
    }
    Err(Error::invalid(format!("no counterexample found in {budget} configurations")))
}

#[derive(Clone, Debug)]
pub struct MonotonicityReport {
    pub trials: usize,
    pub offsets_per_trial: usize,
    pub gamma: f64,
    /// Largest observed `p(c | u_c + ε) - p(c | u_c)`.
    pub max_increase: f64,
    pub violations: Vec<Witness>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for MonotonicityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "MAE monotonicity: {} trials x {} offsets, gamma {}",
            self.trials, self.offsets_per_trial, self.gamma
        )?;
        writeln!(f, "max probability increase: {:.3e}", self.max_increase)?;
        write!(f, "violations: {}", self.violations.len())?;
        for v in &self.violations {
            write!(f, "\n---\n{v}")?;
        }
        Ok(())
    }
}

/// For random configurations (2–8 classes, dimension 1–16, distinct
/// prototypes), check that no MAE offset raises the own-class probability
/// by more than [`MONOTONICITY_SLACK`].
pub fn check_mae_monotonicity(trials: usize, offsets_per_trial: usize, seed: u64) -> Result<MonotonicityReport> {
    if trials == 0 || offsets_per_trial == 0 {
        return Err(Error::invalid("trials and offsets must be at least 1"));
    }
    let mut report = MonotonicityReport {
        trials,
        offsets_per_trial,
        gamma: CHECK_GAMMA,
        max_increase: f64::NEG_INFINITY,
        violations: Vec::new(),
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64));
        let m = rng.gen_range(2..=8);
        let dim = rng.gen_range(1..=16);
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(m);
        while protos.len() < m {
            let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            if !protos.contains(&p) {
                protos.push(p);
            }
        }
        let class = rng.gen_range(0..m);
        let model = PrototypeModel::single(protos.clone(), ErrorNorm::Mae)?;
        let p0 = prototype_prob_gamma(&protos[class], &model, CHECK_GAMMA)?[class];
        for _ in 0..offsets_per_trial {
            let scale = rng.gen_range(0.0..3.0);
            let eps: Vec<f64> = (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let moved: Vec<f64> = protos[class].iter().zip(&eps).map(|(u, e)| u + e).collect();
            let p1 = prototype_prob_gamma(&moved, &model, CHECK_GAMMA)?[class];
            report.max_increase = report.max_increase.max(p1 - p0);
            if p0 < p1 - MONOTONICITY_SLACK {
                report
                    .violations
                    .push(Witness::evaluate(protos.clone(), class, eps, ErrorNorm::Mae)?);
            }
        }
    }
    Ok(report)
}
