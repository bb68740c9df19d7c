//! Open-set evaluation metrics.
//!
//! Scores are oriented "higher means known"; a sample is accepted when its
//! score is `≥` the threshold. Curves come from exact sorted sweeps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::fit_threshold;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    /// `None` for samples of unknown classes.
    pub true_label: Option<usize>,
    pub predicted: usize,
}

impl ScoredSample {
    pub fn is_known(&self) -> bool {
        self.true_label.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positive {
    /// Known samples are positives.
    In,
    /// Unknown samples are positives, scores negated.
    Out,
}

fn check_sides(known: &[f64], unknown: &[f64]) -> Result<()> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::invalid(format!(
            "metric needs known and unknown scores, got {} and {}",
            known.len(),
            unknown.len()
        )));
    }
    if known.iter().chain(unknown).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "metric".into() });
    }
    Ok(())
}

/// `(score, is_known)` sorted ascending by score.
fn merged(known: &[f64], unknown: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    all
}

/// Consecutive runs of equal scores as `(score, known_count, unknown_count)`.
fn tie_groups(all: &[(f64, bool)]) -> Vec<(f64, usize, usize)> {
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &(s, k) in all {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if k {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, k as usize, (!k) as usize)),
        }
    }
    groups
}

/// Probability that a known score exceeds an unknown one, ties counting
/// half (the Mann–Whitney statistic).
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    check_sides(known, unknown)?;
    let mut unknown_below = 0usize;
    // twice the U statistic, kept integral
    let mut twice_u = 0usize;
    for (_, k, u) in tie_groups(&merged(known, unknown)) {
        twice_u += k * (2 * unknown_below + u);
        unknown_below += u;
    }
    Ok(0.5 * twice_u as f64 / (known.len() * unknown.len()) as f64)
}

/// Best `0.5·(TPR + TNR)` over thresholds at midpoints between distinct
/// scores and at `±∞`.
pub fn dtacc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    check_sides(known, unknown)?;
    let (nk, nu) = (known.len(), unknown.len());
    let groups = tie_groups(&merged(known, unknown));
    let accuracy = |known_accepted: usize, unknown_rejected: usize| {
        0.5 * (known_accepted as f64 / nk as f64 + unknown_rejected as f64 / nu as f64)
    };
    // threshold -inf: everything accepted
    let mut best = accuracy(nk, 0);
    let (mut known_below, mut unknown_below) = (0, 0);
    for (_, k, u) in groups {
        known_below += k;
        unknown_below += u;
        // threshold just above this group
        best = best.max(accuracy(nk - known_below, unknown_below));
    }
    Ok(best)
}

/// Step-wise area under the precision–recall curve: thresholds at each
/// distinct score, descending; `Σ (R_i - R_{i-1}) · P_i`.
pub fn aupr(known: &[f64], unknown: &[f64], positive: Positive) -> Result<f64> {
    check_sides(known, unknown)?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        Positive::In => (known.to_vec(), unknown.to_vec()),
        Positive::Out => (unknown.iter().map(|s| -s).collect(), known.iter().map(|s| -s).collect()),
    };
    let npos = pos.len() as f64;
    let groups = tie_groups(&merged(&pos, &neg));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for &(_, p, n) in groups.iter().rev() {
        let prev = tp;
        tp += p;
        fp += n;
        if tp > prev {
            area += (tp - prev) as f64 / npos * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// Fraction of unknown scores strictly below the threshold that accepts
/// `tpr` of the known scores.
pub fn tnr_at_tpr(known: &[f64], unknown: &[f64], tpr: f64) -> Result<f64> {
    check_sides(known, unknown)?;
    let delta = fit_threshold(known, tpr)?;
    Ok(unknown.iter().filter(|&&s| s < delta).count() as f64 / unknown.len() as f64)
}

/// Macro F1 over the `m` known classes plus the unknown class (index `m`).
/// A class with no true and no predicted samples scores 0.
pub fn macro_f1_open(samples: &[ScoredSample], threshold: f64, num_known: usize) -> Result<f64> {
    if num_known < 1 {
        return Err(Error::invalid("need at least one known class"));
    }
    let classes = num_known + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for s in samples {
        let truth = s.true_label.unwrap_or(num_known);
        let decided = if s.score >= threshold { s.predicted } else { num_known };
        if truth >= classes || decided >= classes {
            return Err(Error::invalid(format!("label outside {num_known} known classes")));
        }
        if truth == decided {
            tp[truth] += 1;
        } else {
            fp[decided] += 1;
            fn_[truth] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

/// Area under correct-classification rate against false-positive rate, with
/// the threshold swept over every distinct score.
pub fn oscr(samples: &[ScoredSample]) -> Result<f64> {
    let nk = samples.iter().filter(|s| s.is_known()).count();
    let nu = samples.len() - nk;
    if nk == 0 || nu == 0 {
        return Err(Error::invalid(format!("OSCR needs known and unknown samples, got {nk} and {nu}")));
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    // descending
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let mut prev = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            match sorted[i].true_label {
                Some(label) if label == sorted[i].predicted => correct += 1,
                Some(_) => {}
                None => false_pos += 1,
            }
            i += 1;
        }
        let point = (false_pos as f64 / nu as f64, correct as f64 / nk as f64);
        area += (point.0 - prev.0) * (point.1 + prev.1) * 0.5;
        prev = point;
    }
    Ok(area)
}

/// `1 - sqrt(2·N_train / (N_test + N_target))`.
pub fn openness(n_train: usize, n_test: usize, n_target: usize) -> Result<f64> {
    if n_train == 0 || n_test == 0 || n_target == 0 {
        return Err(Error::invalid("openness inputs must be positive"));
    }
    if n_test < n_train {
        return Err(Error::invalid(format!("N_test ({n_test}) must be at least N_train ({n_train})")));
    }
    Ok(1.0 - (2.0 * n_train as f64 / (n_test + n_target) as f64).sqrt())
}

pub fn closed_accuracy(samples: &[ScoredSample]) -> Option<f64> {
    let known: Vec<_> = samples.iter().filter(|s| s.is_known()).collect();
    if known.is_empty() {
        return None;
    }
    let correct = known.iter().filter(|s| s.true_label == Some(s.predicted)).count();
    Some(correct as f64 / known.len() as f64)
}

/// Evaluation summary. Metrics that need both known and unknown samples are
/// `None` when one side is missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub closed_accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub dtacc: Option<f64>,
    pub auin: Option<f64>,
    pub auout: Option<f64>,
    pub tnr_at_tpr95: Option<f64>,
    pub macro_f1: Option<f64>,
    pub oscr: Option<f64>,
    pub openness: Option<f64>,
}

impl EvalReport {
    pub fn fields(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("closed_accuracy", self.closed_accuracy),
            ("auroc", self.auroc),
            ("dtacc", self.dtacc),
            ("auin", self.auin),
            ("auout", self.auout),
            ("tnr_at_tpr95", self.tnr_at_tpr95),
            ("macro_f1", self.macro_f1),
            ("oscr", self.oscr),
            ("openness", self.openness),
        ]
    }
}

/// Class counts for the openness measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: usize,
    pub test: usize,
    pub target: usize,
}

pub fn evaluate(samples: &[ScoredSample], threshold: f64, num_known: usize, counts: Option<ClassCounts>) -> Result<EvalReport> {
    let known: Vec<f64> = samples.iter().filter(|s| s.is_known()).map(|s| s.score).collect();
    let unknown: Vec<f64> = samples.iter().filter(|s| !s.is_known()).map(|s| s.score).collect();
    let both = !known.is_empty() && !unknown.is_empty();
    let when = |f: &dyn Fn() -> Result<f64>| -> Result<Option<f64>> { if both { f().map(Some) } else { Ok(None) } };
    Ok(EvalReport {
        closed_accuracy: closed_accuracy(samples),
        auroc: when(&|| auroc(&known, &unknown))?,
        dtacc: when(&|| dtacc(&known, &unknown))?,
        auin: when(&|| aupr(&known, &unknown, Positive::In))?,
        auout: when(&|| aupr(&known, &unknown, Positive::Out))?,
        tnr_at_tpr95: when(&|| tnr_at_tpr(&known, &unknown, 0.95))?,
        macro_f1: if samples.is_empty() {
            None
        } else {
            Some(macro_f1_open(samples, threshold, num_known)?)
        },
        oscr: when(&|| oscr(samples))?,
        openness: counts.map(|c| openness(c.train, c.test, c.target)).transpose()?,
    })
}

/// Descending comparison helper for score sorting by callers.
pub fn by_score_desc(a: &f64, b: &f64) -> Ordering {
    b.total_cmp(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample(score: f64, truth: Option<usize>, predicted: usize) -> ScoredSample {
        ScoredSample {
            score,
            true_label: truth,
            predicted,
        }
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn dtacc_cases() {
        assert_eq!(dtacc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(dtacc(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(dtacc(&[0.9, 0.2], &[0.1, 0.8]).unwrap(), 0.75);
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&[2.0, 3.0], &[0.0, 1.0], Positive::In).unwrap(), 1.0);
        assert_eq!(aupr(&[2.0, 3.0], &[0.0, 1.0], Positive::Out).unwrap(), 1.0);
        // one known above both unknowns and one below
        let ap = aupr(&[3.0, 0.0], &[1.0, 2.0], Positive::In).unwrap();
        assert_abs_diff_eq!(ap, 0.5 * 1.0 + 0.5 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tnr_cases() {
        assert_eq!(tnr_at_tpr(&[5.0, 6.0], &[1.0, 2.0], 0.95).unwrap(), 1.0);
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_abs_diff_eq!(tnr_at_tpr(&xs, &xs, 0.95).unwrap(), 0.05, epsilon = 1e-15);
        assert_eq!(tnr_at_tpr(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_cases() {
        let perfect = [sample(1.0, Some(0), 0), sample(1.0, Some(1), 1), sample(-1.0, None, 0)];
        assert_eq!(macro_f1_open(&perfect, 0.0, 2).unwrap(), 1.0);
        let rejected = [sample(-1.0, Some(0), 0), sample(-1.0, Some(1), 1)];
        assert_eq!(macro_f1_open(&rejected, 0.0, 2).unwrap(), 0.0);
        // hand confusion, m = 2, delta = 0:
        //   truth 0 -> 0, 0 -> 1, 1 -> 1, 1 -> unknown, unknown -> unknown, unknown -> 0
        // class 0: tp 1 fp 1 fn 1 -> 0.5; class 1: tp 1 fp 1 fn 1 -> 0.5;
        // unknown: tp 1 fp 1 fn 1 -> 0.5
        let six = [
            sample(1.0, Some(0), 0),
            sample(1.0, Some(0), 1),
            sample(1.0, Some(1), 1),
            sample(-1.0, Some(1), 1),
            sample(-1.0, None, 0),
            sample(1.0, None, 0),
        ];
        assert_abs_diff_eq!(macro_f1_open(&six, 0.0, 2).unwrap(), 0.5, epsilon = 1e-15);
        assert!(macro_f1_open(&six, 0.0, 0).is_err());
    }

    #[test]
    fn oscr_cases() {
        let perfect = [sample(3.0, Some(0), 0), sample(2.0, Some(1), 1), sample(0.0, None, 0)];
        assert_eq!(oscr(&perfect).unwrap(), 1.0);
        let wrong = [sample(3.0, Some(0), 1), sample(2.0, Some(1), 0), sample(0.0, None, 0)];
        assert_eq!(oscr(&wrong).unwrap(), 0.0);
        // scores 4 (known ok), 3 (unknown), 2 (known ok), 1 (unknown):
        // points (0,.5) (.5,.5) (.5,1) (1,1) -> .25 + .5 = .75
        let four = [
            sample(4.0, Some(0), 0),
            sample(3.0, None, 0),
            sample(2.0, Some(1), 1),
            sample(1.0, None, 1),
        ];
        assert_abs_diff_eq!(oscr(&four).unwrap(), 0.75, epsilon = 1e-15);
        assert!(oscr(&perfect[..2]).is_err());
    }

    #[test]
    fn openness_endpoints() {
        assert_abs_diff_eq!(openness(15, 30, 15).unwrap(), 0.1835, epsilon = 5e-4);
        assert_abs_diff_eq!(openness(15, 100, 15).unwrap(), 0.4892, epsilon = 5e-4);
        assert_eq!(openness(6, 6, 6).unwrap(), 0.0);
        assert!(openness(0, 6, 6).is_err());
        assert!(openness(6, 5, 6).is_err());
    }

    #[test]
    fn report_without_unknowns() {
        let s = [sample(1.0, Some(0), 0), sample(0.5, Some(1), 0)];
        let r = evaluate(&s, 0.0, 2, None).unwrap();
        assert_eq!(r.closed_accuracy, Some(0.5));
        assert!(r.auroc.is_none() && r.oscr.is_none() && r.tnr_at_tpr95.is_none());
        assert!(r.macro_f1.is_some());
    }
}
