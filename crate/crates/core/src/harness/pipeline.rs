//! Post-training unknown detection: class statistics on clean training data,
//! score calibration on augmented training data, then thresholded scoring of
//! test samples.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::head::HeadMode;
use crate::metrics::{auroc, evaluate, ClassCounts, EvalReport, ScoredSample};
use crate::rng::derive_seed;
use crate::scoring::{
    calibrate_scores, collect_class_stats, decide, fit_threshold, fused_score, normalized_scores, score_first_order,
    score_gram, score_recon, Decision, RawScores, ScoreStats,
};
use crate::tensor::Scalar;

use super::model::{Model, SampleOutput};
use super::train::augment_sample;

/// Stream index separating calibration draws from training draws.
const CALIBRATION_STREAM: u64 = 0xCA11_B8A7;

/// Mode-specific primary score and the number of degenerate pixels.
///
/// Reconstruction heads use the relative reconstruction score of the
/// predicted class. Baselines: max SoftMax probability (`linear`), negated
/// nearest-prototype distance (`gcpl`), farthest reciprocal-point distance
/// (`rpl`).
pub fn primary_score(mode: HeadMode, out: &SampleOutput) -> Result<(f64, usize)> {
    let c = out.predicted;
    Ok(match mode {
        HeadMode::Cssr | HeadMode::Rcssr => {
            let s = score_recon(&out.map, &out.class_errors(c), mode)?;
            (s.value, s.degenerate_pixels)
        }
        HeadMode::Linear => (out.probs[c], 0),
        HeadMode::Gcpl => (-out.distances[c], 0),
        HeadMode::Rpl => (out.distances[c], 0),
    })
}

pub fn raw_scores(mode: HeadMode, out: &SampleOutput, stats: &ScoreStats) -> Result<(RawScores, usize)> {
    let (primary, degenerate) = primary_score(mode, out)?;
    Ok((
        RawScores {
            primary,
            first_order: score_first_order(&out.map, out.predicted, stats)?,
            gram: score_gram(&out.map, out.predicted, stats)?,
        },
        degenerate,
    ))
}

fn raw_all(mode: HeadMode, outs: &[SampleOutput], stats: &ScoreStats) -> Result<Vec<RawScores>> {
    let mut degenerate = 0;
    let raws = outs
        .iter()
        .map(|o| {
            let (r, d) = raw_scores(mode, o, stats)?;
            degenerate += d;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    if degenerate > 0 {
        warn!("{degenerate} feature-map pixels had zero L1 norm and were scored as rejected");
    }
    Ok(raws)
}

/// Build calibrated, thresholded score statistics from the training set.
/// Also returns the fused scores of the clean training samples.
pub fn fit_score_stats<T: Scalar>(model: &mut Model<T>, train: &Dataset) -> Result<(ScoreStats, Vec<f64>)> {
    let config = model.config().clone();
    let mode = config.head.mode;

    let clean = model.infer(train)?;
    let grouped: Vec<_> = clean.iter().map(|o| (o.map.clone(), o.predicted)).collect();
    let mut stats = collect_class_stats(&grouped, model.num_classes(), config.scoring.gram_power)?;
    stats.weights = config.scoring.weights;
    drop(grouped);

    let calib_seed = derive_seed(config.augment.seed, CALIBRATION_STREAM);
    let augmented = model.infer_with(train, |i, s| augment_sample(&config, train, s, derive_seed(calib_seed, i as u64)))?;
    let augmented_raw = raw_all(mode, &augmented, &stats)?;
    drop(augmented);
    calibrate_scores(&mut stats, &augmented_raw)?;

    let train_fused = raw_all(mode, &clean, &stats)?
        .iter()
        .map(|r| fused_score(r, &stats))
        .collect::<Result<Vec<_>>>()?;
    stats.threshold = Some(fit_threshold(&train_fused, config.scoring.tpr)?);
    Ok((stats, train_fused))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub raw: RawScores,
    pub normalized: [f64; 3],
    pub fused: f64,
    pub predicted: usize,
    pub decision: Decision,
    /// Known-class index, `None` for unknown-class samples.
    pub true_label: Option<usize>,
    /// Mean per-pixel L1 norm of the feature map.
    pub mean_l1: f64,
}

impl SampleResult {
    pub fn scored(&self) -> ScoredSample {
        ScoredSample {
            score: self.fused,
            true_label: self.true_label,
            predicted: self.predicted,
        }
    }
}

/// Score every sample of `data`. Labels are taken as known-class indices
/// when `known` is true and ignored otherwise.
pub fn score_dataset<T: Scalar>(model: &mut Model<T>, stats: &ScoreStats, data: &Dataset, known: bool) -> Result<Vec<SampleResult>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let mode = model.config().head.mode;
    let threshold = stats.threshold()?;
    let outs = model.infer(data)?;
    let raws = raw_all(mode, &outs, stats)?;
    outs.iter()
        .zip(raws)
        .enumerate()
        .map(|(i, (o, raw))| {
            let fused = fused_score(&raw, stats)?;
            Ok(SampleResult {
                raw,
                normalized: normalized_scores(&raw, stats)?,
                fused,
                predicted: o.predicted,
                decision: decide(o.predicted, fused, threshold),
                true_label: known.then(|| data.labels[i]),
                mean_l1: o.map.mean_l1(),
            })
        })
        .collect()
}

/// AUROC of each raw score and of the fused score, known against unknown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreAuroc {
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub s3: Option<f64>,
    pub fused: Option<f64>,
}

impl ScoreAuroc {
    pub fn from_results(results: &[SampleResult]) -> Result<Self> {
        let pick = |f: &dyn Fn(&SampleResult) -> f64| -> Result<Option<f64>> {
            let known: Vec<f64> = results.iter().filter(|r| r.true_label.is_some()).map(f).collect();
            let unknown: Vec<f64> = results.iter().filter(|r| r.true_label.is_none()).map(f).collect();
            if known.is_empty() || unknown.is_empty() {
                Ok(None)
            } else {
                auroc(&known, &unknown).map(Some)
            }
        };
        Ok(ScoreAuroc {
            s1: pick(&|r| r.raw.primary)?,
            s2: pick(&|r| r.raw.first_order)?,
            s3: pick(&|r| r.raw.gram)?,
            fused: pick(&|r| r.fused)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub stats: ScoreStats,
    pub train_fused: Vec<f64>,
    pub results: Vec<SampleResult>,
    pub report: EvalReport,
    pub score_auroc: ScoreAuroc,
}

impl PipelineOutput {
    /// Fraction of clean training samples accepted at the fitted threshold.
    pub fn train_acceptance(&self) -> f64 {
        let t = self.stats.threshold.unwrap_or(f64::NEG_INFINITY);
        self.train_fused.iter().filter(|&&s| s >= t).count() as f64 / self.train_fused.len() as f64
    }
}

/// Evaluate already-scored samples.
pub fn report_for(results: &[SampleResult], stats: &ScoreStats, counts: Option<ClassCounts>) -> Result<(EvalReport, ScoreAuroc)> {
    let scored: Vec<ScoredSample> = results.iter().map(SampleResult::scored).collect();
    let report = evaluate(&scored, stats.threshold()?, stats.num_classes, counts)?;
    Ok((report, ScoreAuroc::from_results(results)?))
}

/// Fit statistics on `train`, then score and evaluate the known and unknown
/// test sets.
pub fn run_unknown_inference_pipeline<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    test_known: &Dataset,
    test_unknown: &Dataset,
    counts: Option<ClassCounts>,
) -> Result<PipelineOutput> {
    let (stats, train_fused) = fit_score_stats(model, train)?;
    let mut results = score_dataset(model, &stats, test_known, true)?;
    results.extend(score_dataset(model, &stats, test_unknown, false)?);
    let (report, score_auroc) = report_for(&results, &stats, counts)?;
    Ok(PipelineOutput {
        stats,
        train_fused,
        results,
        report,
        score_auroc,
    })
}
