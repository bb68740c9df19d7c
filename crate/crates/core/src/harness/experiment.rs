use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OpenSetSplit};
use crate::error::{Error, Result};
use crate::metrics::{ClassCounts, EvalReport};
use crate::tensor::Scalar;

use super::config::TrainConfig;
use super::model::Model;
use super::pipeline::{run_unknown_inference_pipeline, PipelineOutput, ScoreAuroc};
use super::train::{train, EpochLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub split: OpenSetSplit,
    pub eval: EvalReport,
    pub score_auroc: ScoreAuroc,
    pub threshold: f64,
    pub train_acceptance: f64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: Option<f64>,
    /// Unbiased across trials; 0 for a single trial.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub trials: Vec<TrialReport>,
    pub summary: Vec<MetricSummary>,
}

fn summarize(name: &str, values: Vec<Option<f64>>) -> MetricSummary {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() {
        return MetricSummary {
            metric: name.to_string(),
            mean: None,
            std: None,
        };
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let std = if present.len() > 1 {
        (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricSummary {
        metric: name.to_string(),
        mean: Some(mean),
        std: Some(std),
    }
}

impl ExperimentReport {
    pub fn new(config: TrainConfig, trials: Vec<TrialReport>) -> Self {
        let mut summary = Vec::new();
        if let Some(first) = trials.first() {
            for (k, (name, _)) in first.eval.fields().iter().enumerate() {
                summary.push(summarize(name, trials.iter().map(|t| t.eval.fields()[k].1).collect()));
            }
            for (name, pick) in [
                ("auroc_s1", (|a: &ScoreAuroc| a.s1) as fn(&ScoreAuroc) -> Option<f64>),
                ("auroc_s2", |a| a.s2),
                ("auroc_s3", |a| a.s3),
                ("auroc_fused", |a| a.fused),
            ] {
                summary.push(summarize(name, trials.iter().map(|t| pick(&t.score_auroc)).collect()));
            }
        }
        ExperimentReport { config, trials, summary }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table of means and standard deviations.
    pub fn text_summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode {}  backbone {}  trials {}",
            self.config.head.mode,
            self.config.backbone.preset,
            self.trials.len()
        );
        let width = self.summary.iter().map(|s| s.metric.len()).max().unwrap_or(0);
        for s in &self.summary {
            match (s.mean, s.std) {
                (Some(m), Some(sd)) => {
                    let _ = writeln!(out, "{:<width$}  {:>7.4} ± {:.4}", s.metric, m, sd);
                }
                _ => {
                    let _ = writeln!(out, "{:<width$}  {:>7}", s.metric, "n/a");
                }
            }
        }
        out
    }
}

/// Everything one trial produces.
pub struct TrialOutcome<T: Scalar = f64> {
    pub model: Model<T>,
    pub pipeline: PipelineOutput,
    pub report: TrialReport,
}

/// Partition both datasets by `split`, train on the known training classes
/// and evaluate on the full test set.
pub fn run_trial<T: Scalar>(
    template: &TrainConfig,
    train_full: &Dataset,
    test_full: &Dataset,
    split: &OpenSetSplit,
) -> Result<TrialOutcome<T>> {
    if train_full.class_count != test_full.class_count {
        return Err(Error::invalid(format!(
            "train has {} classes, test has {}",
            train_full.class_count, test_full.class_count
        )));
    }
    let (known_train, _) = split.partition(train_full)?;
    let (known_test, unknown_test) = split.partition(test_full)?;
    let mut config = template.clone();
    config.head.num_classes = split.num_known();
    config.split = Some(split.clone());
    info!(
        "trial seed {}: known {:?}, {} training samples",
        split.trial_seed,
        split.known_classes,
        known_train.len()
    );
    let (mut model, epochs) = train::<T>(&config, &known_train)?;
    let present: usize = {
        let counts = test_full.class_counts();
        counts.iter().filter(|&&c| c > 0).count()
    };
    let counts = ClassCounts {
        train: split.num_known(),
        test: present.max(split.num_known()),
        target: split.num_known(),
    };
    let pipeline = run_unknown_inference_pipeline(&mut model, &known_train, &known_test, &unknown_test, Some(counts))?;
    let report = TrialReport {
        split: split.clone(),
        eval: pipeline.report.clone(),
        score_auroc: pipeline.score_auroc,
        threshold: pipeline.stats.threshold()?,
        train_acceptance: pipeline.train_acceptance(),
        epochs,
    };
    Ok(TrialOutcome {
        model,
        pipeline,
        report,
    })
}

pub fn run_experiment(
    template: &TrainConfig,
    train_full: &Dataset,
    test_full: &Dataset,
    splits: &[OpenSetSplit],
) -> Result<ExperimentReport> {
    let trials = splits
        .iter()
        .map(|s| run_trial::<f64>(template, train_full, test_full, s).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::new(template.clone(), trials))
}
