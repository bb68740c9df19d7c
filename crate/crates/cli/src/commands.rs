use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cssr::data::{make_open_split, render_glyphs, write_idx, GlyphSpec};
use cssr::gradcheck::{end_to_end_check, primitive_suite};
use cssr::harness::{
    fit_score_stats, load_checkpoint, render_open_space_map, report_for, run_experiment, save_checkpoint,
    score_dataset, train as train_model, Bounds, Model, SampleResult,
};
use cssr::head::{ErrorNorm, HeadConfig, HeadMode};
use cssr::prototype::{canonical_witness, check_mae_monotonicity, find_mse_counterexample};
use cssr::scoring::{Decision, ScoreStats};
use serde_json::json;

use crate::inputs::{self, build_config, prepare, Inputs};
use crate::{Common, Usage};

const DEFAULT_CHECKPOINT: &str = "model.cssr";

fn require_checkpoint(a: &Common) -> Result<&Path> {
    a.checkpoint
        .as_deref()
        .ok_or_else(|| Usage("--checkpoint is required".into()).into())
}

fn read_checkpoint(path: &Path) -> Result<(Model, Option<ScoreStats>)> {
    load_checkpoint::<f64>(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            match std::io::stdout().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

/// Checkpoint plus the datasets it applies to. Flags may change the split
/// or fusion weights but not the network.
fn load_for_eval(a: &Common) -> Result<(Model, ScoreStats, Inputs)> {
    let (mut model, stats) = read_checkpoint(require_checkpoint(a)?)?;
    let config = model.config().clone();
    let inputs = prepare(a, &config)?;
    let mut stats = match stats {
        Some(s) => s,
        None => fit_score_stats(&mut model, &inputs.train)?.0,
    };
    if let Some(w) = inputs::weights(a)? {
        stats.weights = w;
    }
    Ok((model, stats, inputs))
}

fn score_all(model: &mut Model, stats: &ScoreStats, inputs: &Inputs) -> Result<Vec<SampleResult>> {
    let mut results = score_dataset(model, stats, &inputs.test_known, true)?;
    results.extend(score_dataset(model, stats, &inputs.test_unknown, false)?);
    Ok(results)
}

pub fn train(a: &Common) -> Result<()> {
    let mut config = build_config(a)?;
    let inputs = prepare(a, &config)?;
    config.head.num_classes = inputs.class_names.len();
    config.split = inputs.split.clone();
    config.validate().map_err(|e| Usage(e.to_string()))?;

    let (mut model, logs) = train_model::<f64>(&config, &inputs.train)?;
    for l in &logs {
        println!(
            "epoch {:>3}  lr {:.4}  loss {:.5}  acc {:.4}",
            l.epoch + 1,
            l.lr,
            l.loss,
            l.accuracy
        );
    }
    let (stats, train_fused) = fit_score_stats(&mut model, &inputs.train)?;
    let threshold = stats.threshold()?;
    let accepted = train_fused.iter().filter(|&&s| s >= threshold).count();
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT));
    save_checkpoint(&model, Some(&stats), &out)?;
    println!(
        "known classes {:?}; threshold {:.6} accepts {}/{} training samples",
        inputs.class_names,
        threshold,
        accepted,
        train_fused.len()
    );
    println!("saved {}", out.display());
    Ok(())
}

pub fn eval(a: &Common) -> Result<()> {
    let (mut model, stats, inputs) = load_for_eval(a)?;
    let results = score_all(&mut model, &stats, &inputs)?;
    let (report, score_auroc) = report_for(&results, &stats, inputs.counts)?;
    let doc = json!({
        "mode": model.config().head.mode.to_string(),
        "split": inputs.split,
        "threshold": stats.threshold()?,
        "weights": stats.weights,
        "eval": report,
        "score_auroc": score_auroc,
    });
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    let mut text = String::new();
    for (name, v) in report.fields() {
        let _ = writeln!(text, "{name:<16} {}", fmt_opt(v));
    }
    for (name, v) in [
        ("auroc_s1", score_auroc.s1),
        ("auroc_s2", score_auroc.s2),
        ("auroc_s3", score_auroc.s3),
        ("auroc_fused", score_auroc.fused),
    ] {
        let _ = writeln!(text, "{name:<16} {}", fmt_opt(v));
    }
    print!("{text}");
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn infer(a: &Common) -> Result<()> {
    let (mut model, stats, inputs) = load_for_eval(a)?;
    let results = score_all(&mut model, &stats, &inputs)?;
    let names = &inputs.class_names;
    let mut csv = String::from("index,set,true_class,predicted,decision,fused,s1,s2,s3\n");
    let known_len = inputs.test_known.len();
    for (i, r) in results.iter().enumerate() {
        let (set, truth) = if i < known_len {
            ("known", names[inputs.test_known.labels[i]].to_string())
        } else {
            let j = i - known_len;
            let label = match inputs.split {
                Some(_) => inputs.test_unknown.labels[j].to_string(),
                None => "background".to_string(),
            };
            ("unknown", label)
        };
        let decision = match r.decision {
            Decision::Known(c) => names[c].to_string(),
            Decision::Unknown => "unknown".to_string(),
        };
        let _ = writeln!(
            csv,
            "{i},{set},{truth},{},{decision},{},{},{},{}",
            names[r.predicted], r.fused, r.raw.primary, r.raw.first_order, r.raw.gram
        );
    }
    write_or_print(a.out.as_deref(), &csv)
}

pub fn stats(a: &Common) -> Result<()> {
    let path = require_checkpoint(a)?;
    let (mut model, _) = read_checkpoint(path)?;
    let config = model.config().clone();
    let inputs = prepare(a, &config)?;
    let (stats, train_fused) = fit_score_stats(&mut model, &inputs.train)?;
    let cal = stats.calibration()?;
    let threshold = stats.threshold()?;
    println!("classes {}  feature dim {}  gram power {}", stats.num_classes, stats.feature_dim, stats.gram_power);
    for k in 0..3 {
        println!("s{}  mean {:+.6e}  std {:.6e}  weight {}", k + 1, cal.means[k], cal.stds[k], stats.weights[k]);
    }
    if !stats.empty_classes.is_empty() {
        println!("classes without training predictions: {:?}", stats.empty_classes);
    }
    let accepted = train_fused.iter().filter(|&&s| s >= threshold).count();
    println!("threshold {threshold:.6} accepts {accepted}/{}", train_fused.len());
    let out = a.out.as_deref().unwrap_or(path);
    save_checkpoint(&model, Some(&stats), out)?;
    println!("saved {}", out.display());
    Ok(())
}

pub fn render2d(a: &Common) -> Result<()> {
    let (mut model, stats, _) = load_for_eval(a)?;
    if a.bound.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Usage(format!("--bound must be positive, got {}", a.bound)).into());
    }
    let map = render_open_space_map(&mut model, &stats, Bounds::square(a.bound), a.resolution)
        .map_err(|e| match e {
            cssr::Error::InvalidArgument(m) => anyhow::Error::from(Usage(m)),
            other => other.into(),
        })?;
    let prefix = a.out.clone().unwrap_or_else(|| PathBuf::from("open-space"));
    let accept = prefix.with_extension("pgm");
    let classes = prefix.with_extension("classes.pgm");
    fs::write(&accept, map.to_pgm())?;
    fs::write(&classes, map.class_pgm())?;
    println!(
        "accepted {:.1}% of {}x{} cells; wrote {} and {}",
        100.0 * map.accepted_fraction(),
        a.resolution,
        a.resolution,
        accept.display(),
        classes.display()
    );
    Ok(())
}

pub fn gradcheck(a: &Common) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let mut failed = 0;
    for (name, report) in primitive_suite(seed, 1e-6)? {
        println!("{:<16} max rel err {:.3e}  {}", name, report.max_relative_error(), verdict(report.passed()));
        failed += usize::from(!report.passed());
    }
    for mode in [HeadMode::Cssr, HeadMode::Rcssr] {
        let report = end_to_end_check(HeadConfig::new(mode, 3, 2), seed, 1e-4)?;
        println!("{:<16} max rel err {:.3e}  {}", format!("{mode} loss"), report.max_relative_error(), verdict(report.passed()));
        failed += usize::from(!report.passed());
    }
    if failed > 0 {
        return Err(cssr::Error::NonFinite {
            op: format!("gradient check ({failed} failing)"),
        }
        .into());
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

pub fn theorems(a: &Common) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let canonical = canonical_witness(ErrorNorm::Mse);
    println!("MSE witness (canonical):\n{canonical}");
    println!("counterexample: {}\n", canonical.is_counterexample());
    let found = find_mse_counterexample(seed)?;
    println!("MSE witness (random search, seed {seed}):\n{found}\n");
    let report = check_mae_monotonicity(200, 50, seed)?;
    println!("{report}");
    println!("MAE monotonicity: {}", if report.passed() { "pass" } else { "FAIL" });
    Ok(())
}

pub fn experiment(a: &Common) -> Result<()> {
    let mut config = build_config(a)?;
    let (train_full, test_full) = inputs::load_full(a, &config)?;
    if a.known_classes.is_some() {
        return Err(Usage("experiment draws random splits; use --n-known".into()).into());
    }
    let n = a.n_known.unwrap_or(train_full.class_count * 6 / 10);
    let first = a.trial.unwrap_or(0);
    let splits = (first..first + a.trials)
        .map(|t| make_open_split(train_full.class_count, n, t))
        .collect::<cssr::Result<Vec<_>>>()
        .map_err(|e| Usage(e.to_string()))?;
    config.head.num_classes = n;
    let report = run_experiment(&config, &train_full, &test_full, &splits)?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()? + "\n")?;
    }
    print!("{}", report.text_summary());
    Ok(())
}

pub fn synth(a: &Common) -> Result<()> {
    let dir = a.out.clone().ok_or_else(|| Usage("--out DIR is required".into()))?;
    if a.per_class.len() != 2 {
        return Err(Usage("--per-class takes two values: train,test".into()).into());
    }
    fs::create_dir_all(&dir)?;
    let seed = a.seed.unwrap_or(0);
    for (n, s, images, labels) in [
        (a.per_class[0], seed, inputs::TRAIN_IMAGES, inputs::TRAIN_LABELS),
        (a.per_class[1], cssr::rng::derive_seed(seed, 1), inputs::TEST_IMAGES, inputs::TEST_LABELS),
    ] {
        if n == 0 {
            return Err(Usage("--per-class values must be positive".into()).into());
        }
        let data = render_glyphs(&GlyphSpec::new(n, s))?;
        write_idx(&data, &dir.join(images), &dir.join(labels))?;
        println!("{}: {} samples", dir.join(images).display(), data.len());
    }
    Ok(())
}
