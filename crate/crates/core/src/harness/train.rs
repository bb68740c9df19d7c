use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{augment_image, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Scalar, Tensor};

use super::config::TrainConfig;
use super::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the (augmented) batches seen during the epoch.
    pub accuracy: f64,
    /// True-class probabilities clamped at the log floor.
    pub clamped: usize,
}

/// Draw seed for augmenting sample `index` during `epoch`.
pub fn augment_seed(config: &TrainConfig, epoch: u64, index: usize) -> u64 {
    derive_seed(derive_seed(config.augment.seed, epoch), index as u64)
}

/// Augmentation applies to `H×W×1` images only; other samples pass through.
pub fn augment_sample(config: &TrainConfig, data: &Dataset, sample: &[f64], seed: u64) -> Result<Vec<f64>> {
    match data.sample_shape[..] {
        [h, w, 1] if config.augment.max_ops > 0 => augment_image(sample, h, w, &config.augment, seed),
        _ => Ok(sample.to_vec()),
    }
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    if err.is_numerical() {
        Error::Diverged { epoch, batch }
    } else {
        err
    }
}

/// Build a model from `config` and train it on `data`, whose labels must
/// already be the known-class indices `0..m`.
pub fn train<T: Scalar>(config: &TrainConfig, data: &Dataset) -> Result<(Model<T>, Vec<EpochLog>)> {
    let mut model = Model::new(config.clone())?;
    let log = train_model(&mut model, data)?;
    Ok((model, log))
}

/// Mini-batch SGD with momentum. Each epoch visits the samples in a
/// SplitMix64 shuffle seeded from the config seed and epoch number.
pub fn train_model<T: Scalar>(model: &mut Model<T>, data: &Dataset) -> Result<Vec<EpochLog>> {
    model.check_dataset(data)?;
    let config = model.config().clone();
    if data.class_count != config.head.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, head expects {}",
            data.class_count, config.head.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let n = data.len();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(derive_seed(config.seed, 1000 + epoch as u64)).shuffle(&mut order);
        let (mut loss_sum, mut correct, mut clamped) = (0.0, 0usize, 0usize);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let mut values = Vec::with_capacity(idx.len() * data.sample_len());
            for &i in idx {
                let seed = augment_seed(&config, epoch as u64, i);
                values.extend(augment_sample(&config, data, data.sample(i), seed)?.into_iter().map(T::of_f64));
            }
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&data.sample_shape);
            let x = Tensor::new(shape, values)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (loss, hits, clamps) = step(model, x, &labels, lr).map_err(|e| diverged(e, epoch, batch))?;
            loss_sum += loss * idx.len() as f64;
            correct += hits;
            clamped += clamps;
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            clamped,
        };
        info!(
            "epoch {:>3}  lr {:.4}  loss {:.5}  acc {:.4}",
            entry.epoch, entry.lr, entry.loss, entry.accuracy
        );
        if clamped > 0 {
            debug!("epoch {epoch}: {clamped} true-class probabilities hit the log floor");
        }
        logs.push(entry);
    }
    Ok(logs)
}

fn step<T: Scalar>(model: &mut Model<T>, x: Tensor<T>, labels: &[usize], lr: f64) -> Result<(f64, usize, usize)> {
    let momentum = model.config().momentum;
    let m = model.num_classes();
    let backbone = model.backbone().clone();
    let head = model.head().clone();
    let graph = model.graph_mut();
    graph.reset();
    let xn = graph.input(x)?;
    let z = backbone.forward(graph, xn)?;
    let out = head.forward(graph, z)?;
    let (loss, clamped) = head.loss(graph, &out, labels)?;
    let loss_value = graph.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    let probs = graph.value(out.probs).to_f64_vec();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| crate::head::predict_label(&probs[i * m..(i + 1) * m]) == y)
        .count();
    graph.backward(loss)?;
    graph.reset();
    graph.sgd_step(lr, momentum)?;
    if graph.params().iter().any(|p| !p.value.is_finite()) {
        return Err(Error::NonFinite { op: "sgd_step".into() });
    }
    Ok((loss_value, hits, clamped))
}
