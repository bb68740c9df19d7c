//! Classification heads.
//!
//! The reconstruction head keeps one linear-tanh-linear auto-encoder per known
//! class and turns per-pixel reconstruction errors into logits
//! (`-gamma * d`). All `m` auto-encoders run as one pixelwise operation: the
//! encoders form a single `D × m·k` matrix and the decoders a grouped
//! `m × k × D` product.
//!
//! The `linear`, `gcpl` and `rpl` heads are the comparison baselines.

mod ae;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId};
use crate::tensor::{Scalar, Tensor};

pub use ae::{
    classification_loss, distance, image_class_probs, image_probs_from_errors, pixel_class_probs, pixel_errors,
    predict_label, probs_from_errors, reconstruct, recon_error, softmax, ClassAe, LossValue, LOG_FLOOR,
};

/// Weight of the prototype / reciprocal regularizer in the baseline losses.
pub const BASELINE_REG_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Own-class reconstruction error is small (`gamma > 0`).
    Cssr,
    /// Own-class reconstruction error is large (`gamma < 0`).
    Rcssr,
    /// Global-average-pooled features into a linear SoftMax layer.
    Linear,
    /// Learned class prototypes, logits `-|gamma|·‖z-u‖²`.
    Gcpl,
    /// Learned reciprocal points, logits `+|gamma|·‖z-u‖²`.
    Rpl,
}

impl HeadMode {
    pub fn is_reconstruction(self) -> bool {
        matches!(self, HeadMode::Cssr | HeadMode::Rcssr)
    }

    pub fn default_gamma(self) -> f64 {
        match self {
            HeadMode::Cssr => 0.1,
            HeadMode::Rcssr => -0.1,
            HeadMode::Linear | HeadMode::Gcpl | HeadMode::Rpl => 1.0,
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Cssr => "cssr",
            HeadMode::Rcssr => "rcssr",
            HeadMode::Linear => "linear",
            HeadMode::Gcpl => "gcpl",
            HeadMode::Rpl => "rpl",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cssr" => HeadMode::Cssr,
            "rcssr" => HeadMode::Rcssr,
            "linear" => HeadMode::Linear,
            "gcpl" => HeadMode::Gcpl,
            "rpl" => HeadMode::Rpl,
            other => return Err(Error::invalid(format!("unknown mode `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorNorm {
    Mae,
    Mse,
}

impl FromStr for ErrorNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(ErrorNorm::Mae),
            "mse" => Ok(ErrorNorm::Mse),
            other => Err(Error::invalid(format!("unknown error norm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Pixelwise SoftMax, then average pooling.
    #[serde(rename = "sm-ap")]
    SmAp,
    /// Average-pool the logits, then one SoftMax.
    #[serde(rename = "ap-sm")]
    ApSm,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm-ap" => Ok(Strategy::SmAp),
            "ap-sm" => Ok(Strategy::ApSm),
            other => Err(Error::invalid(format!("unknown pooling strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub gamma: f64,
    pub error_norm: ErrorNorm,
    pub strategy: Strategy,
    pub num_classes: usize,
    pub latent_dim: usize,
}

impl HeadConfig {
    pub fn new(mode: HeadMode, num_classes: usize, latent_dim: usize) -> Self {
        HeadConfig {
            mode,
            gamma: mode.default_gamma(),
            error_norm: ErrorNorm::Mae,
            strategy: Strategy::SmAp,
            num_classes,
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 known classes, got {}", self.num_classes)));
        }
        if !(self.gamma.is_finite() && self.gamma != 0.0) {
            return Err(Error::invalid(format!("gamma must be finite and non-zero, got {}", self.gamma)));
        }
        match self.mode {
            HeadMode::Cssr if self.gamma < 0.0 => {
                Err(Error::invalid(format!("cssr needs gamma > 0, got {}", self.gamma)))
            }
            HeadMode::Rcssr if self.gamma > 0.0 => {
                Err(Error::invalid(format!("rcssr needs gamma < 0, got {}", self.gamma)))
            }
            m if m.is_reconstruction() && self.latent_dim == 0 => {
                Err(Error::invalid("latent_dim must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum HeadParams {
    Reconstruction { encoder: ParamId, decoder: ParamId },
    Linear { weight: ParamId, bias: ParamId },
    Points { points: ParamId, margins: Option<ParamId> },
}

#[derive(Clone, Debug)]
pub struct Head {
    config: HeadConfig,
    feature_dim: usize,
    params: HeadParams,
}

/// Nodes produced by one head forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// Image class probabilities `[N, m]`.
    pub probs: NodeId,
    /// Reconstruction heads: per-pixel class errors `[N, H, W, m]`.
    /// Point heads: per-sample class distances `[N, m]`.
    pub distances: Option<NodeId>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of_f64(rng.gen_range(-bound..=bound))).collect()).expect("positive dims")
}

impl Head {
    /// Register the head's parameters (`head.*`) on `graph`.
    pub fn build<T: Scalar>(config: HeadConfig, feature_dim: usize, seed: u64, graph: &mut Graph<T>) -> Result<Self> {
        config.validate()?;
        let (m, k, d) = (config.num_classes, config.latent_dim, feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let params = match config.mode {
            HeadMode::Cssr | HeadMode::Rcssr => HeadParams::Reconstruction {
                encoder: graph.add_param("head.encoder", uniform(&mut rng, vec![d, m * k], d))?,
                decoder: graph.add_param("head.decoder", uniform(&mut rng, vec![m, k, d], k))?,
            },
            HeadMode::Linear => HeadParams::Linear {
                weight: graph.add_param("head.weight", uniform(&mut rng, vec![d, m], d))?,
                bias: graph.add_param("head.bias", uniform(&mut rng, vec![m], d))?,
            },
            HeadMode::Gcpl | HeadMode::Rpl => HeadParams::Points {
                points: graph.add_param("head.points", uniform(&mut rng, vec![1, m * d], 1))?,
                margins: if config.mode == HeadMode::Rpl {
                    Some(graph.add_param("head.margins", Tensor::full(vec![m, 1], T::one()))?)
                } else {
                    None
                },
            },
        };
        Ok(Head {
            config,
            feature_dim,
            params,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Forward from a `[N, H, W, D]` feature node.
    pub fn forward<T: Scalar>(&self, graph: &mut Graph<T>, z: NodeId) -> Result<HeadNodes> {
        let shape = graph.value(z).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.feature_dim {
            return Err(Error::shape(
                "head",
                format!("expected [N, H, W, {}], got {shape:?}", self.feature_dim),
            ));
        }
        let (n, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        let m = self.config.num_classes;
        match self.params {
            HeadParams::Reconstruction { encoder, decoder } => {
                let pixels = n * h * w;
                let zf = graph.reshape(z, vec![pixels, d])?;
                let enc = graph.use_param(encoder);
                let dec = graph.use_param(decoder);
                let pre = graph.matmul(zf, enc)?;
                let latent = graph.tanh(pre)?;
                let rec = graph.grouped_matmul(latent, dec)?;
                let tiled = graph.tile(zf, m)?;
                let diff = graph.sub(rec, tiled)?;
                let elem = match self.config.error_norm {
                    ErrorNorm::Mae => graph.abs(diff)?,
                    ErrorNorm::Mse => graph.mul(diff, diff)?,
                };
                let elem = graph.reshape(elem, vec![pixels * m, d])?;
                let err = graph.sum_last_axis(elem)?;
                let err = graph.reshape(err, vec![n, h, w, m])?;
                let logits = graph.scale(err, -self.config.gamma)?;
                let probs = match self.config.strategy {
                    Strategy::SmAp => {
                        let p = graph.softmax(logits)?;
                        graph.global_avg_pool(p)?
                    }
                    Strategy::ApSm => {
                        let pooled = graph.global_avg_pool(logits)?;
                        graph.softmax(pooled)?
                    }
                };
                Ok(HeadNodes {
                    probs,
                    distances: Some(err),
                })
            }
            HeadParams::Linear { weight, bias } => {
                let pooled = graph.global_avg_pool(z)?;
                let wn = graph.use_param(weight);
                let bn = graph.use_param(bias);
                let logits = graph.matmul(pooled, wn)?;
                let logits = graph.add_row(logits, bn)?;
                let probs = graph.softmax(logits)?;
                Ok(HeadNodes { probs, distances: None })
            }
            HeadParams::Points { points, .. } => {
                let pooled = graph.global_avg_pool(z)?;
                let tiled = graph.tile(pooled, m)?;
                let ones = graph.input(Tensor::full(vec![n, 1], T::one()))?;
                let pn = graph.use_param(points);
                let centres = graph.matmul(ones, pn)?;
                let diff = graph.sub(tiled, centres)?;
                let sq = graph.mul(diff, diff)?;
                let sq = graph.reshape(sq, vec![n * m, d])?;
                let dist = graph.sum_last_axis(sq)?;
                let dist = graph.reshape(dist, vec![n, m])?;
                let sign = if self.config.mode == HeadMode::Gcpl { -1.0 } else { 1.0 };
                let logits = graph.scale(dist, sign * self.config.gamma.abs())?;
                let probs = graph.softmax(logits)?;
                Ok(HeadNodes {
                    probs,
                    distances: Some(dist),
                })
            }
        }
    }

    /// Mean negative log-likelihood of `labels` (0-based) plus the baseline
    /// regularizer where one applies. Returns the loss node and how many
    /// true-class probabilities were clamped at [`LOG_FLOOR`].
    pub fn loss<T: Scalar>(&self, graph: &mut Graph<T>, out: &HeadNodes, labels: &[usize]) -> Result<(NodeId, usize)> {
        let m = self.config.num_classes;
        let n = labels.len();
        if graph.value(out.probs).shape() != [n, m] {
            return Err(Error::shape(
                "loss",
                format!("{} labels for probabilities {:?}", n, graph.value(out.probs).shape()),
            ));
        }
        let mut onehot = vec![T::zero(); n * m];
        for (i, &y) in labels.iter().enumerate() {
            if y >= m {
                return Err(Error::invalid(format!("label {y} outside {m} known classes")));
            }
            onehot[i * m + y] = T::one();
        }
        let clamped = {
            let p = graph.value(out.probs).data();
            labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| p[i * m + y].as_f64() < LOG_FLOOR)
                .count()
        };
        let onehot = graph.input(Tensor::new(vec![n, m], onehot)?)?;
        let logp = graph.log(out.probs, LOG_FLOOR)?;
        let picked = graph.mul(logp, onehot)?;
        let total = graph.sum(picked)?;
        let mut loss = graph.scale(total, -1.0 / n as f64)?;

        if let (HeadParams::Points { margins, .. }, Some(dist)) = (self.params, out.distances) {
            let own = graph.mul(dist, onehot)?;
            let reg = match margins {
                // prototype loss: squared distance to the own-class point
                None => graph.sum(own)?,
                // reciprocal bound: (d_c - R_c)^2
                Some(margins) => {
                    let own = graph.sum_last_axis(own)?;
                    let own = graph.reshape(own, vec![n, 1])?;
                    let r = graph.use_param(margins);
                    let r = graph.matmul(onehot, r)?;
                    let gap = graph.sub(own, r)?;
                    let sq = graph.mul(gap, gap)?;
                    graph.sum(sq)?
                }
            };
            let reg = graph.scale(reg, BASELINE_REG_WEIGHT / n as f64)?;
            loss = graph.add(loss, reg)?;
        }
        Ok((loss, clamped))
    }

    /// Per-class auto-encoders as plain matrices (reconstruction heads only).
    pub fn class_aes<T: Scalar>(&self, graph: &Graph<T>) -> Option<Vec<ClassAe>> {
        let HeadParams::Reconstruction { encoder, decoder } = self.params else {
            return None;
        };
        let (m, k, d) = (self.config.num_classes, self.config.latent_dim, self.feature_dim);
        let enc = graph.param_value(encoder).to_f64_vec();
        let dec = graph.param_value(decoder).to_f64_vec();
        let aes = (0..m)
            .map(|i| {
                let mut e = vec![0.0; k * d];
                let mut r = vec![0.0; d * k];
                for j in 0..k {
                    for c in 0..d {
                        e[j * d + c] = enc[c * m * k + i * k + j];
                        r[c * k + j] = dec[(i * k + j) * d + c];
                    }
                }
                ClassAe::new(d, k, e, r).expect("dimensions consistent")
            })
            .collect();
        Some(aes)
    }

    /// Overwrite the stacked auto-encoder weights from per-class matrices.
    pub fn set_class_aes<T: Scalar>(&self, graph: &mut Graph<T>, aes: &[ClassAe]) -> Result<()> {
        let HeadParams::Reconstruction { encoder, decoder } = self.params else {
            return Err(Error::invalid("head has no auto-encoders"));
        };
        let (m, k, d) = (self.config.num_classes, self.config.latent_dim, self.feature_dim);
        if aes.len() != m || aes.iter().any(|a| a.latent_dim != k || a.feature_dim != d) {
            return Err(Error::shape("set_class_aes", format!("expected {m} auto-encoders with D={d}, k={k}")));
        }
        let mut enc = vec![T::zero(); d * m * k];
        let mut dec = vec![T::zero(); m * k * d];
        for (i, ae) in aes.iter().enumerate() {
            for j in 0..k {
                for c in 0..d {
                    enc[c * m * k + i * k + j] = T::of_f64(ae.encoder[j * d + c]);
                    dec[(i * k + j) * d + c] = T::of_f64(ae.decoder[c * k + j]);
                }
            }
        }
        graph.set_param(encoder, Tensor::new(vec![d, m * k], enc)?)?;
        graph.set_param(decoder, Tensor::new(vec![m, k, d], dec)?)
    }
}
