//! Small feature extractors producing an `H×W×D` semantic feature map.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Feature width of the `smallconv` preset.
pub const SMALLCONV_DIM: usize = 128;
/// Spatial size of `smallconv` inputs.
pub const SMALLCONV_SIDE: usize = 28;
const MLP_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackbonePreset {
    /// 2-D points through a 64-64 ReLU MLP; 1×1 feature maps.
    Mlp2d,
    /// Three conv-relu-pool stages on 28×28×1 images; 3×3×128 feature maps.
    SmallConv,
}

impl fmt::Display for BackbonePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackbonePreset::Mlp2d => "mlp2d",
            BackbonePreset::SmallConv => "smallconv",
        })
    }
}

impl FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp2d" => Ok(BackbonePreset::Mlp2d),
            "smallconv" => Ok(BackbonePreset::SmallConv),
            other => Err(Error::invalid(format!("unknown backbone preset `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    pub feature_dim: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn mlp2d(feature_dim: usize, seed: u64) -> Self {
        BackboneConfig {
            preset: BackbonePreset::Mlp2d,
            feature_dim,
            seed,
        }
    }

    pub fn smallconv(seed: u64) -> Self {
        BackboneConfig {
            preset: BackbonePreset::SmallConv,
            feature_dim: SMALLCONV_DIM,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.preset {
            BackbonePreset::Mlp2d if !(2..=64).contains(&self.feature_dim) => Err(Error::invalid(
                format!("mlp2d feature_dim must lie in [2, 64], got {}", self.feature_dim),
            )),
            BackbonePreset::SmallConv if self.feature_dim != SMALLCONV_DIM => Err(Error::invalid(
                format!("smallconv feature_dim is fixed at {SMALLCONV_DIM}, got {}", self.feature_dim),
            )),
            _ => Ok(()),
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.preset {
            BackbonePreset::Mlp2d => vec![2],
            BackbonePreset::SmallConv => vec![SMALLCONV_SIDE, SMALLCONV_SIDE, 1],
        }
    }

    /// `(H, W, D)` of the emitted feature map.
    pub fn output_geometry(&self) -> (usize, usize, usize) {
        match self.preset {
            BackbonePreset::Mlp2d => (1, 1, self.feature_dim),
            BackbonePreset::SmallConv => {
                let side = SMALLCONV_SIDE / 2 / 2 / 2;
                (side, side, SMALLCONV_DIM)
            }
        }
    }
}

/// One sample's feature grid, stored pixel-major (`D` contiguous values per
/// pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if values.len() != height * width * channels {
            return Err(Error::shape(
                "feature_map",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "feature map".into(),
            });
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            values,
        })
    }

    /// A 1×1 map holding a single vector.
    pub fn from_vector(z: &[f64]) -> Result<Self> {
        Self::new(1, 1, z.len(), z.to_vec())
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.channels)
    }

    /// Mean L1 norm of the per-pixel vectors.
    pub fn mean_l1(&self) -> f64 {
        self.pixels().map(|z| z.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>()
            / self.pixel_count() as f64
    }

    pub fn abs(&self) -> FeatureMap {
        FeatureMap {
            values: self.values.iter().map(|v| v.abs()).collect(),
            ..self.clone()
        }
    }

    pub fn scaled(&self, factor: f64) -> FeatureMap {
        FeatureMap {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Dense { weight: ParamId, bias: ParamId, relu: bool },
    ConvBlock { kernel: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
}

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("positive dims")
}

impl Backbone {
    /// Register the preset's parameters (named `backbone.<i>.weight|bias`) on
    /// `graph`, initialised uniformly in `±1/sqrt(fan_in)` from the config
    /// seed.
    pub fn build<T: Scalar>(config: BackboneConfig, graph: &mut Graph<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        match config.preset {
            BackbonePreset::Mlp2d => {
                let dims = [2, MLP_HIDDEN, MLP_HIDDEN, config.feature_dim];
                for (i, pair) in dims.windows(2).enumerate() {
                    let (fan_in, out) = (pair[0], pair[1]);
                    let weight = graph.add_param(
                        format!("backbone.{i}.weight"),
                        uniform_tensor(&mut rng, vec![fan_in, out], fan_in),
                    )?;
                    let bias = graph.add_param(
                        format!("backbone.{i}.bias"),
                        uniform_tensor(&mut rng, vec![out], fan_in),
                    )?;
                    layers.push(Layer::Dense {
                        weight,
                        bias,
                        relu: i + 2 < dims.len(),
                    });
                }
            }
            BackbonePreset::SmallConv => {
                let channels = [1, 32, 64, SMALLCONV_DIM];
                for (i, pair) in channels.windows(2).enumerate() {
                    let (cin, cout) = (pair[0], pair[1]);
                    let fan_in = 9 * cin;
                    let kernel = graph.add_param(
                        format!("backbone.{i}.weight"),
                        uniform_tensor(&mut rng, vec![3, 3, cin, cout], fan_in),
                    )?;
                    let bias = graph.add_param(
                        format!("backbone.{i}.bias"),
                        uniform_tensor(&mut rng, vec![cout], fan_in),
                    )?;
                    layers.push(Layer::ConvBlock { kernel, bias });
                }
            }
        }
        Ok(Backbone { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor<impl Scalar>) -> Result<()> {
        let expected = self.config.input_shape();
        if x.rank() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            return Err(Error::shape(
                "backbone",
                format!(
                    "{} expects [N, {}], got {:?}",
                    self.config.preset,
                    expected.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "),
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Differentiable forward pass: `[N, ...input]` to `[N, H, W, D]`.
    pub fn forward<T: Scalar>(&self, graph: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        self.check_input(graph.value(x))?;
        let n = graph.value(x).shape()[0];
        let mut h = x;
        for layer in &self.layers {
            match *layer {
                Layer::Dense { weight, bias, relu } => {
                    let w = graph.use_param(weight);
                    let b = graph.use_param(bias);
                    h = graph.matmul(h, w)?;
                    h = graph.add_row(h, b)?;
                    if relu {
                        h = graph.relu(h)?;
                    }
                }
                Layer::ConvBlock { kernel, bias } => {
                    let k = graph.use_param(kernel);
                    let b = graph.use_param(bias);
                    h = graph.conv2d(h, k, 1, 1)?;
                    h = graph.add_row(h, b)?;
                    h = graph.relu(h)?;
                    h = graph.max_pool2x2(h)?;
                }
            }
        }
        if self.config.preset == BackbonePreset::Mlp2d {
            h = graph.reshape(h, vec![n, 1, 1, self.config.feature_dim])?;
        }
        Ok(h)
    }
}

/// Split a `[N, H, W, D]` tensor into per-sample feature maps.
pub fn split_feature_maps<T: Scalar>(z: &Tensor<T>) -> Result<Vec<FeatureMap>> {
    if z.rank() != 4 {
        return Err(Error::shape("feature_maps", format!("expected [N,H,W,D], got {:?}", z.shape())));
    }
    let (n, h, w, d) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
    let per = h * w * d;
    (0..n)
        .map(|i| FeatureMap::new(h, w, d, z.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Inference-only feature extraction; leaves parameters untouched and the
/// tape empty.
pub fn extract_features<T: Scalar>(
    backbone: &Backbone,
    graph: &mut Graph<T>,
    inputs: &Tensor<T>,
) -> Result<Vec<FeatureMap>> {
    backbone.check_input(inputs)?;
    graph.reset();
    let x = graph.input(inputs.clone())?;
    let z = backbone.forward(graph, x)?;
    let maps = split_feature_maps(graph.value(z));
    graph.reset();
    maps
}
