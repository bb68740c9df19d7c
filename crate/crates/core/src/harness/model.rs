use crate::backbone::{split_feature_maps, Backbone, FeatureMap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{predict_label, Head};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

use super::config::TrainConfig;

/// Samples per inference batch.
pub const INFER_BATCH: usize = 64;

/// Backbone plus head, with their parameters on one graph.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    config: TrainConfig,
    graph: Graph<T>,
    backbone: Backbone,
    head: Head,
}

/// Everything inference produces for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub map: FeatureMap,
    pub probs: Vec<f64>,
    /// Reconstruction heads: per-pixel class errors, pixel-major
    /// (`H·W·m`). Point heads: class distances (`m`). Linear: empty.
    pub distances: Vec<f64>,
    pub predicted: usize,
}

impl SampleOutput {
    /// Per-pixel errors of one class (reconstruction heads).
    pub fn class_errors(&self, class: usize) -> Vec<f64> {
        let m = self.probs.len();
        self.distances.iter().skip(class).step_by(m).copied().collect()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut graph = Graph::new();
        let backbone = Backbone::build(config.backbone, &mut graph)?;
        let head = Head::build(config.head, config.backbone.feature_dim, derive_seed(config.seed, 1), &mut graph)?;
        Ok(Model {
            config,
            graph,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn num_classes(&self) -> usize {
        self.config.head.num_classes
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let expected = self.config.backbone.input_shape();
        if data.sample_shape != expected {
            return Err(Error::invalid(format!(
                "{} backbone takes samples of shape {expected:?}, dataset has {:?}",
                self.config.backbone.preset, data.sample_shape
            )));
        }
        Ok(())
    }

    /// Forward one batch without touching gradients.
    pub fn forward_batch(&mut self, x: &Tensor<T>) -> Result<Vec<SampleOutput>> {
        self.graph.reset();
        let result = (|| {
            let xn = self.graph.input(x.clone())?;
            let z = self.backbone.forward(&mut self.graph, xn)?;
            let out = self.head.forward(&mut self.graph, z)?;
            let maps = split_feature_maps(self.graph.value(z))?;
            let n = maps.len();
            let probs = self.graph.value(out.probs).to_f64_vec();
            let m = probs.len() / n;
            let dist = out.distances.map(|d| self.graph.value(d).to_f64_vec());
            Ok(maps
                .into_iter()
                .enumerate()
                .map(|(i, map)| {
                    let p = probs[i * m..(i + 1) * m].to_vec();
                    let distances = match &dist {
                        Some(all) => {
                            let per = all.len() / n;
                            all[i * per..(i + 1) * per].to_vec()
                        }
                        None => Vec::new(),
                    };
                    SampleOutput {
                        map,
                        predicted: predict_label(&p),
                        probs: p,
                        distances,
                    }
                })
                .collect())
        })();
        self.graph.reset();
        result
    }

    /// Inference over a whole dataset in index order.
    pub fn infer(&mut self, data: &Dataset) -> Result<Vec<SampleOutput>> {
        self.infer_with(data, |_, s| Ok(s.to_vec()))
    }

    /// Inference with each sample passed through `transform(index, sample)`
    /// first.
    pub fn infer_with(
        &mut self,
        data: &Dataset,
        mut transform: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<SampleOutput>> {
        self.check_dataset(data)?;
        let mut outputs = Vec::with_capacity(data.len());
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(INFER_BATCH) {
            let mut values = Vec::with_capacity(chunk.len() * data.sample_len());
            for &i in chunk {
                values.extend(transform(i, data.sample(i))?.into_iter().map(T::of_f64));
            }
            let mut shape = vec![chunk.len()];
            shape.extend_from_slice(&data.sample_shape);
            outputs.extend(self.forward_batch(&Tensor::new(shape, values)?)?);
        }
        Ok(outputs)
    }
}
