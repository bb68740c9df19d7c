//! Datasets, open-set class splits and training-time augmentation.

mod augment;
mod gauss;
mod glyphs;
mod idx;
mod split;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use augment::{apply_transform, augment_image, AugmentSpec, Transform};
pub use gauss::{gen_gaussian_2d, uniform_points};
pub use glyphs::{render_glyphs, GlyphSpec, GLYPH_CLASSES};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx};
pub use split::{make_open_split, OpenSetSplit};

/// Labelled samples stored row-major, one flattened sample after another.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::invalid(format!("sample shape {sample_shape:?} is empty")));
        }
        if inputs.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} input values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!("label {bad} outside {class_count} classes")));
        }
        Ok(Dataset {
            sample_shape,
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.inputs[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Batch tensor `[indices.len(), ...sample_shape]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::of_f64(v)));
        }
        Tensor::new(shape, data)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    #[serde(rename = "synthetic-2d")]
    Synthetic2d {
        means: Vec<[f64; 2]>,
        sigma: f64,
        n_per_class: usize,
        seed: u64,
    },
    IdxFiles {
        images: PathBuf,
        labels: PathBuf,
    },
}

/// Where a dataset comes from, plus what it is expected to contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub source: DataSource,
    pub class_count: usize,
    pub sample_shape: Vec<usize>,
}

impl DatasetManifest {
    /// Four classes at `(±2, ±2)`, σ = 0.4.
    pub fn four_gaussians(n_per_class: usize, seed: u64) -> Self {
        DatasetManifest {
            source: DataSource::Synthetic2d {
                means: vec![[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]],
                sigma: 0.4,
                n_per_class,
                seed,
            },
            class_count: 4,
            sample_shape: vec![2],
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let data = match &self.source {
            DataSource::Synthetic2d {
                means,
                sigma,
                n_per_class,
                seed,
            } => gen_gaussian_2d(means, *sigma, *n_per_class, *seed)?,
            DataSource::IdxFiles { images, labels } => load_idx(images, labels)?,
        };
        if data.sample_shape != self.sample_shape {
            return Err(Error::invalid(format!(
                "manifest expects samples of shape {:?}, loaded {:?}",
                self.sample_shape, data.sample_shape
            )));
        }
        if data.class_count > self.class_count {
            return Err(Error::invalid(format!(
                "manifest declares {} classes, data has labels up to {}",
                self.class_count,
                data.class_count - 1
            )));
        }
        Ok(Dataset {
            class_count: self.class_count,
            ..data
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![2], vec![0.0; 4], vec![0, 1], 2).is_ok());
        assert!(Dataset::new(vec![2], vec![0.0; 3], vec![0, 1], 2).is_err());
        assert!(Dataset::new(vec![2], vec![0.0; 4], vec![0, 2], 2).is_err());
    }

    #[test]
    fn subset_and_batch() {
        let d = Dataset::new(vec![2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![0, 1, 0], 2).unwrap();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.inputs, vec![4.0, 5.0, 0.0, 1.0]);
        assert_eq!(s.labels, vec![0, 0]);
        let b: Tensor<f64> = d.batch(&[1]).unwrap();
        assert_eq!(b.shape(), &[1, 2]);
        assert_eq!(d.class_counts(), vec![2, 1]);
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = DatasetManifest::four_gaussians(10, 3);
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("synthetic-2d"));
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.load().unwrap().len(), 40);
    }
}
