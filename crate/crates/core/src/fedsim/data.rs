use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Labelled samples with uniform feature dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch { expected: dim * labels.len(), got: features.len() });
        }
        Ok(Self { dim, features, labels })
    }

    pub fn from_rows(rows: &[(Vec<f64>, usize)]) -> Result<Self> {
        let Some((first, _)) = rows.first() else {
            return Err(Error::EmptyDataset);
        };
        let dim = first.len();
        let mut features = Vec::with_capacity(dim * rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (x, y) in rows {
            if x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
            }
            features.extend_from_slice(x);
            labels.push(*y);
        }
        Self::new(dim, features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    pub fn all_features(&self) -> &[f64] {
        &self.features
    }

    pub fn all_features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset { dim: self.dim, features, labels }
    }
}

/// One client's private data. Client ids are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
}

impl ClientDataset {
    pub fn new(client_id: usize, data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { client_id, data })
    }
}

/// Random equal-size disjoint split into `clients` parts; the remainder is dropped.
pub fn make_iid_partition(dataset: &Dataset, clients: usize, rng: &mut Stream) -> Result<Vec<ClientDataset>> {
    if clients == 0 || clients > dataset.len() {
        return Err(Error::config(format!("cannot split {} samples across {clients} clients", dataset.len())));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let share = dataset.len() / clients;
    order
        .chunks_exact(share)
        .take(clients)
        .enumerate()
        .map(|(k, idx)| ClientDataset::new(k + 1, dataset.subset(idx)))
        .collect()
}

/// Isotropic Gaussian mixture with one component per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    /// Expected distance between two class means.
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { classes: 10, dim: 64, separation: 3.0, noise_std: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    spec: MixtureSpec,
    means: Vec<f64>,
}

impl GaussianMixture {
    /// Draws class means from `rng`; the resulting population is fixed for the experiment.
    pub fn new(spec: MixtureSpec, rng: &mut Stream) -> Result<Self> {
        if spec.classes < 2 || spec.dim == 0 {
            return Err(Error::config("mixture needs at least 2 classes and a positive dimension"));
        }
        if !(spec.noise_std >= 0.0 && spec.separation >= 0.0) {
            return Err(Error::config("mixture scales must be nonnegative"));
        }
        // Means ~ N(0, s²/(2·dim)) so that E‖μ_a − μ_b‖² = s².
        let scale = spec.separation / (2.0 * spec.dim as f64).sqrt();
        let means = (0..spec.classes * spec.dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Ok(Self { spec, means })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn sample(&self, n: usize, rng: &mut Stream) -> Dataset {
        let d = self.spec.dim;
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..self.spec.classes);
            let mean = &self.means[y * d..(y + 1) * d];
            features.extend(mean.iter().map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.spec.noise_std * z
            }));
            labels.push(y);
        }
        Dataset { dim: d, features, labels }
    }
}
