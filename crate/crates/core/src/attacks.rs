//! Untargeted attacks: label flipping and feature noise act on the training
//! data of one client, model poisoning on the parameters it transmits.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::{AttackHook, ClientDataset};
use crate::linalg::ParamVector;
use crate::rng::{names, SeedTree, Stream};

/// How the second parameter of a Gaussian noise law is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    #[default]
    Variance,
    StdDev,
}

impl NoiseScale {
    pub fn std_dev(self, scale: f64) -> f64 {
        match self {
            NoiseScale::Variance => scale.sqrt(),
            NoiseScale::StdDev => scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelFlip {
    /// Fraction of the source class to relabel, in (0, 1].
    pub ratio: f64,
    pub source_class: usize,
    /// Fixed destination class; `None` picks a uniformly random other class per sample.
    #[serde(default)]
    pub target_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip(LabelFlip),
    SamplePoison {
        noise_mean: f64,
        noise_scale: f64,
        #[serde(default)]
        scale_is: NoiseScale,
    },
    ModelPoison {
        #[serde(default)]
        noise_mean: f64,
        noise_scale: f64,
        #[serde(default)]
        scale_is: NoiseScale,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    /// 1-based client id.
    pub target_client: usize,
    /// First round in which the attack is active.
    pub start_round: usize,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self { kind: AttackKind::None, target_client: 1, start_round: 1 }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, AttackKind::None)
    }

    pub fn validate(&self, clients: usize, classes: Option<usize>) -> Result<()> {
        if self.is_none() {
            return Ok(());
        }
        if self.start_round < 1 {
            return Err(Error::config("attack start_round must be at least 1"));
        }
        if !(1..=clients).contains(&self.target_client) {
            return Err(Error::config(format!("attack target_client {} outside 1..={clients}", self.target_client)));
        }
        match self.kind {
            AttackKind::None => {}
            AttackKind::LabelFlip(f) => {
                if !(f.ratio > 0.0 && f.ratio <= 1.0) {
                    return Err(Error::config("label flip ratio must lie in (0, 1]"));
                }
                let Some(classes) = classes else {
                    return Err(Error::config("label flipping needs a classification model"));
                };
                if f.source_class >= classes || f.target_class.is_some_and(|c| c >= classes || c == f.source_class) {
                    return Err(Error::config("label flip classes out of range or identical"));
                }
            }
            AttackKind::SamplePoison { noise_mean, noise_scale, .. }
            | AttackKind::ModelPoison { noise_mean, noise_scale, .. } => {
                if !(noise_scale >= 0.0 && noise_scale.is_finite() && noise_mean.is_finite()) {
                    return Err(Error::config("noise parameters must be finite with nonnegative scale"));
                }
            }
        }
        Ok(())
    }

    pub fn active(&self, t: usize, client: usize) -> bool {
        !self.is_none() && client == self.target_client && t >= self.start_round
    }
}

fn flip_count(ratio: f64, n: usize) -> usize {
    // Guard against 250 * (1/250) rounding up to 2.
    ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Relabels ⌈ratio·n⌉ randomly chosen samples of the source class, where n
/// is the number of source-class samples the client holds.
pub fn flip_labels(data: &ClientDataset, flip: &LabelFlip, classes: usize, rng: &mut Stream) -> Result<ClientDataset> {
    if !(flip.ratio > 0.0 && flip.ratio <= 1.0) {
        return Err(Error::config("label flip ratio must lie in (0, 1]"));
    }
    if classes < 2 {
        return Err(Error::config("label flipping needs at least two classes"));
    }
    let candidates: Vec<usize> = (0..data.data.len()).filter(|&i| data.data.label(i) == flip.source_class).collect();
    if candidates.is_empty() {
        return Err(Error::NothingToFlip(flip.source_class));
    }
    let count = flip_count(flip.ratio, candidates.len());
    let mut out = data.clone();
    let labels = out.data.labels_mut();
    for pick in index::sample(rng, candidates.len(), count) {
        let i = candidates[pick];
        labels[i] = match flip.target_class {
            Some(c) => c,
            None => {
                // Uniform over the classes other than the source.
                let c = rng.random_range(0..classes - 1);
                if c >= flip.source_class {
                    c + 1
                } else {
                    c
                }
            }
        };
    }
    Ok(out)
}

/// Adds i.i.d. `Normal(mean, std²)` noise to every feature.
pub fn poison_samples(data: &ClientDataset, mean: f64, std: f64, rng: &mut Stream) -> Result<ClientDataset> {
    let noise = Normal::new(mean, std).map_err(|e| Error::config(format!("sample noise: {e}")))?;
    let mut out = data.clone();
    for x in out.data.all_features_mut() {
        *x += noise.sample(rng);
    }
    Ok(out)
}

/// Adds i.i.d. `Normal(mean, std²)` noise to every parameter.
pub fn poison_model(params: ParamVector, mean: f64, std: f64, rng: &mut Stream) -> Result<ParamVector> {
    let noise = Normal::new(mean, std).map_err(|e| Error::config(format!("model noise: {e}")))?;
    let mut v = params.into_inner();
    for x in v.iter_mut() {
        *x += noise.sample(rng);
    }
    ParamVector::new(v)
}

/// Applies an [`AttackSpec`] inside the federation loop, drawing noise from
/// the per-round `attack` stream.
#[derive(Debug, Clone)]
pub struct Attacker {
    spec: AttackSpec,
    classes: usize,
    seeds: SeedTree,
}

impl Attacker {
    pub fn new(spec: AttackSpec, classes: usize, seeds: SeedTree) -> Self {
        Self { spec, classes, seeds }
    }

    fn stream(&self, t: usize, phase: u64) -> Stream {
        self.seeds.stream(names::ATTACK, &[t as u64, phase])
    }
}

impl AttackHook for Attacker {
    fn poison_data(&mut self, t: usize, client: usize, data: &ClientDataset) -> Result<Option<ClientDataset>> {
        if !self.spec.active(t, client) {
            return Ok(None);
        }
        match self.spec.kind {
            AttackKind::LabelFlip(f) => flip_labels(data, &f, self.classes, &mut self.stream(t, 0)).map(Some),
            AttackKind::SamplePoison { noise_mean, noise_scale, scale_is } => {
                poison_samples(data, noise_mean, scale_is.std_dev(noise_scale), &mut self.stream(t, 0)).map(Some)
            }
            _ => Ok(None),
        }
    }

    fn poison_transmission(&mut self, t: usize, client: usize, params: ParamVector) -> Result<ParamVector> {
        match self.spec.kind {
            AttackKind::ModelPoison { noise_mean, noise_scale, scale_is } if self.spec.active(t, client) => {
                poison_model(params, noise_mean, scale_is.std_dev(noise_scale), &mut self.stream(t, 1))
            }
            _ => Ok(params),
        }
    }
}
