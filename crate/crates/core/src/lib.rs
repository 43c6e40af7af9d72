//! Detection of adversarial clients in simulated federated learning.
//!
//! Client updates are scored by their distance from a principal subspace
//! learned during a clean start-up phase; the per-round scores are reduced
//! to ranks, mapped to exact normal scores and monitored with a bank of
//! CUSUM charts whose control limit is calibrated by simulation.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod calibration;
mod error;
pub mod experiment;
pub mod fedsim;
pub mod linalg;
pub mod monitor;
pub mod rng;

pub use attacks::{AttackKind, AttackSpec, Attacker, LabelFlip, NoiseScale};
pub use calibration::{estimate_arl, find_limit, ArlEstimate, CalibrationConfig, LimitSearch};
pub use error::{Error, Result};
pub use experiment::{run_experiment, run_lowrank_diagnostic, Experiment, ExperimentConfig, Preset, RunReport};
pub use fedsim::{ClientDataset, Dataset, Federation, LossModel, ModelSpec, RoundRecord, TrainingConfig};
pub use linalg::{
    explained_variance_profile, project_residual, truncated_pca, ParamVector, SubspaceBasis, UpdateBuffer,
};
pub use monitor::{Allowance, CusumBank, MonitorDecision, RankCusum, RankVector, Statistic};
pub use rng::SeedTree;
