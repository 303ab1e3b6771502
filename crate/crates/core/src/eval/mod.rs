//! Ground-truth evaluation against the synthetic world: per-rank relabel
//! accuracy, the proxy policy and the end-to-end experiments.

mod experiment;
mod policy;
mod rank;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::data::DataError;
use crate::embed::EmbedError;
use crate::fusion::FusionError;
use crate::relabel::RelabelError;
use crate::world::WorldError;

pub use experiment::{
    run_downstream, run_planted, ArmResult, ARM_BASE, ARM_DIAL, ARM_GAUSSIAN, ARM_WORD, DownstreamConfig, DownstreamOutcome, PlantedConfig, PlantedOutcome,
};
pub use policy::{
    evaluate_policy, examples_from_manifests, policy_accuracy, scene_features, slot_features, train_proxy_policy,
    CategoryScore, PolicyExample, ProxyConfig, ProxyPolicy, SuccessReport, SCENE_DIM,
};
pub use rank::{compute_rank_accuracy, RankReport, RankRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("malformed relabels: {0}")]
    MalformedRelabels(String),
    #[error("training data covers {0} action class(es); at least 2 are needed")]
    DegenerateTask(usize),
    #[error("episode {0} is not part of the world")]
    UnknownEpisode(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Relabel(#[from] RelabelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Combined report: relabel ranks, policy success and dataset sizes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<RankReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<SuccessReport>,
    #[serde(default)]
    pub dataset_sizes: std::collections::BTreeMap<String, usize>,
}
