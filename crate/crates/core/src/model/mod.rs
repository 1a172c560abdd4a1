//! Policy network: hindsight encoder, backbone, joint expert and heads.

pub mod backbone;
pub mod expert;
pub mod hif;
pub mod hindsight;
pub mod layers;

pub use backbone::{patch_matrix, Backbone, BackboneDims, LatentPair};
pub use expert::{AdaLn, ExpertBlock, ExpertDims, Heads, JointExpert};
pub use hif::{
    compose_loss, EmbeddingMode, Forward, HifModel, LossVars, Losses, ModelConfig, Objective,
    Observation, Targets,
};
pub use hindsight::HindsightEncoder;
pub use layers::{Linear, Rope};
