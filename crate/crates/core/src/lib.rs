//! Linear adversarial MDPs with bandit feedback.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: the linear MDP model, loss sequences, tabular policies, an
//!   episode simulator and exact dynamic-programming oracles.
//! - [`optdesign`]: G-optimal experimental design with a Kiefer-Wolfowitz
//!   certificate.
//! - [`policycover`]: finite covers of linear softmax policies and the
//!   average-loss reduction used to find the best policy in hindsight.
//! - [`featureest`]: least-squares estimation of per-policy feature
//!   visitations from exploration data.
//! - [`glap`]: exponential weights over a policy cover with design-based
//!   exploration and optimistic value estimates.

pub mod featureest;
pub mod glap;
pub mod linalg;
pub mod mdp;
pub mod optdesign;
pub mod policycover;

pub use featureest::{EstimationConfig, EstimationError, FeatureTable};
pub use glap::{GlapConfig, GlapError, HedgeState, RunTrace};
pub use mdp::{
    InitialState, LinearMdp, LossSequence, MdpError, Policy, Trajectory, VisitationProfile,
};
pub use optdesign::{DesignError, DesignOptions, DesignWeights};
pub use policycover::{CoverMode, CoverPolicy, CoverSpec, PolicyCover, SoftmaxPolicy};
