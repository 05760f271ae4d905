//! Differentially private split learning with patch-level CutMix.
//!
//! The crate simulates clients, a mixer and a server training a split vision
//! transformer, applies the Gaussian mechanism to cut-layer uploads, computes
//! closed-form Rényi-DP budgets for plain, Mixup and CutMix uploads, and runs
//! a reconstruction attack to measure what each scheme leaks.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod interpolation;
pub mod mechanism;
pub mod mixer;
pub mod protocol;
pub mod rdp;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use attack::{AttackScheme, LeakageReport};
pub use config::{ExperimentConfig, MixMode};
pub use data::Dataset;
pub use error::{Error, Result};
pub use interpolation::{MixedBatchItem, SmashedData};
pub use mechanism::PrivacyParams;
pub use mixer::{LambdaMode, MixingRatios, PatchMask};
pub use protocol::{RoundMessage, RoundMetrics, SimulationState, TrafficLog};
pub use rdp::RdpReport;
pub use rng::SeededRng;
pub use tensor::Tensor;
