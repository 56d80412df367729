//! Efficient, imperceptible adversarial attacks on 3D point-cloud classifiers.
//!
//! The attack alternates between two phases. While the current cloud is still
//! classified correctly it walks down the normalized margin-loss gradient
//! (IN phase). Once it is adversarial it reduces a set of imperceptibility
//! regularizers along directions made orthogonal to the loss gradient and to
//! each other by Gram-Schmidt (OUT phase), keeping the best adversarial
//! iterate seen so far.
//!
//! Around the attack live the pieces needed to run it end to end: point-cloud
//! geometry ([`geometry`]), the distance metrics and their gradients
//! ([`metrics`]), a small max-pooling classifier with hand-written
//! backpropagation ([`classifier`]), a query-based black-box variant
//! ([`blackbox`]), input-purification defenses ([`defense`]) and the result
//! aggregation used for reporting ([`eval`]).

pub mod attack;
pub mod blackbox;
pub mod classifier;
pub mod cli;
pub mod defense;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod metrics;
pub(crate) mod seed;
pub(crate) mod vecmath;

pub use attack::{AttackConfig, AttackResult, Phase, StepSchedule, WhiteBoxModel};
pub use classifier::{ClassifierParams, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{NeighborTable, PointCloud};
pub use metrics::{GradientField, MetricId, MetricValues};
