//! Small pre-LN transformer classifier for probing where a diffusion layer
//! helps, plus the synthetic tasks and analyses built around it.

// `!(x > 0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod model;
pub mod positions;
pub mod retention;
pub mod tasks;
pub mod train;
pub mod value;

pub use error::{Error, Result};
pub use model::{IntegrationPosition, Model, ModelConfig, PdeSettings};
pub use positions::{evaluate_positions, ProtocolConfig, RankingTable};
pub use retention::{estimate_retention, RetentionConfig, RetentionEstimate};
pub use tasks::{TaskDataset, TaskKind};
pub use train::{train, TrainConfig, TrainReport};
pub use value::{position_value, PositionValueWeights};
