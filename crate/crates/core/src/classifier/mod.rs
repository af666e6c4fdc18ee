//! CNN classifier, training loop and CFO-gated hybrid decisions.

pub mod gradcheck;
pub mod hybrid;
pub mod layers;
pub mod network;
pub mod spec;
pub mod tensor;
pub mod train;

pub use gradcheck::gradient_check;
pub use hybrid::{argmax, decide_hybrid, CfoDatabase, HybridDecision, SoftmaxOutput, DEFAULT_LAMBDA};
pub use network::Network;
pub use spec::{CnnSpec, LayerSpec};
pub use tensor::{Real, Tensor};
pub use train::{train, EpochStats, Model, TrainConfig, TrainReport, Trained, TrainingSet};
