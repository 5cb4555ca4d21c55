//! Encoder-decoder pixel classifier with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use model::{BlockConfig, LayerParams, Network, NetworkConfig};
pub use optim::{sgd_step, Sgd, TrainConfig};
pub use tensor::Tensor;
pub use train::{
    argmax_labels, frame_to_tensor, infer, input_bands, train, TrainOutcome, TrainRecord,
    TrainingSet,
};
