//! Vehicle re-identification with large kernel attention and hybrid channel
//! attention, built on a small reverse-mode autograd engine.

pub mod attention;
pub mod data;
pub mod evaluation;
pub mod gradsuite;
pub mod model;
pub mod tensor;
pub mod training;

mod linalg;

pub use attention::{
    count_params_flops, decompose_large_kernel, eca_kernel_size, hca_forward, lka_forward, Cost, CostModel,
    Decomposition, HcaConfig, HcaParams, LkaConfig, LkaParams,
};
pub use model::{
    build_model, extract_features, forward_train, load_checkpoint, save_checkpoint, Branch, BranchOutput, ModelConfig,
    ModelError, ModelState,
};
pub use tensor::{Conv2dSpec, Tensor, TensorError};
