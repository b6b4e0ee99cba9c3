//! Weight-only post-training quantization with signed-gradient tuning of
//! rounding offsets and clip scales against block output reconstruction.

pub mod autodiff;
pub mod calib;
pub mod error;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod qmodel;
pub mod quant;
pub mod tensor;
pub mod tensorfile;
pub mod tuner;

pub use autodiff::{ElemKind, Gradients, Tape, Var};
pub use calib::{
    language_calib, language_tokens, synth_tokens, BlockInputCache, CalibSet, MarkovSource, Split,
};
pub use error::{Error, Result};
pub use model::{
    model_init, perplexity, toy_model, BlockWeights, ModelConfig, ModelWeights, TrainConfig,
};
pub use qmodel::QuantizedModel;
pub use quant::{
    compute_scale_zp, group_view, qdq, qdq_tape, quantize, rtn, GroupLayout, GroupParams,
    PackedTensor, QuantConfig, Quantized, TunedParams,
};
pub use tensor::{DType, Scalar, Tensor};
pub use tensorfile::{load_tensors, save_tensors, StoredTensor, TensorFile};
pub use tuner::{
    lr_at, tune_block, tune_model, BestSnapshot, BlockReport, LinearLayer, Method, OptimizerKind,
    Reconstruct, TuneConfig, TuneMode, TuneOutcome, TunedModel,
};
