//! Integer-only I-BERT encoder: INT8 tensors with per-tensor scales,
//! padding-free matmul modules, polynomial nonlinearities, the monolithic
//! reference executor and the streaming stage kernels used in simulation.

mod config;
mod encoder;
mod kernels;
mod matmul;
mod model;
mod nonlinear;
pub mod reference;
mod requant;
mod tensor;

pub use config::{min_padding, EncoderConfig};
pub use encoder::{encoder_forward, CompiledLinear, Encoder, LinearSlot, NormSlot};
pub use kernels::{
    cost, make_stage, AttentionStage, ContextStage, LinearStage, NormStage, StageKind,
};
pub use matmul::{attention_dot_product, linear, softmax_matmul, LinearWeights, Tiling};
pub use model::{
    encoder_dir, generate, import_model, read_archive, read_encoder, read_model_config,
    read_model_fs, write_archive, write_model_fs, EncoderParams, LinearParams, ModelParams,
    NormParams, MODULES, SYNTHETIC_ACT_SCALE,
};
pub use nonlinear::{
    gelu_int, isqrt, layernorm_int, normalize, normalized_scale, residual_add, softmax_int,
    GeluConsts, LayerNormAffine, LayerNormInt, SoftmaxConsts, SOFTMAX_SCALE,
};
pub use requant::{quant, quant_row, Requantizer};
pub use tensor::{
    bytes_to_i8, i8_to_bytes, read_tensor_blob, write_tensor_blob, AccTensor, IbertError,
    QuantTensor,
};
