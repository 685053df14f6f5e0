//! Numerical core of parameter-efficient fine-tuning at desk scale.
//!
//! * [`nf4`]: 4-bit NormalFloat blockwise quantization, optionally with
//!   8-bit double-quantized block scales.
//! * [`lora`]: low-rank adapters over dense or quantized frozen weights,
//!   with forward, merge and analytic gradients.
//! * [`efficiency`]: trainable-parameter counts and weight-memory estimates.
//! * [`tensor_file`]: a small binary container for dense and quantized matrices.

pub mod efficiency;
pub mod lora;
pub mod nf4;
pub mod tensor_file;

pub use efficiency::{count_trainable, estimate_memory, Scheme};
pub use lora::{lora_forward, merge_adapter, BaseWeight, LoraAdapter};
pub use nf4::{dequantize_nf4, nf4_codebook, quantize_nf4, Nf4Codebook, QuantizedTensor};
