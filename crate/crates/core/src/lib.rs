//! Mixed-precision post-training weight quantization for linear layers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file name the common concrete instantiations.

pub mod cli;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod packfmt;
pub mod pipeline;
pub mod quant_core;
pub mod salience;
pub mod sba;
pub mod scalar;
pub mod sqc;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
pub use matrix::Mat;
pub use packfmt::{pack, packed_size_report, unpack, PackedModel, QuantizedLayer, SizeReport};
pub use pipeline::{proxy_loss, quantize_layer, PipelineConfig, QuantizationResult};
pub use quant_core::{Encoding, GroupQuantParams, OneBitMode, QuantizedBlock};
pub use salience::{HessianState, SalienceDenominator, SalienceMap};
pub use sba::{BitPlan, KlConfig, SbaConfig};
pub use scalar::Scalar;
pub use sqc::{SqcConfig, SqcOutcome};
pub use tensor_store::{CalibrationSet, DenseTensor};

pub type Matrix = Mat<f64>;
pub type Matrix32 = Mat<f32>;
pub type QuantizationResult64 = QuantizationResult<f64>;
pub type QuantizationResult32 = QuantizationResult<f32>;
pub type HessianState64 = HessianState<f64>;
pub type BitPlan64 = BitPlan<f64>;
