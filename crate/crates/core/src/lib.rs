//! Learned entropy codec for anchor-based 3D Gaussian scene representations.

pub mod anchor;
pub mod entropy;
pub mod hash_grid;
pub mod location;
pub mod masking;
pub mod pipeline;
pub mod quantizer;
pub mod range_coder;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

/// Scalar used by the codec and the trainer.
pub type CodecScalar = f32;
/// Scalar used by reference computations and gradient checks.
pub type OracleScalar = f64;

pub type CodecModel = pipeline::Model<CodecScalar>;
pub type CodecTrainer = pipeline::Trainer<CodecScalar>;
pub type CodecTensor = tensor::Tensor<CodecScalar>;
pub type OracleModel = pipeline::Model<OracleScalar>;
pub type OracleTape = tensor::Tape<OracleScalar>;
pub type OracleTensor = tensor::Tensor<OracleScalar>;
