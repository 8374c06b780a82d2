//! Speech-driven 3D facial animation trained through a consistency diagram.
//!
//! A frozen speech recognizer turns audio into latents and a
//! pseudo-transcript. The facial animator turns the same audio into
//! per-frame vertex offsets, and a lip reader maps the predicted lip motion
//! back to latents and text. Reconstruction, velocity, latent and CTC
//! losses tie the paths together.
//!
//! Every numeric routine is generic over [`Scalar`]; the `f64` aliases at
//! the crate root are what the tests and the CLI use.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod facial_animator;
pub mod gradcheck;
pub mod lip_reading;
pub mod losses;
pub mod mesh_corpus;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod speech_recognizer;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use facial_animator::{AnimatorConfig, EncoderKind, FacialAnimator};
pub use lip_reading::{LipReader, LipReaderConfig};
pub use losses::{LossBreakdown, LossWeights};
pub use mesh_corpus::{AudioClip, CorpusSample, FaceMesh, Transcript, VertexSequence, Vocabulary};
pub use metrics::{EvalReport, LveAggregation, MetricParams};
pub use scalar::Scalar;
pub use speech_recognizer::{ExternalRecognizer, MockRecognizer, SpeechRecognizer};
pub use tensor::Matrix;
pub use trainer::{ModelConfig, SelfTalk, TrainConfig, TrainLog};

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type VertexSequence64 = mesh_corpus::VertexSequence<f64>;
pub type VertexSequence32 = mesh_corpus::VertexSequence<f32>;
pub type FaceMesh64 = mesh_corpus::FaceMesh<f64>;
pub type FaceMesh32 = mesh_corpus::FaceMesh<f32>;
pub type SelfTalk64 = trainer::SelfTalk<f64>;
pub type SelfTalk32 = trainer::SelfTalk<f32>;
