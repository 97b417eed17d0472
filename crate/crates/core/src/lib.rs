//! Continual self-supervised learning with expert training, integration and
//! expert re-initialization, plus sequential baselines, task-free streams,
//! linear-probe evaluation and prototype-based semi-supervised replay.
//!
//! Everything is generic over the scalar type; the `*32`/`*64` aliases fix it.

pub mod baselines;
pub mod datastream;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod pocon;
pub mod record;
pub mod seeding;
pub mod semisup;
pub mod ssl_losses;
pub mod train;

/// Single-precision instantiations.
pub type Dataset32 = datastream::LabeledDataset<f32>;
pub type Encoder32 = models::Encoder<f32>;
pub type Snapshot32 = models::ParamSnapshot<f32>;
pub type RunRecord32 = record::RunRecord<f32>;

/// Double-precision instantiations.
pub type Dataset64 = datastream::LabeledDataset<f64>;
pub type Encoder64 = models::Encoder<f64>;
pub type Snapshot64 = models::ParamSnapshot<f64>;
pub type RunRecord64 = record::RunRecord<f64>;
