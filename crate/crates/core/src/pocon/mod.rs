//! The three-stage continual learner: expert training, knowledge
//! integration into the main network and expert re-initialization, plus the
//! task-free interleaved variant.

pub mod config;
pub mod init;
pub mod integration;
pub mod run;
pub mod taskfree;

pub use config::{InitStrategy, ModelConfig, PoconConfig, StageConfig, TaskFreeConfig};
pub use init::{distill_expert, distill_loss, init_expert, InitOutcome};
pub use integration::{integration_loss, train_integration, IntegrationLoss, TaskState};
pub use run::{first_main, run_pocon, train_expert};
pub use taskfree::{run_taskfree, segment_ends};
