//! Synthetic corpus, feature files, training, evaluation and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod optim;
pub mod run;
pub mod train;

pub use checkpoint::{config_hash, load_checkpoint_partial, Checkpoint, MappingPolicy, PartialLoadReport};
pub use corpus::{generate_corpus, generate_sample, CorpusSpec, Sample};
pub use eval::{edit_distance, evaluate, token_error_rate, EvalReport};
pub use features::{load_dataset, make_batches, read_features, save_dataset, write_features};
pub use optim::{Adam, AdamConfig, AdamState};
pub use run::{run_training, RunConfig, RunManifest, RunResult, Splits};
pub use train::{train, validation_loss, MetricRecord, TrainConfig, TrainOutcome};
