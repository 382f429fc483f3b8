//! Data, metrics, training, the four-quadrant protocol and timing.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod quadrant;
pub mod report;
pub mod synth;
pub mod train;

pub use config::{RunConfig, TrainConfig};
pub use corpus::{materialize_noisy, replay_corpus, verify_replay};
pub use eval::{bench_fps, evaluate, predict, FpsReport};
pub use io::{load_dataset, load_manifest, save_dataset};
pub use metrics::{score, MetricReport, Metrics, SampleScore, THRESHOLD};
pub use quadrant::{QuadrantDice, QuadrantReport, PUBLISHED};
pub use synth::{synth_dataset, synth_sample};
pub use train::{train, train_with, StepLog, TrainManifest, TrainOutcome};
