//! End-to-end compression: the container format, the codec that drives
//! model and coder chunk by chunk, training orchestration and benchmarks.

pub mod bench;
pub mod codec;
pub mod container;
pub mod selfcheck;
pub mod train;

pub use bench::{bench, BenchReport, BenchRow, ModalitySummary};
pub use codec::{export_checkpoint, Codec, Compressed, VOCAB_BLOB};
pub use container::{Container, ContainerHeader};
pub use selfcheck::{selfcheck, SuiteResult};
pub use train::{build_vocab, tokenize, train_on_samples, TrainPlan, Trained};
