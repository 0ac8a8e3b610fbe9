//! Config files, checkpoints and the commands behind the `lorasc` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, Header};
pub use commands::{cmd_ablate, cmd_evaluate, cmd_inspect, cmd_rank, cmd_train, prepare, TrainOptions};
pub use config::{parse_config, parse_config_str, RunConfig};
