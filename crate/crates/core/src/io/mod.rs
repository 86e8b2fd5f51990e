//! On-disk formats: checkpoints, trajectory CSV and run configs.

mod checkpoint;
mod config;
mod csvfile;

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, Dtype, Manifest, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::RunConfig;
pub use csvfile::{load_trajectory, read_trajectory, save_trajectory, write_trajectory};
