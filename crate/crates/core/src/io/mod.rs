//! On-disk formats: the `VVT1` tensor container, PPM frame sequences and
//! the run configuration.

pub mod config;
pub mod ppm;
pub mod vvt;

pub use config::{RestoreConfig, RunConfig, TrainSection};
pub use ppm::{read_frames, write_frames};
pub use vvt::{Container, DType, Record, RecordData};
