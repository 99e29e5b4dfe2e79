//! Audio files and checkpoints.

pub mod checkpoint;
pub mod wav;

pub use checkpoint::{Checkpoint, ModelKind, SavedParam};
pub use wav::{wav_read, wav_write};
