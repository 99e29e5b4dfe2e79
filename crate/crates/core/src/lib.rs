//! Two-stage complex spectral speech enhancement.
//!
//! A coarse magnitude network (CME-Net) estimates the clean magnitude, which
//! is coupled with the noisy phase; a refinement network (CSR-Net) then adds
//! a complex residual. Everything needed to train and verify the pipeline is
//! built in: a small reverse-mode autograd engine, STFT front end, temporal
//! convolution modules, losses, Adam, a synthetic corpus, structural
//! analysis tools, and WAV/checkpoint IO.

pub mod analysis;
pub mod autograd;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod stft;
pub mod tensor;
pub mod train;

pub use autograd::{ConvSpec, NormMode, Padding, Tape, Var};
pub use error::{Error, Result};
pub use nets::{CmeNet, CsrNet, CtsNet, CtsOutput, NetConfig};
pub use nn::{ParamStore, TcmConfig, TcmVariant};
pub use stft::{ComplexSpectrogram, MagPhase, Waveform, FFT_SIZE, HOP, NUM_BINS, SAMPLE_RATE};
pub use tensor::{Real, Tensor};
