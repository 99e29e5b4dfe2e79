//! Network building blocks.

pub mod blocks;
pub mod layers;
pub mod params;
pub mod tcm;
pub mod topology;

pub use blocks::{ConvBlock, Decoder, Direction, Encoder};
pub use layers::{sd_conv_forward, ss_smooth, Conv, DilatedConv, Norm, Prelu};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use tcm::{tcm_stack, Tcm, TcmBody, TcmConfig, TcmVariant, GROUP_SIZE};
pub use topology::{Extent, Span, Topology};
