//! Convolutional encoder/decoder blocks: (de)conv -> norm -> PReLU.
//!
//! Time kernels are 2 frames wide and causal; frequency is strided by 2
//! with no padding, giving the chain 161 -> 79 -> 39 -> 19 -> 9 -> 4.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{conv_out_len, conv_transpose_out_len, ConvSpec, NormMode, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::stft::NUM_BINS;
use crate::tensor::Real;

use super::layers::{Conv, ConvDef, Norm, Prelu};
use super::params::{Bound, ParamStore};
use super::topology::Topology;

pub const KERNEL_T: usize = 2;
pub const FREQ_KERNELS: [usize; 5] = [5, 3, 3, 3, 3];
pub const FREQ_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Encode,
    Decode,
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub name: String,
    pub conv: Conv,
    /// `None` for the decoder's output layer.
    pub norm: Option<Norm>,
    pub act: Option<Prelu>,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        direction: Direction,
        cin: usize,
        cout: usize,
        kernel_f: usize,
        norm: Option<NormMode>,
    ) -> Self {
        let spec = match direction {
            Direction::Encode => ConvSpec::default()
                .stride(1, FREQ_STRIDE)
                .padding(Padding::causal(KERNEL_T, 1)),
            // crop the trailing frame so output frame t only sees inputs <= t
            Direction::Decode => ConvSpec::default().stride(1, FREQ_STRIDE).padding(Padding {
                time: (0, KERNEL_T - 1),
                freq: (0, 0),
            }),
        };
        let conv = Conv::new(
            store,
            rng,
            ConvDef {
                name: &format!("{name}.conv"),
                cin,
                cout,
                kernel: (KERNEL_T, kernel_f),
                spec,
                bias: true,
                transposed: direction == Direction::Decode,
            },
        );
        let (norm, act) = match norm {
            Some(mode) => (
                Some(Norm::new(store, &format!("{name}.norm"), cout, mode)),
                Some(Prelu::new(store, &format!("{name}.act"), cout)),
            ),
            None => (None, None),
        };
        Self {
            name: name.to_string(),
            conv,
            norm,
            act,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(tape, p, x)?;
        if let Some(n) = &self.norm {
            h = n.forward(tape, p, h)?;
        }
        if let Some(a) = &self.act {
            h = a.forward(tape, p, h)?;
        }
        tape.label(h, self.name.clone());
        Ok(h)
    }

    pub fn topology(&self) -> Topology {
        let mut seq = vec![self.conv.topology()];
        if let Some(n) = &self.norm {
            seq.push(n.topology(&self.name));
        }
        Topology::Seq(seq)
    }
}

/// Frequency extents after each encoder block, starting from `NUM_BINS`.
pub fn encoder_extents() -> Vec<usize> {
    let mut f = NUM_BINS;
    FREQ_KERNELS
        .iter()
        .map(|&k| {
            f = conv_out_len(f, k, FREQ_STRIDE, 1, (0, 0)).expect("fixed chain fits");
            f
        })
        .collect()
}

pub fn bottleneck_bins() -> usize {
    *encoder_extents().last().expect("five blocks")
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        channels: usize,
        norm: NormMode,
    ) -> Self {
        let blocks = FREQ_KERNELS
            .iter()
            .enumerate()
            .map(|(i, &kf)| {
                let c = if i == 0 { cin } else { channels };
                ConvBlock::new(store, rng, &format!("{prefix}.enc{i}"), Direction::Encode, c, channels, kf, Some(norm))
            })
            .collect();
        Self { blocks }
    }

    /// Outputs of every block, shallowest first.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn topology(&self) -> Topology {
        Topology::Seq(self.blocks.iter().map(ConvBlock::topology).collect())
    }
}

/// Mirror of [`Encoder`]; block `i` consumes the previous output concatenated
/// with the encoder output at the same depth.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<ConvBlock>,
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        cout: usize,
        norm: NormMode,
    ) -> Result<Self> {
        let enc = encoder_extents();
        let n = FREQ_KERNELS.len();
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let depth = n - 1 - i;
            let kf = FREQ_KERNELS[depth];
            let target = if depth == 0 { NUM_BINS } else { enc[depth - 1] };
            let got = conv_transpose_out_len(enc[depth], kf, FREQ_STRIDE, 1, (0, 0), 0);
            if got != Some(target) {
                return Err(Error::Config(format!(
                    "decoder block {i} maps {} bins to {got:?}, encoder twin expects {target}",
                    enc[depth]
                )));
            }
            let last = i == n - 1;
            blocks.push(ConvBlock::new(
                store,
                rng,
                &format!("{prefix}.dec{i}"),
                Direction::Decode,
                2 * channels,
                if last { cout } else { channels },
                kf,
                (!last).then_some(norm),
            ));
        }
        Ok(Self { blocks })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, trunk: Var, skips: &[Var]) -> Result<Var> {
        let mut h = trunk;
        for (i, b) in self.blocks.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            let cat = tape.concat(&[h, skip])?;
            h = b.forward(tape, p, cat)?;
        }
        Ok(h)
    }

    pub fn topology(&self) -> Topology {
        Topology::Seq(self.blocks.iter().map(ConvBlock::topology).collect())
    }
}
