use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, NormMode, Padding, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

use super::params::{Bound, ParamId, ParamKind, ParamStore};
use super::topology::Topology;

/// Convolution or transposed convolution with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: (usize, usize),
    pub spec: ConvSpec,
    pub transposed: bool,
}

pub struct ConvDef<'a> {
    pub name: &'a str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub spec: ConvSpec,
    pub bias: bool,
    pub transposed: bool,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, def: ConvDef<'_>) -> Self {
        let g = def.spec.groups;
        let taps = def.kernel.0 * def.kernel.1;
        let (shape, fan_in) = if def.transposed {
            ([def.cin, def.cout / g, def.kernel.0, def.kernel.1], def.cout / g * taps)
        } else {
            ([def.cout, def.cin / g, def.kernel.0, def.kernel.1], def.cin / g * taps)
        };
        let weight = store.add_uniform(format!("{}.weight", def.name), ParamKind::ConvWeight, &shape, fan_in, rng);
        let bias = def
            .bias
            .then(|| store.add_uniform(format!("{}.bias", def.name), ParamKind::ConvBias, &[def.cout], fan_in, rng));
        Self {
            name: def.name.to_string(),
            weight,
            bias,
            kernel: def.kernel,
            spec: def.spec,
            transposed: def.transposed,
        }
    }

    /// Bias-free 1x1 convolution over temporal features `[B, C, T, 1]`.
    pub fn pointwise<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(
            store,
            rng,
            ConvDef {
                name,
                cin,
                cout,
                kernel: (1, 1),
                spec: ConvSpec::default(),
                bias: false,
                transposed: false,
            },
        )
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| p[b]);
        if self.transposed {
            tape.conv2d_transposed(x, p[self.weight], b, self.spec)
        } else {
            tape.conv2d(x, p[self.weight], b, self.spec)
        }
    }

    pub fn topology(&self) -> Topology {
        let pad = self.spec.padding.time;
        Topology::Layer {
            name: self.name.clone(),
            kernel: self.kernel.0,
            dilation: self.spec.dilation.0,
            pad_lo: pad.0,
            transposed: self.transposed,
        }
    }
}

/// Normalization plus per-channel affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub mode: NormMode,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, mode: NormMode) -> Self {
        let gain = store.add(format!("{name}.gain"), ParamKind::NormAffine, Tensor::full([channels], T::one()));
        let bias = store.add(format!("{name}.bias"), ParamKind::NormAffine, Tensor::zeros([channels]));
        Self { gain, bias, mode }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.norm(x, p[self.gain], p[self.bias], self.mode)
    }

    pub fn topology(&self, name: &str) -> Topology {
        match self.mode {
            NormMode::Frame => Topology::Identity,
            NormMode::Instance => Topology::Global { name: name.to_string() },
        }
    }
}

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Prelu {
    pub alpha: ParamId,
}

impl Prelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let alpha = store.add(
            format!("{name}.alpha"),
            ParamKind::Activation,
            Tensor::full([channels], T::from_f64(PRELU_INIT)),
        );
        Self { alpha }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.prelu(x, p[self.alpha])
    }
}

/// Shared, per-channel causal smoothing ahead of a dilated convolution.
///
/// One kernel of length `2d - 1` is applied identically to every channel.
pub fn ss_smooth<T: Real>(tape: &mut Tape<T>, x: Var, kernel: Var) -> Result<Var> {
    let channels = tape.shape(x)[1];
    let k = tape.shape(kernel)[2];
    let tiled = tape.tile(kernel, channels)?;
    let spec = ConvSpec::default().groups(channels).padding(Padding::causal(k, 1));
    tape.conv2d(x, tiled, None, spec)
}

/// Smoothed dilated convolution: `dilated_conv(ss_smooth(x))`.
pub fn sd_conv_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    smoothing: Var,
    kernel: Var,
    dilation: usize,
) -> Result<Var> {
    let smoothed = ss_smooth(tape, x, smoothing)?;
    let kt = tape.shape(kernel)[2];
    let spec = ConvSpec::default()
        .dilation(dilation, 1)
        .padding(Padding::causal(kt, dilation));
    tape.conv2d(smoothed, kernel, None, spec)
}

pub fn smoothing_len(dilation: usize) -> usize {
    2 * dilation - 1
}

/// Causal dilated temporal convolution, optionally smoothed.
#[derive(Clone, Debug)]
pub struct DilatedConv {
    pub smoothing: Option<ParamId>,
    pub conv: Conv,
    pub dilation: usize,
}

impl DilatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel_t: usize,
        dilation: usize,
        groups: usize,
        smoothed: bool,
    ) -> Self {
        let smoothing = smoothed.then(|| {
            // unit impulse on the current frame: starts out as a no-op
            let len = smoothing_len(dilation);
            let mut k = Tensor::zeros([1, 1, len, 1]);
            k.data_mut()[len - 1] = T::one();
            store.add(format!("{name}.smooth"), ParamKind::Smoothing, k)
        });
        let conv = Conv::new(
            store,
            rng,
            ConvDef {
                name,
                cin,
                cout,
                kernel: (kernel_t, 1),
                spec: ConvSpec::default()
                    .dilation(dilation, 1)
                    .padding(Padding::causal(kernel_t, dilation))
                    .groups(groups),
                bias: false,
                transposed: false,
            },
        );
        Self {
            smoothing,
            conv,
            dilation,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = match self.smoothing {
            Some(s) => ss_smooth(tape, x, p[s])?,
            None => x,
        };
        self.conv.forward(tape, p, x)
    }

    pub fn topology(&self) -> Topology {
        let mut seq = Vec::new();
        if self.smoothing.is_some() {
            let len = smoothing_len(self.dilation);
            seq.push(Topology::Layer {
                name: format!("{}.smooth", self.conv.name),
                kernel: len,
                dilation: 1,
                pad_lo: len - 1,
                transposed: false,
            });
        }
        seq.push(self.conv.topology());
        Topology::Seq(seq)
    }
}
