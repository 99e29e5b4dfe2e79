//! CME-Net, CSR-Net and the composed two-stage pipeline.
//!
//! Stage 1 maps the noisy magnitude to a coarse clean magnitude, which is
//! recombined with the noisy phase. Stage 2 sees the coarse and noisy RI
//! planes and predicts an additive RI residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::blocks::bottleneck_bins;
use crate::nn::{tcm_stack, Bound, Decoder, Encoder, ParamStore, Tcm, TcmConfig, TcmVariant, Topology};
use crate::stft::{ComplexSpectrogram, Framing, Stft, Waveform, NUM_BINS};
use crate::tensor::{Real, Tensor};

/// Structural hyperparameters shared by both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub channels: usize,
    pub tcm_hidden: usize,
    pub cme_groups: usize,
    pub csr_groups: usize,
    pub cme_variant: TcmVariant,
    pub csr_variant: TcmVariant,
    pub gate_weight_sharing: bool,
    pub smoothed: bool,
    pub norm: NormMode,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full()
    }
}

const CSR_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

impl NetConfig {
    /// Full-size configuration: 64 channels, 18 MG-TCMs and 12 DMG-TCMs.
    pub fn full() -> Self {
        Self {
            channels: 64,
            tcm_hidden: 64,
            cme_groups: 3,
            csr_groups: 2,
            cme_variant: TcmVariant::Mg,
            csr_variant: TcmVariant::Dmg,
            gate_weight_sharing: false,
            smoothed: true,
            norm: NormMode::Frame,
            seed: 0,
        }
    }

    /// Desk-scale configuration: 16 channels, one group per network.
    pub fn tiny() -> Self {
        Self {
            channels: 16,
            tcm_hidden: 16,
            cme_groups: 1,
            csr_groups: 1,
            ..Self::full()
        }
    }

    pub fn tcm_io(&self) -> usize {
        self.channels * bottleneck_bins()
    }

    pub fn tcm_base(&self, variant: TcmVariant) -> TcmConfig {
        let io = self.tcm_io();
        let base = match variant {
            TcmVariant::O => TcmConfig::o(0).with_io(io, 2 * io),
            TcmVariant::Mg => TcmConfig::mg(0).with_io(io, self.tcm_hidden),
            TcmVariant::Dmg => TcmConfig::dmg(0).with_io(io, self.tcm_hidden),
        };
        TcmConfig {
            gate_weight_sharing: self.gate_weight_sharing,
            smoothed: self.smoothed,
            norm: self.norm,
            ..base
        }
    }

    /// Structural fields as `key=value` pairs. The seed is not structural.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("tcm_hidden", self.tcm_hidden.to_string()),
            ("cme_groups", self.cme_groups.to_string()),
            ("csr_groups", self.csr_groups.to_string()),
            ("cme_variant", self.cme_variant.name().to_string()),
            ("csr_variant", self.csr_variant.name().to_string()),
            ("gate_weight_sharing", self.gate_weight_sharing.to_string()),
            ("smoothed", self.smoothed.to_string()),
            ("norm", self.norm.name().to_string()),
        ]
    }

    /// Apply one `key=value`; returns `Ok(false)` for keys this type does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let flag = || value.parse::<bool>().map_err(|_| bad());
        match key {
            "channels" => self.channels = int()?,
            "tcm_hidden" => self.tcm_hidden = int()?,
            "cme_groups" => self.cme_groups = int()?,
            "csr_groups" => self.csr_groups = int()?,
            "cme_variant" => self.cme_variant = TcmVariant::parse(value).ok_or_else(bad)?,
            "csr_variant" => self.csr_variant = TcmVariant::parse(value).ok_or_else(bad)?,
            "gate_weight_sharing" => self.gate_weight_sharing = flag()?,
            "smoothed" => self.smoothed = flag()?,
            "norm" => self.norm = NormMode::parse(value).ok_or_else(bad)?,
            "seed" | "model_seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.tcm_hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

fn trunk<T: Real>(tape: &mut Tape<T>, p: &Bound, tcms: &[Tcm], bottom: Var) -> Result<Var> {
    let bins = tape.shape(bottom)[3];
    let mut h = tape.fold_freq(bottom)?;
    for t in tcms {
        h = t.forward(tape, p, h)?;
    }
    tape.unfold_freq(h, bins)
}

fn check_spec_input(tape: &Tape<impl Real>, v: Var, channels: usize) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 4 || s[1] != channels || s[3] != NUM_BINS {
        return Err(Error::shape("network input", s, &[s.first().copied().unwrap_or(1), channels, 0, NUM_BINS]));
    }
    Ok(())
}

/// Coarse magnitude estimation network.
#[derive(Clone, Debug)]
pub struct CmeNet<T> {
    pub cfg: NetConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub tcms: Vec<Tcm>,
    pub decoder: Decoder,
}

impl<T: Real> CmeNet<T> {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, "cme", 1, cfg.channels, cfg.norm);
        let tcms = tcm_stack(&mut store, &mut rng, "cme", cfg.cme_groups, cfg.tcm_base(cfg.cme_variant))?;
        let decoder = Decoder::new(&mut store, &mut rng, "cme", cfg.channels, 1, cfg.norm)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            tcms,
            decoder,
        })
    }

    /// `[B, 1, T, 161]` noisy magnitude to a nonnegative magnitude estimate.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, mag: Var) -> Result<Var> {
        check_spec_input(tape, mag, 1)?;
        if let Some(v) = tape.value(mag).data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Contract(format!("magnitude input must be nonnegative, found {v}")));
        }
        let skips = self.encoder.forward(tape, p, mag)?;
        let h = trunk(tape, p, &self.tcms, skips[skips.len() - 1])?;
        let out = self.decoder.forward(tape, p, h, &skips)?;
        let out = tape.softplus(out)?;
        tape.label(out, "cme.out");
        Ok(out)
    }

    pub fn topology(&self) -> Topology {
        Topology::Seq(vec![
            self.encoder.topology(),
            Topology::Seq(self.tcms.iter().map(Tcm::topology).collect()),
            self.decoder.topology(),
        ])
    }

    /// Stage-1 enhancement: estimated magnitude with the noisy phase.
    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        let (stft, padded) = Analysis::new(noisy)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let (xr, xi) = padded.to_network::<T>();
        let (xr, xi) = (tape.constant(xr), tape.constant(xi));
        let (mag, cos, sin) = noisy_polar(&mut tape, xr, xi)?;
        let est = self.forward(&mut tape, &p, mag)?;
        let (r, i) = couple_with(&mut tape, est, cos, sin)?;
        let spec = ComplexSpectrogram::from_network(tape.value(r), tape.value(i))?;
        stft.finish(&spec)
    }
}

/// Complex spectrum refinement network with separate real/imaginary decoders.
#[derive(Clone, Debug)]
pub struct CsrNet<T> {
    pub cfg: NetConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub tcms: Vec<Tcm>,
    pub decoder_real: Decoder,
    pub decoder_imag: Decoder,
}

impl<T: Real> CsrNet<T> {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CSR_SEED_MIX);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, "csr", 4, cfg.channels, cfg.norm);
        let tcms = tcm_stack(&mut store, &mut rng, "csr", cfg.csr_groups, cfg.tcm_base(cfg.csr_variant))?;
        let decoder_real = Decoder::new(&mut store, &mut rng, "csr.real", cfg.channels, 1, cfg.norm)?;
        let decoder_imag = Decoder::new(&mut store, &mut rng, "csr.imag", cfg.channels, 1, cfg.norm)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            tcms,
            decoder_real,
            decoder_imag,
        })
    }

    /// Residual RI planes from the stacked input `(coarse_r, coarse_i, noisy_r, noisy_i)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        coarse_r: Var,
        coarse_i: Var,
        noisy_r: Var,
        noisy_i: Var,
    ) -> Result<(Var, Var)> {
        for v in [coarse_r, coarse_i, noisy_r, noisy_i] {
            check_spec_input(tape, v, 1)?;
            if tape.shape(v) != tape.shape(coarse_r) {
                return Err(Error::shape("csr input", tape.shape(v), tape.shape(coarse_r)));
            }
        }
        let x = tape.concat(&[coarse_r, coarse_i, noisy_r, noisy_i])?;
        tape.label(x, "csr.input");
        let skips = self.encoder.forward(tape, p, x)?;
        let h = trunk(tape, p, &self.tcms, skips[skips.len() - 1])?;
        let r = self.decoder_real.forward(tape, p, h, &skips)?;
        let i = self.decoder_imag.forward(tape, p, h, &skips)?;
        tape.label(r, "csr.out.real");
        tape.label(i, "csr.out.imag");
        Ok((r, i))
    }

    pub fn topology(&self) -> Topology {
        Topology::Seq(vec![
            self.encoder.topology(),
            Topology::Seq(self.tcms.iter().map(Tcm::topology).collect()),
            Topology::Parallel(vec![self.decoder_real.topology(), self.decoder_imag.topology()]),
        ])
    }
}

/// Noisy magnitude and unit phasor `(cos, sin)` as constants. Bins with
/// zero magnitude get a zero phasor, so they stay zero after coupling.
pub fn noisy_polar<T: Real>(tape: &mut Tape<T>, xr: Var, xi: Var) -> Result<(Var, Var, Var)> {
    if tape.shape(xr) != tape.shape(xi) {
        return Err(Error::shape("noisy_polar", tape.shape(xr), tape.shape(xi)));
    }
    let (r, i) = (tape.value(xr), tape.value(xi));
    let mut mag = r.clone();
    let mut cos = r.clone();
    let mut sin = i.clone();
    for k in 0..mag.len() {
        let (a, b) = (r.data()[k], i.data()[k]);
        let m = a.hypot(b);
        mag.data_mut()[k] = m;
        if m > T::zero() {
            cos.data_mut()[k] = a / m;
            sin.data_mut()[k] = b / m;
        } else {
            cos.data_mut()[k] = T::zero();
            sin.data_mut()[k] = T::zero();
        }
    }
    Ok((tape.constant(mag), tape.constant(cos), tape.constant(sin)))
}

fn couple_with<T: Real>(tape: &mut Tape<T>, mag: Var, cos: Var, sin: Var) -> Result<(Var, Var)> {
    Ok((tape.mul(mag, cos)?, tape.mul(mag, sin)?))
}

/// Combine an estimated magnitude with the phase of the noisy spectrum.
pub fn couple_noisy_phase<T: Real>(tape: &mut Tape<T>, coarse_mag: Var, noisy_r: Var, noisy_i: Var) -> Result<(Var, Var)> {
    if tape.shape(coarse_mag) != tape.shape(noisy_r) {
        return Err(Error::shape("couple_noisy_phase", tape.shape(coarse_mag), tape.shape(noisy_r)));
    }
    if tape.value(coarse_mag).data().iter().any(|v| *v < T::zero()) {
        return Err(Error::Contract("coarse magnitude must be nonnegative".into()));
    }
    let (_, cos, sin) = noisy_polar(tape, noisy_r, noisy_i)?;
    couple_with(tape, coarse_mag, cos, sin)
}

/// Tape handles for every intermediate of the two-stage pipeline.
#[derive(Clone, Copy, Debug)]
pub struct CtsVars {
    pub noisy_mag: Var,
    pub coarse_mag: Var,
    pub coarse_r: Var,
    pub coarse_i: Var,
    pub residual_r: Var,
    pub residual_i: Var,
    pub refined_r: Var,
    pub refined_i: Var,
}

/// Materialized pipeline output.
#[derive(Clone, Debug)]
pub struct CtsOutput {
    pub coarse_mag: Tensor<f64>,
    pub coarse_spec: ComplexSpectrogram,
    pub residual_spec: ComplexSpectrogram,
    pub refined_spec: ComplexSpectrogram,
    pub enhanced: Waveform,
}

#[derive(Clone, Debug)]
pub struct CtsNet<T> {
    pub cme: CmeNet<T>,
    pub csr: CsrNet<T>,
}

impl<T: Real> CtsNet<T> {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        Ok(Self {
            cme: CmeNet::new(cfg)?,
            csr: CsrNet::new(cfg)?,
        })
    }

    /// Stage 2 attached to an existing (e.g. pretrained) stage 1.
    pub fn from_cme(cme: CmeNet<T>) -> Result<Self> {
        let csr = CsrNet::new(&cme.cfg)?;
        Ok(Self { cme, csr })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cme.cfg
    }

    pub fn forward(&self, tape: &mut Tape<T>, pc: &Bound, ps: &Bound, noisy_r: Var, noisy_i: Var) -> Result<CtsVars> {
        let (noisy_mag, cos, sin) = noisy_polar(tape, noisy_r, noisy_i)?;
        let coarse_mag = self.cme.forward(tape, pc, noisy_mag)?;
        let (coarse_r, coarse_i) = couple_with(tape, coarse_mag, cos, sin)?;
        let (residual_r, residual_i) = self.csr.forward(tape, ps, coarse_r, coarse_i, noisy_r, noisy_i)?;
        let refined_r = tape.add(coarse_r, residual_r)?;
        let refined_i = tape.add(coarse_i, residual_i)?;
        tape.label(refined_r, "cts.out.real");
        tape.label(refined_i, "cts.out.imag");
        Ok(CtsVars {
            noisy_mag,
            coarse_mag,
            coarse_r,
            coarse_i,
            residual_r,
            residual_i,
            refined_r,
            refined_i,
        })
    }

    pub fn topology(&self) -> Topology {
        Topology::Parallel(vec![
            self.csr.topology(),
            Topology::Seq(vec![self.cme.topology(), self.csr.topology()]),
        ])
    }

    /// Full chain: STFT, both stages, residual add, inverse STFT.
    pub fn enhance(&self, noisy: &Waveform) -> Result<CtsOutput> {
        let (stft, padded) = Analysis::new(noisy)?;
        let mut tape = Tape::new();
        let pc = self.cme.store.bind(&mut tape, false);
        let ps = self.csr.store.bind(&mut tape, false);
        let (xr, xi) = padded.to_network::<T>();
        let (xr, xi) = (tape.constant(xr), tape.constant(xi));
        let v = self.forward(&mut tape, &pc, &ps, xr, xi)?;
        let spec = |a: Var, b: Var| ComplexSpectrogram::from_network(tape.value(a), tape.value(b));
        let coarse_spec = spec(v.coarse_r, v.coarse_i)?;
        let residual_spec = spec(v.residual_r, v.residual_i)?;
        let refined_spec = spec(v.refined_r, v.refined_i)?;
        let cm = tape.value(v.coarse_mag);
        let coarse_mag = Tensor::new([cm.dim(2), NUM_BINS], cm.data().iter().map(|x| x.as_f64()).collect())?;
        let enhanced = stft.finish(&refined_spec)?;
        Ok(CtsOutput {
            coarse_mag,
            coarse_spec,
            residual_spec,
            refined_spec,
            enhanced,
        })
    }
}

/// Padded analysis of an arbitrary-length input, cropped back on synthesis.
struct Analysis {
    plan: Stft,
    framing: Framing,
}

impl Analysis {
    fn new(noisy: &Waveform) -> Result<(Self, ComplexSpectrogram)> {
        noisy.check_rate()?;
        let framing = Framing::new(noisy.len());
        let plan = Stft::new();
        let spec = plan.stft(&framing.pad(&noisy.samples))?;
        Ok((Self { plan, framing }, spec))
    }

    fn finish(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        let w = self.plan.istft(spec, self.framing.padded)?;
        Ok(self.framing.crop(w))
    }
}
