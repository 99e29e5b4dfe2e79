//! STFT front end: 20 ms periodic Hann frames, 10 ms hop, 320-point FFT.
//!
//! Frames start at sample 0 without center padding, so frame `l` covers
//! samples `[l * HOP, l * HOP + FFT_SIZE)` and only depends on the past.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 320;
pub const HOP: usize = 160;
pub const NUM_BINS: usize = FFT_SIZE / 2 + 1;

/// Overlap weight below which an output sample is treated as uncovered.
const MIN_OVERLAP: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn check_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {} Hz not supported, {} Hz required",
                self.sample_rate, SAMPLE_RATE
            )));
        }
        Ok(())
    }
}

/// Real and imaginary planes, each `[frames, NUM_BINS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Tensor<f64>,
    pub imag: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagPhase {
    pub mag: Tensor<f64>,
    pub phase: Tensor<f64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize) -> Self {
        Self {
            real: Tensor::zeros([frames, NUM_BINS]),
            imag: Tensor::zeros([frames, NUM_BINS]),
        }
    }

    pub fn new(real: Tensor<f64>, imag: Tensor<f64>) -> Result<Self> {
        if real.shape() != imag.shape() || real.shape().len() != 2 || real.dim(1) != NUM_BINS {
            return Err(Error::shape("spectrogram", real.shape(), imag.shape()));
        }
        Ok(Self { real, imag })
    }

    pub fn frames(&self) -> usize {
        self.real.dim(0)
    }

    /// Magnitude without any stabilizing epsilon.
    pub fn magnitude(&self) -> Tensor<f64> {
        let mut m = self.real.clone();
        for (v, &i) in m.data_mut().iter_mut().zip(self.imag.data()) {
            *v = v.hypot(i);
        }
        m
    }

    /// Both planes as `[1, 1, frames, NUM_BINS]` network tensors.
    pub fn to_network<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        let shape = [1, 1, self.frames(), NUM_BINS];
        (
            self.real.cast::<T>().reshape(shape).expect("same numel"),
            self.imag.cast::<T>().reshape(shape).expect("same numel"),
        )
    }

    /// Inverse of [`ComplexSpectrogram::to_network`] for batch item 0.
    pub fn from_network<T: Real>(real: &Tensor<T>, imag: &Tensor<T>) -> Result<Self> {
        let s = real.shape();
        if s.len() != 4 || s[1] != 1 || s[3] != NUM_BINS || real.shape() != imag.shape() {
            return Err(Error::shape("from_network", real.shape(), imag.shape()));
        }
        let n = s[2] * NUM_BINS;
        let take = |t: &Tensor<T>| {
            Tensor::new([s[2], NUM_BINS], t.data()[..n].iter().map(|v| v.as_f64()).collect())
                .expect("sized")
        };
        Self::new(take(real), take(imag))
    }

    pub fn scaled_sum(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.real.shape() != other.real.shape() {
            return Err(Error::shape("spectrogram sum", self.real.shape(), other.real.shape()));
        }
        let comb = |x: &Tensor<f64>, y: &Tensor<f64>| {
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
            )
            .expect("same shape")
        };
        Ok(Self {
            real: comb(&self.real, &other.real),
            imag: comb(&self.imag, &other.imag),
        })
    }
}

/// Periodic (DFT-even) Hann window.
pub fn hann_window() -> Vec<f64> {
    (0..FFT_SIZE)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FFT_SIZE as f64).cos())
        .collect()
}

pub fn num_frames(samples: usize) -> usize {
    if samples < FFT_SIZE {
        0
    } else {
        (samples - FFT_SIZE) / HOP + 1
    }
}

/// Samples reconstructed by `frames` frames.
pub fn coverage(frames: usize) -> usize {
    if frames == 0 {
        0
    } else {
        (frames - 1) * HOP + FFT_SIZE
    }
}

/// Zero padding that puts every sample of a signal under two overlapping
/// windows: `FFT_SIZE - HOP` samples in front and enough behind to complete
/// the last frame. The overlap-add normalizer then stays within [0.5, 1]
/// instead of vanishing at the edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub len: usize,
    pub padded: usize,
}

impl Framing {
    pub const LEAD: usize = FFT_SIZE - HOP;

    pub fn new(len: usize) -> Self {
        Self {
            len,
            padded: coverage(len.div_ceil(HOP) + 1),
        }
    }

    pub fn frames(&self) -> usize {
        num_frames(self.padded)
    }

    pub fn pad(&self, samples: &[f64]) -> Waveform {
        assert_eq!(samples.len(), self.len, "framing built for another length");
        let mut out = vec![0.0; self.padded];
        out[Self::LEAD..Self::LEAD + self.len].copy_from_slice(samples);
        Waveform::new(out)
    }

    pub fn crop(&self, mut w: Waveform) -> Waveform {
        w.samples.truncate(Self::LEAD + self.len);
        w.samples.drain(..Self::LEAD.min(w.samples.len()));
        w
    }
}

/// Reusable FFT plans for repeated transforms.
pub struct Stft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(FFT_SIZE),
            inverse: planner.plan_fft_inverse(FFT_SIZE),
            window: hann_window(),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn stft(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        w.check_rate()?;
        if w.len() < FFT_SIZE {
            return Err(Error::Contract(format!(
                "stft needs at least {FFT_SIZE} samples, got {}",
                w.len()
            )));
        }
        let frames = num_frames(w.len());
        let mut spec = ComplexSpectrogram::zeros(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for l in 0..frames {
            let frame = &w.samples[l * HOP..l * HOP + FFT_SIZE];
            for ((b, &x), &win) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * win, 0.0);
            }
            self.forward.process(&mut buf);
            for (k, c) in buf[..NUM_BINS].iter().enumerate() {
                spec.real.data_mut()[l * NUM_BINS + k] = c.re;
                spec.imag.data_mut()[l * NUM_BINS + k] = c.im;
            }
        }
        Ok(spec)
    }

    /// Weighted overlap-add inverse normalized by the summed squared window.
    pub fn istft(&self, spec: &ComplexSpectrogram, length: usize) -> Result<Waveform> {
        let frames = spec.frames();
        let cover = coverage(frames);
        if length > cover {
            return Err(Error::Contract(format!(
                "requested {length} samples but {frames} frames only cover {cover}"
            )));
        }
        let mut out = vec![0.0; cover];
        let mut weight = vec![0.0; cover];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let scale = 1.0 / FFT_SIZE as f64;
        for l in 0..frames {
            for k in 0..NUM_BINS {
                let c = Complex::new(spec.real.data()[l * NUM_BINS + k], spec.imag.data()[l * NUM_BINS + k]);
                buf[k] = c;
                if k > 0 && k < FFT_SIZE / 2 {
                    buf[FFT_SIZE - k] = c.conj();
                }
            }
            self.inverse.process(&mut buf);
            let base = l * HOP;
            for (n, (c, &win)) in buf.iter().zip(&self.window).enumerate() {
                out[base + n] += c.re * scale * win;
                weight[base + n] += win * win;
            }
        }
        let samples = out
            .iter()
            .zip(&weight)
            .take(length)
            .map(|(&v, &w)| if w > MIN_OVERLAP { v / w } else { 0.0 })
            .collect();
        Ok(Waveform::new(samples))
    }
}

pub fn stft(w: &Waveform) -> Result<ComplexSpectrogram> {
    Stft::new().stft(w)
}

pub fn istft(spec: &ComplexSpectrogram, length: usize) -> Result<Waveform> {
    Stft::new().istft(spec, length)
}

pub fn to_mag_phase(spec: &ComplexSpectrogram) -> MagPhase {
    let mut phase = spec.real.clone();
    for (p, &i) in phase.data_mut().iter_mut().zip(spec.imag.data()) {
        *p = i.atan2(*p);
    }
    MagPhase {
        mag: spec.magnitude(),
        phase,
    }
}

/// `mag * e^{j phase}` in Cartesian form.
pub fn couple(mag: &Tensor<f64>, phase: &Tensor<f64>) -> Result<ComplexSpectrogram> {
    if mag.shape() != phase.shape() {
        return Err(Error::shape("couple", mag.shape(), phase.shape()));
    }
    if let Some(v) = mag.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("magnitude must be nonnegative, found {v}")));
    }
    let mut real = mag.clone();
    let mut imag = mag.clone();
    for ((r, i), &p) in real.data_mut().iter_mut().zip(imag.data_mut()).zip(phase.data()) {
        let m = *r;
        *r = m * p.cos();
        *i = m * p.sin();
    }
    ComplexSpectrogram::new(real, imag)
}
