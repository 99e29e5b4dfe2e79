//! Normalization with per-channel affine parameters.

use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per (batch, channel) over all frames and bins. Looks at future frames.
    Instance,
    /// Per (batch, frame) over all channels and bins. Causal.
    Frame,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::Instance => "instance",
            NormMode::Frame => "frame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "instance" => Some(NormMode::Instance),
            "frame" => Some(NormMode::Frame),
            _ => None,
        }
    }
}

/// Saved forward state: normalized values and the inverse std of each group.
#[derive(Clone, Debug)]
pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Calls `f(group, flat_index)` for every element, grouped per `mode`.
/// Groups are enumerated in a fixed order so results are reproducible.
fn for_each_group<F: FnMut(usize, std::ops::Range<usize>)>(shape: &[usize], mode: NormMode, mut f: F) {
    let (b, c, t, fr) = (shape[0], shape[1], shape[2], shape[3]);
    match mode {
        NormMode::Instance => {
            for bi in 0..b {
                for ci in 0..c {
                    let g = bi * c + ci;
                    let start = g * t * fr;
                    f(g, start..start + t * fr);
                }
            }
        }
        NormMode::Frame => {
            for bi in 0..b {
                for ti in 0..t {
                    let g = bi * t + ti;
                    for ci in 0..c {
                        let start = ((bi * c + ci) * t + ti) * fr;
                        f(g, start..start + fr);
                    }
                }
            }
        }
    }
}

fn group_count(shape: &[usize], mode: NormMode) -> (usize, usize) {
    let (b, c, t, f) = (shape[0], shape[1], shape[2], shape[3]);
    match mode {
        NormMode::Instance => (b * c, t * f),
        NormMode::Frame => (b * t, c * f),
    }
}

pub(crate) fn norm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    mode: NormMode,
) -> (Tensor<T>, NormCache<T>) {
    let shape = x.shape();
    let (ng, n) = group_count(shape, mode);
    let nf = T::from_f64(n as f64);
    let mut sum = vec![T::zero(); ng];
    for_each_group(shape, mode, |g, r| {
        sum[g] += x.data()[r].iter().copied().sum::<T>();
    });
    let mean: Vec<T> = sum.iter().map(|&s| s / nf).collect();
    let mut var = vec![T::zero(); ng];
    for_each_group(shape, mode, |g, r| {
        let m = mean[g];
        var[g] += x.data()[r].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    });
    let eps = T::from_f64(NORM_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / nf + eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(shape.to_vec());
    for_each_group(shape, mode, |g, r| {
        let (m, s) = (mean[g], inv_std[g]);
        for i in r {
            xhat.data_mut()[i] = (x.data()[i] - m) * s;
        }
    });
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut y = xhat.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = *v * gain.data()[ch] + bias.data()[ch];
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns (dx, dgain, dbias).
pub(crate) fn norm_backward<T: Real>(
    dy: &Tensor<T>,
    gain: &Tensor<T>,
    cache: &NormCache<T>,
    mode: NormMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = dy.shape();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let (ng, n) = group_count(shape, mode);
    let nf = T::from_f64(n as f64);
    let xhat = &cache.xhat;

    let mut dgain = Tensor::zeros([c]);
    let mut dbias = Tensor::zeros([c]);
    let mut dxhat = Tensor::zeros(shape.to_vec());
    for i in 0..dy.len() {
        let ch = (i / plane) % c;
        let g = dy.data()[i];
        dgain.data_mut()[ch] += g * xhat.data()[i];
        dbias.data_mut()[ch] += g;
        dxhat.data_mut()[i] = g * gain.data()[ch];
    }

    let mut s1 = vec![T::zero(); ng];
    let mut s2 = vec![T::zero(); ng];
    for_each_group(shape, mode, |g, r| {
        for i in r {
            s1[g] += dxhat.data()[i];
            s2[g] += dxhat.data()[i] * xhat.data()[i];
        }
    });
    let mut dx = Tensor::zeros(shape.to_vec());
    for_each_group(shape, mode, |g, r| {
        let (m1, m2, s) = (s1[g] / nf, s2[g] / nf, cache.inv_std[g]);
        for i in r {
            dx.data_mut()[i] = s * (dxhat.data()[i] - m1 - xhat.data()[i] * m2);
        }
    });
    (dx, dgain, dbias)
}
