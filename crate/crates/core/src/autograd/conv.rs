//! Convolution geometry and the three tap kernels shared by `conv2d` and
//! `conv2d_transposed`.
//!
//! Both operators relate a "small" plane (conv output / transposed input) to
//! a "big" plane (conv input / transposed output) through the index map
//! `big = small * stride + tap * dilation - pad_lo` on each axis. Forward
//! convolution gathers along that map, transposed convolution scatters along
//! it, so with equal geometry the two are exact adjoints.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Zero padding as `(before, after)` per axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub time: (usize, usize),
    pub freq: (usize, usize),
}

impl Padding {
    pub const NONE: Padding = Padding {
        time: (0, 0),
        freq: (0, 0),
    };

    /// Left-pad `(kt - 1) * dt` frames so frame `t` only sees frames `<= t`.
    pub fn causal(kt: usize, dt: usize) -> Self {
        Padding {
            time: ((kt - 1) * dt, 0),
            freq: (0, 0),
        }
    }

    /// Centered time padding. Not causal; used by negative-control fixtures.
    pub fn symmetric_time(kt: usize, dt: usize) -> Self {
        let total = (kt - 1) * dt;
        Padding {
            time: (total / 2, total - total / 2),
            freq: (0, 0),
        }
    }

    pub fn with_freq(mut self, before: usize, after: usize) -> Self {
        self.freq = (before, after);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Padding,
    pub groups: usize,
    /// Extra trailing extent for transposed convolution; ignored by `conv2d`.
    pub output_padding: (usize, usize),
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: Padding::NONE,
            groups: 1,
            output_padding: (0, 0),
        }
    }
}

impl ConvSpec {
    pub fn stride(mut self, t: usize, f: usize) -> Self {
        self.stride = (t, f);
        self
    }

    pub fn dilation(mut self, t: usize, f: usize) -> Self {
        self.dilation = (t, f);
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn output_padding(mut self, t: usize, f: usize) -> Self {
        self.output_padding = (t, f);
        self
    }
}

/// Output extent of a convolution along one axis, `None` when the kernel
/// does not fit in the padded input.
pub fn conv_out_len(n: usize, k: usize, stride: usize, dil: usize, pad: (usize, usize)) -> Option<usize> {
    let padded = n + pad.0 + pad.1;
    let span = dil * (k - 1) + 1;
    if k == 0 || stride == 0 || dil == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(
    n: usize,
    k: usize,
    stride: usize,
    dil: usize,
    pad: (usize, usize),
    out_pad: usize,
) -> Option<usize> {
    if n == 0 || k == 0 || stride == 0 || dil == 0 {
        return None;
    }
    let full = (n - 1) * stride + dil * (k - 1) + 1 + out_pad;
    full.checked_sub(pad.0 + pad.1).filter(|&v| v > 0)
}

/// Indices `i < small_len` with `0 <= i * stride + off < big_len`.
fn valid_range(small_len: usize, big_len: usize, stride: usize, off: isize) -> Range<usize> {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_num = big_len as isize - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let lo = lo.max(0) as usize;
    let hi = ((hi + 1).max(0) as usize).min(small_len);
    lo..hi.max(lo)
}

/// One kernel tap resolved against concrete plane extents.
#[derive(Clone, Debug)]
pub(crate) struct Tap {
    ts: Range<usize>,
    fs: Range<usize>,
    t_off: isize,
    f_off: isize,
}

/// Plane geometry for a whole kernel: one [`Tap`] per (kt, kf).
#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub small: (usize, usize),
    pub big: (usize, usize),
    pub stride: (usize, usize),
    pub taps: Vec<Tap>,
}

impl Geometry {
    pub fn new(
        small: (usize, usize),
        big: (usize, usize),
        kernel: (usize, usize),
        spec: &ConvSpec,
    ) -> Self {
        let mut taps = Vec::with_capacity(kernel.0 * kernel.1);
        for kt in 0..kernel.0 {
            let t_off = (kt * spec.dilation.0) as isize - spec.padding.time.0 as isize;
            let ts = valid_range(small.0, big.0, spec.stride.0, t_off);
            for kf in 0..kernel.1 {
                let f_off = (kf * spec.dilation.1) as isize - spec.padding.freq.0 as isize;
                let fs = valid_range(small.1, big.1, spec.stride.1, f_off);
                taps.push(Tap { ts: ts.clone(), fs, t_off, f_off });
            }
        }
        Self {
            small,
            big,
            stride: spec.stride,
            taps,
        }
    }

    /// `small[i] += w * big[map(i)]`
    #[inline]
    pub fn gather<T: Real>(&self, tap: usize, w: T, small: &mut [T], big: &[T]) {
        let tap = &self.taps[tap];
        if tap.fs.is_empty() || tap.ts.is_empty() {
            return;
        }
        let (sf_len, bf_len) = (self.small.1, self.big.1);
        let (st, sf) = self.stride;
        if sf_len == 1 && bf_len == 1 && st == 1 {
            let b0 = (tap.ts.start as isize + tap.t_off) as usize;
            let n = tap.ts.len();
            for (o, &i) in small[tap.ts.clone()].iter_mut().zip(&big[b0..b0 + n]) {
                *o += w * i;
            }
            return;
        }
        let nf = tap.fs.len();
        for t in tap.ts.clone() {
            let bt = (t * st) as isize + tap.t_off;
            let srow = &mut small[t * sf_len + tap.fs.start..t * sf_len + tap.fs.end];
            let bbase = bt as usize * bf_len;
            let b0 = (bbase as isize + (tap.fs.start * sf) as isize + tap.f_off) as usize;
            if sf == 1 {
                for (o, &i) in srow.iter_mut().zip(&big[b0..b0 + nf]) {
                    *o += w * i;
                }
            } else {
                for (j, o) in srow.iter_mut().enumerate() {
                    *o += w * big[b0 + j * sf];
                }
            }
        }
    }

    /// `big[map(i)] += w * small[i]`
    #[inline]
    pub fn scatter<T: Real>(&self, tap: usize, w: T, big: &mut [T], small: &[T]) {
        let tap = &self.taps[tap];
        if tap.fs.is_empty() || tap.ts.is_empty() {
            return;
        }
        let (sf_len, bf_len) = (self.small.1, self.big.1);
        let (st, sf) = self.stride;
        if sf_len == 1 && bf_len == 1 && st == 1 {
            let b0 = (tap.ts.start as isize + tap.t_off) as usize;
            let n = tap.ts.len();
            for (o, &i) in big[b0..b0 + n].iter_mut().zip(&small[tap.ts.clone()]) {
                *o += w * i;
            }
            return;
        }
        let nf = tap.fs.len();
        for t in tap.ts.clone() {
            let bt = (t * st) as isize + tap.t_off;
            let srow = &small[t * sf_len + tap.fs.start..t * sf_len + tap.fs.end];
            let b0 = (bt * bf_len as isize + (tap.fs.start * sf) as isize + tap.f_off) as usize;
            if sf == 1 {
                for (o, &i) in big[b0..b0 + nf].iter_mut().zip(srow) {
                    *o += w * i;
                }
            } else {
                for (j, &i) in srow.iter().enumerate() {
                    big[b0 + j * sf] += w * i;
                }
            }
        }
    }

    /// `sum_i small[i] * big[map(i)]`
    #[inline]
    pub fn dot<T: Real>(&self, tap: usize, small: &[T], big: &[T]) -> T {
        let tap = &self.taps[tap];
        let mut acc = T::zero();
        if tap.fs.is_empty() || tap.ts.is_empty() {
            return acc;
        }
        let (sf_len, bf_len) = (self.small.1, self.big.1);
        let (st, sf) = self.stride;
        if sf_len == 1 && bf_len == 1 && st == 1 {
            let b0 = (tap.ts.start as isize + tap.t_off) as usize;
            let n = tap.ts.len();
            for (&a, &b) in small[tap.ts.clone()].iter().zip(&big[b0..b0 + n]) {
                acc += a * b;
            }
            return acc;
        }
        let nf = tap.fs.len();
        for t in tap.ts.clone() {
            let bt = (t * st) as isize + tap.t_off;
            let srow = &small[t * sf_len + tap.fs.start..t * sf_len + tap.fs.end];
            let b0 = (bt * bf_len as isize + (tap.fs.start * sf) as isize + tap.f_off) as usize;
            if sf == 1 {
                for (&a, &b) in srow.iter().zip(&big[b0..b0 + nf]) {
                    acc += a * b;
                }
            } else {
                for (j, &a) in srow.iter().enumerate() {
                    acc += a * big[b0 + j * sf];
                }
            }
        }
        acc
    }
}

/// Validated shapes for a (possibly transposed) convolution.
pub(crate) struct ConvShapes {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub out: [usize; 4],
    pub geom: Geometry,
}

pub(crate) fn conv_shapes(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<ConvShapes> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape("conv2d", x, w));
    }
    let g = spec.groups.max(1);
    let (b, cin, t, f) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kt, kf) = (w[0], w[1], w[2], w[3]);
    if cin % g != 0 || cout % g != 0 || cin_g * g != cin {
        return Err(Error::shape("conv2d", x, w));
    }
    let to = conv_out_len(t, kt, spec.stride.0, spec.dilation.0, spec.padding.time);
    let fo = conv_out_len(f, kf, spec.stride.1, spec.dilation.1, spec.padding.freq);
    let (Some(to), Some(fo)) = (to, fo) else {
        return Err(Error::shape("conv2d", x, w));
    };
    Ok(ConvShapes {
        batch: b,
        cin,
        cout,
        groups: g,
        kernel: (kt, kf),
        out: [b, cout, to, fo],
        geom: Geometry::new((to, fo), (t, f), (kt, kf), spec),
    })
}

/// Kernel layout for transposed convolution is `[cin, cout / groups, kt, kf]`.
pub(crate) fn conv_transpose_shapes(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<ConvShapes> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape("conv2d_transposed", x, w));
    }
    let g = spec.groups.max(1);
    let (b, cin, t, f) = (x[0], x[1], x[2], x[3]);
    let (win, cout_g, kt, kf) = (w[0], w[1], w[2], w[3]);
    if win != cin || cin % g != 0 {
        return Err(Error::shape("conv2d_transposed", x, w));
    }
    let to = conv_transpose_out_len(t, kt, spec.stride.0, spec.dilation.0, spec.padding.time, spec.output_padding.0);
    let fo = conv_transpose_out_len(f, kf, spec.stride.1, spec.dilation.1, spec.padding.freq, spec.output_padding.1);
    let (Some(to), Some(fo)) = (to, fo) else {
        return Err(Error::shape("conv2d_transposed", x, w));
    };
    let cout = cout_g * g;
    Ok(ConvShapes {
        batch: b,
        cin,
        cout,
        groups: g,
        kernel: (kt, kf),
        out: [b, cout, to, fo],
        geom: Geometry::new((t, f), (to, fo), (kt, kf), spec),
    })
}

pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    s: &ConvShapes,
) -> Tensor<T> {
    let mut out = Tensor::zeros(s.out.to_vec());
    let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
    let ntaps = s.kernel.0 * s.kernel.1;
    let xplane = x.dim(2) * x.dim(3);
    let oplane = s.out[2] * s.out[3];
    let wd = w.data();
    for b in 0..s.batch {
        for co in 0..s.cout {
            let g = co / cout_g;
            let o0 = (b * s.cout + co) * oplane;
            let oslice = &mut out.data_mut()[o0..o0 + oplane];
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                oslice.iter_mut().for_each(|v| *v = bv);
            }
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xs = &x.data()[(b * s.cin + ci) * xplane..(b * s.cin + ci + 1) * xplane];
                let w0 = (co * cin_g + cil) * ntaps;
                for tap in 0..ntaps {
                    let wv = wd[w0 + tap];
                    if wv != T::zero() {
                        s.geom.gather(tap, wv, oslice, xs);
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db) for forward convolution.
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    s: &ConvShapes,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
    let ntaps = s.kernel.0 * s.kernel.1;
    let xplane = x.dim(2) * x.dim(3);
    let oplane = s.out[2] * s.out[3];
    let mut dx = need_x.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut db = Tensor::zeros([s.cout]);
    for b in 0..s.batch {
        for co in 0..s.cout {
            let g = co / cout_g;
            let dys = &dy.data()[(b * s.cout + co) * oplane..(b * s.cout + co + 1) * oplane];
            db.data_mut()[co] += dys.iter().copied().sum();
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xr = (b * s.cin + ci) * xplane..(b * s.cin + ci + 1) * xplane;
                let w0 = (co * cin_g + cil) * ntaps;
                for tap in 0..ntaps {
                    if let Some(dx) = dx.as_mut() {
                        let wv = w.data()[w0 + tap];
                        if wv != T::zero() {
                            s.geom.scatter(tap, wv, &mut dx.data_mut()[xr.clone()], dys);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[w0 + tap] += s.geom.dot(tap, dys, &x.data()[xr.clone()]);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_transpose_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    s: &ConvShapes,
) -> Tensor<T> {
    let mut out = Tensor::zeros(s.out.to_vec());
    let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
    let ntaps = s.kernel.0 * s.kernel.1;
    let xplane = x.dim(2) * x.dim(3);
    let oplane = s.out[2] * s.out[3];
    for b in 0..s.batch {
        for co in 0..s.cout {
            let g = co / cout_g;
            let col = co % cout_g;
            let o0 = (b * s.cout + co) * oplane;
            let oslice = &mut out.data_mut()[o0..o0 + oplane];
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                oslice.iter_mut().for_each(|v| *v = bv);
            }
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xs = &x.data()[(b * s.cin + ci) * xplane..(b * s.cin + ci + 1) * xplane];
                let w0 = (ci * cout_g + col) * ntaps;
                for tap in 0..ntaps {
                    let wv = w.data()[w0 + tap];
                    if wv != T::zero() {
                        s.geom.scatter(tap, wv, oslice, xs);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    s: &ConvShapes,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
    let ntaps = s.kernel.0 * s.kernel.1;
    let xplane = x.dim(2) * x.dim(3);
    let oplane = s.out[2] * s.out[3];
    let mut dx = need_x.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut db = Tensor::zeros([s.cout]);
    for b in 0..s.batch {
        for co in 0..s.cout {
            let g = co / cout_g;
            let col = co % cout_g;
            let dys = &dy.data()[(b * s.cout + co) * oplane..(b * s.cout + co + 1) * oplane];
            db.data_mut()[co] += dys.iter().copied().sum();
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xr = (b * s.cin + ci) * xplane..(b * s.cin + ci + 1) * xplane;
                let w0 = (ci * cout_g + col) * ntaps;
                for tap in 0..ntaps {
                    if let Some(dx) = dx.as_mut() {
                        let wv = w.data()[w0 + tap];
                        if wv != T::zero() {
                            s.geom.gather(tap, wv, &mut dx.data_mut()[xr.clone()], dys);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[w0 + tap] += s.geom.dot(tap, &x.data()[xr.clone()], dys);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
