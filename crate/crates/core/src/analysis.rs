//! Structural checks: parameter counts, receptive field and causality probes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{ConvSpec, Padding, Tape};
use crate::error::Result;
use crate::nets::{CmeNet, CsrNet, CtsNet};
use crate::nn::{tcm::dilated_spec, Bound, Conv, ParamKind, ParamStore, Span, tcm_stack, Tcm, TcmConfig, Topology};
use crate::nn::layers::ConvDef;
use crate::stft::{coverage, Waveform, HOP, NUM_BINS, SAMPLE_RATE};
use crate::tensor::{Real, Tensor};

/// Parameter tallies of one store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    /// Block name (first two name segments) to parameter count, in registration order.
    pub blocks: Vec<(String, usize)>,
    pub conv_only: usize,
    pub norm_act: usize,
    pub smoothing: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn count(&self, include_norms: bool) -> usize {
        if include_norms {
            self.total
        } else {
            self.conv_only
        }
    }

    /// Sum two reports, e.g. the CME and CSR stores of a CTS-Net.
    pub fn merge(mut self, other: &ParamReport) -> ParamReport {
        self.blocks.extend(other.blocks.iter().cloned());
        self.conv_only += other.conv_only;
        self.norm_act += other.norm_act;
        self.smoothing += other.smoothing;
        self.total += other.total;
        self
    }

    /// `key=value` lines.
    pub fn to_kv(&self, include_norms: bool) -> String {
        let mut s = String::new();
        for (name, n) in &self.blocks {
            s.push_str(&format!("block.{name}={n}\n"));
        }
        s.push_str(&format!("params.conv_only={}\n", self.conv_only));
        s.push_str(&format!("params.norm_act={}\n", self.norm_act));
        s.push_str(&format!("params.smoothing={}\n", self.smoothing));
        s.push_str(&format!("params.total={}\n", self.total));
        s.push_str(&format!("params.reported={}\n", self.count(include_norms)));
        s
    }
}

fn block_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

/// Purely structural count over a parameter store.
pub fn count_store<T: Real>(store: &ParamStore<T>) -> ParamReport {
    let mut r = ParamReport {
        blocks: Vec::new(),
        conv_only: 0,
        norm_act: 0,
        smoothing: 0,
        total: 0,
    };
    for p in store.iter() {
        let n = p.value.len();
        match p.kind {
            k if k.is_conv() => r.conv_only += n,
            ParamKind::Smoothing => r.smoothing += n,
            _ => r.norm_act += n,
        }
        r.total += n;
        let block = block_of(&p.name);
        match r.blocks.last_mut() {
            Some((b, c)) if *b == block => *c += n,
            _ => r.blocks.push((block, n)),
        }
    }
    r
}

/// Anything with parameters and a temporal layer graph.
pub trait Analyzable {
    fn param_report(&self) -> ParamReport;
    fn topology(&self) -> Topology;
}

impl<T: Real> Analyzable for CmeNet<T> {
    fn param_report(&self) -> ParamReport {
        count_store(&self.store)
    }
    fn topology(&self) -> Topology {
        CmeNet::topology(self)
    }
}

impl<T: Real> Analyzable for CsrNet<T> {
    fn param_report(&self) -> ParamReport {
        count_store(&self.store)
    }
    fn topology(&self) -> Topology {
        CsrNet::topology(self)
    }
}

impl<T: Real> Analyzable for CtsNet<T> {
    fn param_report(&self) -> ParamReport {
        count_store(&self.cme.store).merge(&count_store(&self.csr.store))
    }
    fn topology(&self) -> Topology {
        CtsNet::topology(self)
    }
}

/// Parameters of a single temporal convolution module.
pub fn tcm_report(cfg: TcmConfig) -> Result<ParamReport> {
    let mut store = ParamStore::<f32>::new();
    Tcm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "tcm", cfg)?;
    Ok(count_store(&store))
}

/// Temporal span of one dilation cycle of modules built from `base`.
pub fn group_receptive_field(base: TcmConfig) -> Result<ReceptiveFieldReport> {
    let mut store = ParamStore::<f32>::new();
    let tcms = tcm_stack(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "g", 1, base)?;
    Ok(ReceptiveFieldReport {
        span: Topology::Seq(tcms.iter().map(Tcm::topology).collect()).span(),
    })
}

pub fn count_params(model: &impl Analyzable, include_norms: bool) -> (ParamReport, usize) {
    let r = model.param_report();
    let n = r.count(include_norms);
    (r, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveFieldReport {
    pub span: Span,
}

impl ReceptiveFieldReport {
    /// Past context in seconds, counting the current frame's window.
    pub fn past_seconds(&self) -> Option<f64> {
        self.span
            .past
            .finite()
            .map(|p| (p * HOP + crate::stft::FFT_SIZE) as f64 / SAMPLE_RATE as f64)
    }

    pub fn is_causal(&self) -> bool {
        self.span.future.finite() == Some(0)
    }

    pub fn to_kv(&self) -> String {
        let secs = self
            .past_seconds()
            .map(|s| format!("{s:.4}"))
            .unwrap_or_else(|| "unbounded".into());
        format!(
            "rf.past_frames={}\nrf.future_frames={}\nrf.past_seconds={secs}\n",
            self.span.past, self.span.future
        )
    }
}

impl fmt::Display for ReceptiveFieldReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "past {} frames, future {} frames", self.span.past, self.span.future)
    }
}

pub fn receptive_field(model: &impl Analyzable) -> ReceptiveFieldReport {
    ReceptiveFieldReport {
        span: model.topology().span(),
    }
}

/// A deterministic map from one `[1, C, T, F]` input to labeled
/// intermediates, in evaluation order. The last entry is the output.
pub trait Probe: Sync {
    fn name(&self) -> &str;
    fn input_channels(&self) -> usize;
    fn input_bins(&self) -> usize {
        NUM_BINS
    }
    fn nonnegative_input(&self) -> bool {
        false
    }
    fn trace(&self, x: &Tensor<f64>) -> Result<Vec<(String, Tensor<f64>)>>;
}

fn labeled(tape: &Tape<f64>) -> Vec<(String, Tensor<f64>)> {
    tape.labels()
        .iter()
        .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
        .collect()
}

fn plane(x: &Tensor<f64>, c: usize) -> Tensor<f64> {
    let (t, f) = (x.dim(2), x.dim(3));
    let n = t * f;
    Tensor::new([1, 1, t, f], x.data()[c * n..(c + 1) * n].to_vec()).expect("sized")
}

impl Probe for CmeNet<f64> {
    fn name(&self) -> &str {
        "cme"
    }
    fn input_channels(&self) -> usize {
        1
    }
    fn nonnegative_input(&self) -> bool {
        true
    }
    fn trace(&self, x: &Tensor<f64>) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        self.forward(&mut tape, &p, x)?;
        Ok(labeled(&tape))
    }
}

impl Probe for CsrNet<f64> {
    fn name(&self) -> &str {
        "csr"
    }
    fn input_channels(&self) -> usize {
        4
    }
    fn trace(&self, x: &Tensor<f64>) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let v: Vec<_> = (0..4).map(|c| tape.constant(plane(x, c))).collect();
        let (r, i) = self.forward(&mut tape, &p, v[0], v[1], v[2], v[3])?;
        let out = tape.concat(&[r, i])?;
        tape.label(out, "csr.out");
        Ok(labeled(&tape))
    }
}

impl Probe for CtsNet<f64> {
    fn name(&self) -> &str {
        "cts"
    }
    fn input_channels(&self) -> usize {
        2
    }
    fn trace(&self, x: &Tensor<f64>) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut tape = Tape::new();
        let pc = self.cme.store.bind(&mut tape, false);
        let ps = self.csr.store.bind(&mut tape, false);
        let (r, i) = (tape.constant(plane(x, 0)), tape.constant(plane(x, 1)));
        let v = self.forward(&mut tape, &pc, &ps, r, i)?;
        let out = tape.concat(&[v.refined_r, v.refined_i])?;
        tape.label(out, "cts.out");
        Ok(labeled(&tape))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub trial: usize,
    pub frame: usize,
    /// Earliest labeled intermediate whose past changed.
    pub layer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalityReport {
    pub model: String,
    pub trials: usize,
    pub violations: Vec<Violation>,
    /// Trials in which the perturbed frame itself changed the output.
    pub sensitive: usize,
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Distinct offending layers, in first-seen order.
    pub fn offending_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for v in &self.violations {
            if !out.contains(&v.layer) {
                out.push(v.layer.clone());
            }
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "causality.model={}\ncausality.trials={}\ncausality.violations={}\ncausality.sensitive={}\ncausality.result={}\n",
            self.model,
            self.trials,
            self.violations.len(),
            self.sensitive,
            if self.passed() { "pass" } else { "fail" }
        );
        for l in self.offending_layers() {
            s.push_str(&format!("causality.offending_layer={l}\n"));
        }
        s
    }
}

fn frames_differ(a: &Tensor<f64>, b: &Tensor<f64>, upto: usize) -> bool {
    if a.shape() != b.shape() {
        return true;
    }
    let s = a.shape();
    if s.len() != 4 {
        return a.data() != b.data();
    }
    let (bs, c, t, f) = (s[0], s[1], s[2], s[3]);
    let upto = upto.min(t - 1);
    (0..bs * c).any(|bc| {
        let lo = bc * t * f;
        let hi = lo + (upto + 1) * f;
        a.data()[lo..hi].iter().zip(&b.data()[lo..hi]).any(|(x, y)| x.to_bits() != y.to_bits())
    })
}

fn frame_changed(a: &Tensor<f64>, b: &Tensor<f64>, t: usize) -> bool {
    let s = a.shape();
    let (bs, c, tt, f) = (s[0], s[1], s[2], s[3]);
    (0..bs * c).any(|bc| {
        let lo = (bc * tt + t) * f;
        a.data()[lo..lo + f] != b.data()[lo..lo + f]
    })
}

/// Future-perturbation probe: for random `t`, redraw every input frame
/// after `t` and require all labeled intermediates at frames `<= t` to be
/// bitwise unchanged.
pub fn probe_causality(model: &dyn Probe, frames: usize, trials: usize, seed: u64) -> Result<CausalityReport> {
    assert!(frames >= 2, "probe needs at least two frames");
    let outcomes: Vec<Result<(Option<Violation>, bool)>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let shape = [1, model.input_channels(), frames, model.input_bins()];
            let nonneg = model.nonnegative_input();
            let draw = |rng: &mut ChaCha8Rng| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if nonneg {
                    v.abs()
                } else {
                    v
                }
            };
            let x = Tensor::from_fn(shape, |_| draw(&mut rng));
            let t = rng.gen_range(0..frames - 1);
            let mut y = x.clone();
            let f = model.input_bins();
            for c in 0..shape[1] {
                for tt in t + 1..frames {
                    for k in 0..f {
                        let i = (c * frames + tt) * f + k;
                        y.data_mut()[i] = draw(&mut rng);
                    }
                }
            }
            let a = model.trace(&x)?;
            let b = model.trace(&y)?;
            let violation = a
                .iter()
                .zip(&b)
                .find(|((_, va), (_, vb))| frames_differ(va, vb, t))
                .map(|((name, _), _)| Violation {
                    trial,
                    frame: t,
                    layer: name.clone(),
                });
            let sensitive = match (a.last(), b.last()) {
                (Some((_, va)), Some((_, vb))) if va.shape().len() == 4 => frame_changed(va, vb, t + 1),
                _ => false,
            };
            Ok((violation, sensitive))
        })
        .collect();
    let mut report = CausalityReport {
        model: model.name().to_string(),
        trials,
        violations: Vec::new(),
        sensitive: 0,
    };
    for o in outcomes {
        let (v, s) = o?;
        report.violations.extend(v);
        report.sensitive += usize::from(s);
    }
    Ok(report)
}

/// Waveform-level probe: with `k` hops fixed, replace all audio after
/// sample `k*HOP + FFT_SIZE` and require the first `k*HOP` output samples
/// to be bitwise unchanged.
pub fn probe_waveform_causality(net: &CtsNet<f64>, frames: usize, trials: usize, seed: u64) -> Result<usize> {
    let len = coverage(frames);
    let bad: Vec<Result<bool>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let k = rng.gen_range(1..frames - 1);
            let cut = k * HOP + crate::stft::FFT_SIZE;
            let mut b = a.clone();
            for s in &mut b[cut..] {
                *s = rng.gen_range(-0.5..0.5);
            }
            let ya = net.enhance(&Waveform::new(a))?.enhanced;
            let yb = net.enhance(&Waveform::new(b))?.enhanced;
            let n = k * HOP;
            Ok(ya.samples[..n]
                .iter()
                .zip(&yb.samples[..n])
                .any(|(p, q)| p.to_bits() != q.to_bits()))
        })
        .collect();
    let mut violations = 0;
    for b in bad {
        violations += usize::from(b?);
    }
    Ok(violations)
}

/// Small stack of single-channel temporal convolutions on `[1, 1, T, 1]`,
/// used to cross-check the analytic receptive field and as a negative
/// control for the causality probe.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub store: ParamStore<f64>,
    pub layers: Vec<Conv>,
}

impl ConvStack {
    /// Causal dilated layers with positive weights so no tap cancels.
    pub fn causal(kernel: usize, dilations: &[usize], seed: u64) -> Self {
        let specs: Vec<ConvSpec> = dilations.iter().map(|&d| dilated_spec(kernel, d)).collect();
        Self::build(kernel, &specs, seed)
    }

    /// Like [`ConvStack::causal`] but layer `bad` pads symmetrically in time.
    pub fn with_symmetric_layer(kernel: usize, dilations: &[usize], bad: usize, seed: u64) -> Self {
        let specs: Vec<ConvSpec> = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if i == bad {
                    ConvSpec::default().dilation(d, 1).padding(Padding::symmetric_time(kernel, d))
                } else {
                    dilated_spec(kernel, d)
                }
            })
            .collect();
        Self::build(kernel, &specs, seed)
    }

    fn build(kernel: usize, specs: &[ConvSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers: Vec<Conv> = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                Conv::new(
                    &mut store,
                    &mut rng,
                    ConvDef {
                        name: &format!("stack.l{i}"),
                        cin: 1,
                        cout: 1,
                        kernel: (kernel, 1),
                        spec,
                        bias: false,
                        transposed: false,
                    },
                )
            })
            .collect();
        for p in store.iter_mut() {
            p.value = p.value.map(|v: f64| v.abs() + 0.1);
        }
        Self { store, layers }
    }

    pub fn topology(&self) -> Topology {
        Topology::Seq(self.layers.iter().map(Conv::topology).collect())
    }

    fn run(&self, tape: &mut Tape<f64>, p: &Bound, x: &Tensor<f64>) -> Result<()> {
        let mut h = tape.constant(x.clone());
        for l in &self.layers {
            h = l.forward(tape, p, h)?;
            tape.label(h, l.name.clone());
        }
        Ok(())
    }
}

impl Probe for ConvStack {
    fn name(&self) -> &str {
        "stack"
    }
    fn input_channels(&self) -> usize {
        1
    }
    fn input_bins(&self) -> usize {
        1
    }
    fn trace(&self, x: &Tensor<f64>) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        self.run(&mut tape, &p, x)?;
        Ok(labeled(&tape))
    }
}

/// Measured span from a unit impulse at input frame `t0`: output frames
/// `t0 - future ..= t0 + past` respond.
pub fn impulse_span(model: &dyn Probe, frames: usize, t0: usize) -> Result<Span> {
    let shape = [1, model.input_channels(), frames, model.input_bins()];
    let f = model.input_bins();
    let base = Tensor::<f64>::zeros(shape);
    let mut x = base.clone();
    for c in 0..shape[1] {
        for k in 0..f {
            x.data_mut()[(c * frames + t0) * f + k] = 1.0;
        }
    }
    let out_a = model.trace(&x)?.pop().map(|(_, v)| v).expect("probe emits an output");
    let out_b = model.trace(&base)?.pop().map(|(_, v)| v).expect("probe emits an output");
    let touched: Vec<usize> = (0..out_a.dim(2)).filter(|&t| frame_changed(&out_a, &out_b, t)).collect();
    let (lo, hi) = match (touched.first(), touched.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => (t0, t0),
    };
    Ok(Span {
        past: crate::nn::Extent::Finite(hi - t0),
        future: crate::nn::Extent::Finite(t0 - lo.min(t0)),
    })
}
