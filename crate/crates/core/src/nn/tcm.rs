//! Temporal convolution modules: original (O), modified gated (MG) and the
//! dual modified gated (DMG) variant with complementary dilations.
//!
//! All operate on folded temporal features `[B, C, T, 1]` and are residual:
//! the output is `x + branch(x)`. Convolutions inside TCMs carry no bias.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::layers::{Conv, DilatedConv, Norm, Prelu};
use super::params::{Bound, ParamStore};
use super::topology::Topology;

/// Number of modules sharing one dilation cycle.
pub const GROUP_SIZE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcmVariant {
    O,
    Mg,
    Dmg,
}

impl TcmVariant {
    pub fn name(self) -> &'static str {
        match self {
            TcmVariant::O => "o",
            TcmVariant::Mg => "mg",
            TcmVariant::Dmg => "dmg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o" => Some(TcmVariant::O),
            "mg" => Some(TcmVariant::Mg),
            "dmg" => Some(TcmVariant::Dmg),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcmConfig {
    pub variant: TcmVariant,
    pub channels_io: usize,
    pub bottleneck: usize,
    pub kernel_t: usize,
    /// Position inside the dilation cycle, `0..=m`.
    pub r: usize,
    pub m: usize,
    pub gate_weight_sharing: bool,
    pub smoothed: bool,
    pub norm: NormMode,
}

impl TcmConfig {
    pub fn o(r: usize) -> Self {
        Self {
            variant: TcmVariant::O,
            channels_io: 256,
            bottleneck: 512,
            kernel_t: 3,
            r,
            m: 5,
            gate_weight_sharing: false,
            smoothed: false,
            norm: NormMode::Frame,
        }
    }

    pub fn mg(r: usize) -> Self {
        Self {
            variant: TcmVariant::Mg,
            bottleneck: 64,
            kernel_t: 5,
            ..Self::o(r)
        }
    }

    pub fn dmg(r: usize) -> Self {
        Self {
            variant: TcmVariant::Dmg,
            ..Self::mg(r)
        }
    }

    pub fn with_io(mut self, io: usize, bottleneck: usize) -> Self {
        self.channels_io = io;
        self.bottleneck = bottleneck;
        self
    }

    pub fn primal_dilation(&self) -> usize {
        1 << self.r
    }

    pub fn dual_dilation(&self) -> usize {
        1 << (self.m - self.r)
    }

    fn validate(&self) -> Result<()> {
        if self.r > self.m {
            return Err(Error::Config(format!("dilation index r={} exceeds M={}", self.r, self.m)));
        }
        if self.channels_io == 0 || self.bottleneck == 0 || self.kernel_t == 0 {
            return Err(Error::Config("TCM extents must be positive".into()));
        }
        Ok(())
    }
}

/// `in 1x1 -> norm -> PReLU -> dilated conv`, the body shared by the main
/// and gate paths.
#[derive(Clone, Debug)]
pub struct GatedPath {
    pub input: Conv,
    pub norm: Norm,
    pub act: Prelu,
    pub dconv: DilatedConv,
}

impl GatedPath {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &TcmConfig, dilation: usize) -> Self {
        let h = cfg.bottleneck;
        Self {
            input: Conv::pointwise(store, rng, &format!("{name}.in"), cfg.channels_io, h),
            norm: Norm::new(store, &format!("{name}.norm"), h, cfg.norm),
            act: Prelu::new(store, &format!("{name}.act"), h),
            dconv: DilatedConv::new(store, rng, &format!("{name}.dconv"), h, h, cfg.kernel_t, dilation, 1, cfg.smoothed),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.input.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h)?;
        let h = self.act.forward(tape, p, h)?;
        self.dconv.forward(tape, p, h)
    }

    fn topology(&self, name: &str) -> Topology {
        Topology::Seq(vec![self.norm.topology(name), self.dconv.topology()])
    }
}

/// Main path gated by a sigmoid path; `gate == None` reuses the main path's
/// weights so only the activation differs.
#[derive(Clone, Debug)]
pub struct GatedUnit {
    pub main: GatedPath,
    pub gate: Option<GatedPath>,
}

impl GatedUnit {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &TcmConfig, dilation: usize) -> Self {
        let main = GatedPath::new(store, rng, &format!("{name}.main"), cfg, dilation);
        let gate = (!cfg.gate_weight_sharing).then(|| GatedPath::new(store, rng, &format!("{name}.gate"), cfg, dilation));
        Self { main, gate }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let m = self.main.forward(tape, p, x)?;
        let g = match &self.gate {
            Some(gate) => gate.forward(tape, p, x)?,
            None => m,
        };
        let g = tape.sigmoid(g)?;
        tape.mul(m, g)
    }

    fn topology(&self, name: &str) -> Topology {
        let mut branches = vec![self.main.topology(name)];
        if let Some(g) = &self.gate {
            branches.push(g.topology(name));
        }
        Topology::Parallel(branches)
    }
}

#[derive(Clone, Debug)]
pub struct OTcm {
    pub input: Conv,
    pub norm1: Norm,
    pub act1: Prelu,
    pub dconv: DilatedConv,
    pub norm2: Norm,
    pub act2: Prelu,
    pub output: Conv,
}

#[derive(Clone, Debug)]
pub struct MgTcm {
    pub unit: GatedUnit,
    pub output: Conv,
}

#[derive(Clone, Debug)]
pub struct DmgTcm {
    pub primal: GatedUnit,
    pub dual: GatedUnit,
    pub output: Conv,
}

#[derive(Clone, Debug)]
pub enum TcmBody {
    O(OTcm),
    Mg(MgTcm),
    Dmg(DmgTcm),
}

#[derive(Clone, Debug)]
pub struct Tcm {
    pub name: String,
    pub cfg: TcmConfig,
    pub body: TcmBody,
}

impl Tcm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: TcmConfig) -> Result<Self> {
        cfg.validate()?;
        let (io, h) = (cfg.channels_io, cfg.bottleneck);
        let body = match cfg.variant {
            TcmVariant::O => TcmBody::O(OTcm {
                input: Conv::pointwise(store, rng, &format!("{name}.in"), io, h),
                norm1: Norm::new(store, &format!("{name}.norm1"), h, cfg.norm),
                act1: Prelu::new(store, &format!("{name}.act1"), h),
                dconv: DilatedConv::new(
                    store,
                    rng,
                    &format!("{name}.dconv"),
                    h,
                    h,
                    cfg.kernel_t,
                    cfg.primal_dilation(),
                    h,
                    cfg.smoothed,
                ),
                norm2: Norm::new(store, &format!("{name}.norm2"), h, cfg.norm),
                act2: Prelu::new(store, &format!("{name}.act2"), h),
                output: Conv::pointwise(store, rng, &format!("{name}.out"), h, io),
            }),
            TcmVariant::Mg => TcmBody::Mg(MgTcm {
                unit: GatedUnit::new(store, rng, name, &cfg, cfg.primal_dilation()),
                output: Conv::pointwise(store, rng, &format!("{name}.out"), h, io),
            }),
            TcmVariant::Dmg => TcmBody::Dmg(DmgTcm {
                primal: GatedUnit::new(store, rng, &format!("{name}.primal"), &cfg, cfg.primal_dilation()),
                dual: GatedUnit::new(store, rng, &format!("{name}.dual"), &cfg, cfg.dual_dilation()),
                output: Conv::pointwise(store, rng, &format!("{name}.out"), 2 * h, io),
            }),
        };
        Ok(Self {
            name: name.to_string(),
            cfg,
            body,
        })
    }

    /// `x + branch(x)` on `[B, channels_io, T, 1]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.cfg.channels_io || s[3] != 1 {
            return Err(Error::shape("tcm", s, &[s[0], self.cfg.channels_io, s[2], 1]));
        }
        let branch = match &self.body {
            TcmBody::O(b) => {
                let h = b.input.forward(tape, p, x)?;
                let h = b.norm1.forward(tape, p, h)?;
                let h = b.act1.forward(tape, p, h)?;
                let h = b.dconv.forward(tape, p, h)?;
                let h = b.norm2.forward(tape, p, h)?;
                let h = b.act2.forward(tape, p, h)?;
                b.output.forward(tape, p, h)?
            }
            TcmBody::Mg(b) => {
                let h = b.unit.forward(tape, p, x)?;
                b.output.forward(tape, p, h)?
            }
            TcmBody::Dmg(b) => {
                let hp = b.primal.forward(tape, p, x)?;
                let hd = b.dual.forward(tape, p, x)?;
                let h = tape.concat(&[hp, hd])?;
                b.output.forward(tape, p, h)?
            }
        };
        let y = tape.add(x, branch)?;
        tape.label(y, self.name.clone());
        Ok(y)
    }

    pub fn topology(&self) -> Topology {
        let branch = match &self.body {
            TcmBody::O(b) => Topology::Seq(vec![b.norm1.topology(&self.name), b.dconv.topology(), b.norm2.topology(&self.name)]),
            TcmBody::Mg(b) => b.unit.topology(&self.name),
            TcmBody::Dmg(b) => Topology::Parallel(vec![b.primal.topology(&self.name), b.dual.topology(&self.name)]),
        };
        Topology::residual(branch)
    }

    /// Dilations of the temporal convolutions: primal first, then dual.
    pub fn dilations(&self) -> Vec<usize> {
        match &self.body {
            TcmBody::O(b) => vec![b.dconv.dilation],
            TcmBody::Mg(b) => vec![b.unit.main.dconv.dilation],
            TcmBody::Dmg(b) => vec![b.primal.main.dconv.dilation, b.dual.main.dconv.dilation],
        }
    }
}

/// `groups` dilation cycles of [`GROUP_SIZE`] modules each, with `r`
/// running `0..GROUP_SIZE` inside every cycle.
pub fn tcm_stack<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    groups: usize,
    base: TcmConfig,
) -> Result<Vec<Tcm>> {
    let mut out = Vec::with_capacity(groups * GROUP_SIZE);
    for g in 0..groups {
        for r in 0..GROUP_SIZE {
            let cfg = TcmConfig { r, ..base };
            out.push(Tcm::new(store, rng, &format!("{prefix}.tcm{}", g * GROUP_SIZE + r), cfg)?);
        }
    }
    Ok(out)
}

/// Plain dilated convolution spec used by TCMs, exposed for fixtures.
pub fn dilated_spec(kernel_t: usize, dilation: usize) -> ConvSpec {
    ConvSpec::default()
        .dilation(dilation, 1)
        .padding(crate::autograd::Padding::causal(kernel_t, dilation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::count_store;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn build(cfg: TcmConfig) -> (ParamStore<f64>, Tcm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tcm = Tcm::new(&mut store, &mut rng, "t", cfg).unwrap();
        (store, tcm)
    }

    fn run(store: &ParamStore<f64>, tcm: &Tcm, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = tcm.forward(&mut tape, &p, xv).unwrap();
        tape.value(y).clone()
    }

    fn input(c: usize, t: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, c, t, 1], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_only_counts() {
        let (s, _) = build(TcmConfig::o(0));
        assert_eq!(count_store(&s).conv_only, 263_680);
        let (s, _) = build(TcmConfig {
            gate_weight_sharing: true,
            ..TcmConfig::mg(0)
        });
        assert_eq!(count_store(&s).conv_only, 53_248);
        let (s, _) = build(TcmConfig::mg(0));
        assert_eq!(count_store(&s).conv_only, 90_112);
    }

    #[test]
    fn dual_dilations() {
        assert_eq!((TcmConfig::dmg(0).primal_dilation(), TcmConfig::dmg(0).dual_dilation()), (1, 32));
        assert_eq!((TcmConfig::dmg(5).primal_dilation(), TcmConfig::dmg(5).dual_dilation()), (32, 1));
        let (_, t) = build(TcmConfig::dmg(2).with_io(8, 4));
        assert_eq!(t.dilations(), vec![4, 8]);
    }

    #[test]
    fn group_cycles_dilations() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = tcm_stack(&mut store, &mut rng, "s", 2, TcmConfig::mg(0).with_io(8, 4)).unwrap();
        let d: Vec<usize> = stack.iter().map(|t| t.dilations()[0]).collect();
        assert_eq!(d, [1, 2, 4, 8, 16, 32, 1, 2, 4, 8, 16, 32]);
    }

    #[test]
    fn r_out_of_range_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Tcm::new(&mut store, &mut rng, "x", TcmConfig::dmg(6)).is_err());
    }

    #[test]
    fn zero_branch_is_identity() {
        for (cfg, share) in [(TcmConfig::o(1), false), (TcmConfig::mg(2), false), (TcmConfig::mg(2), true), (TcmConfig::dmg(3), false)] {
            let cfg = TcmConfig {
                gate_weight_sharing: share,
                smoothed: true,
                ..cfg.with_io(16, 8)
            };
            let (mut store, tcm) = build(cfg);
            for p in store.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let x = input(16, 10, 3);
            assert_eq!(run(&store, &tcm, &x), x);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (store, tcm) = build(TcmConfig::mg(0).with_io(16, 8));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 15, 4, 1]));
        assert!(matches!(tcm.forward(&mut tape, &p, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn saturated_gate_passes_main_path() {
        let cfg = TcmConfig::mg(1).with_io(8, 4);
        let (mut store, tcm) = build(cfg);
        let TcmBody::Mg(body) = &tcm.body else { unreachable!() };
        let gate = body.unit.gate.as_ref().unwrap();
        // constant positive features into large positive weights: sigmoid -> 1
        store.get_mut(gate.norm.gain).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(gate.norm.bias).value.data_mut().iter_mut().for_each(|v| *v = 1.0);
        store.get_mut(gate.dconv.conv.weight).value.data_mut().iter_mut().for_each(|v| *v = 20.0);
        let x = input(8, 12, 4);
        let y = run(&store, &tcm, &x);

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let m = body.unit.main.forward(&mut tape, &p, xv).unwrap();
        let o = body.output.forward(&mut tape, &p, m).unwrap();
        let expect = tape.add(xv, o).unwrap();
        for (a, b) in y.data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn future_frames_do_not_leak() {
        for cfg in [TcmConfig::o(2), TcmConfig::mg(3), TcmConfig::dmg(1)] {
            let cfg = TcmConfig { smoothed: true, ..cfg.with_io(8, 4) };
            let (store, tcm) = build(cfg);
            let x = input(8, 40, 5);
            let base = run(&store, &tcm, &x);
            let t = 17;
            let mut pert = x.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for c in 0..8 {
                for tt in t + 1..40 {
                    let i = pert.idx4(0, c, tt, 0);
                    pert.data_mut()[i] = rng.gen_range(-5.0..5.0);
                }
            }
            let other = run(&store, &tcm, &pert);
            for c in 0..8 {
                for tt in 0..=t {
                    assert_eq!(base.data()[base.idx4(0, c, tt, 0)], other.data()[other.idx4(0, c, tt, 0)]);
                }
                assert_ne!(base.data()[base.idx4(0, c, t + 1, 0)], other.data()[other.idx4(0, c, t + 1, 0)]);
            }
        }
    }
}
