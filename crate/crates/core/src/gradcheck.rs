//! Central finite-difference gradient checking.
//!
//! The oracle only ever evaluates the forward pass, so it stays independent
//! of the backward rules it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, NormMode, Padding, Tape, Var};
use crate::error::Result;
use crate::loss::{loss_cm, loss_stage2, LAMBDA};
use crate::nn::{sd_conv_forward, Bound, ConvBlock, Decoder, DilatedConv, Direction, Encoder, ParamStore, Tcm, TcmConfig};
use crate::stft::NUM_BINS;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

const SCALE_FLOOR: f64 = 1e-5;

/// Largest coordinate count probed per input; larger inputs are subsampled.
const MAX_PROBES: usize = 48;

/// Compare analytic and numeric gradients of `f` with respect to every input.
///
/// `f` builds an arbitrary-shaped output from leaves bound to `inputs`; the
/// checked scalar is a fixed random projection of that output. Returns the
/// worst norm-wise relative error over all inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = Tensor::from_fn(tape.shape(out).to_vec(), |_| rng.gen_range(-1.0..1.0));
    let loss = project(&mut tape, out, &proj)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out, &proj)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let probes: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &probes {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        // identically-zero gradients (a bias ahead of instance norm) leave
        // only finite-difference roundoff, so the denominator has a floor
        let rel = diff.sqrt() / scale.max(SCALE_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// One finite-difference case per differentiable op, layer, module and loss.
/// Returns `(case, worst relative error)` pairs.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0));
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let a = rand(&[1, 3, 4, 5]);
    let b = rand(&[1, 3, 4, 5]);
    let alpha = rand(&[3]);
    push("op.add", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]))?);
    push("op.sub", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]))?);
    push("op.mul", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.mul(v[0], v[1]))?);
    push("op.scale", check_gradients(std::slice::from_ref(&a), seed, |t, v| t.scale(v[0], 0.3))?);
    push("op.sigmoid", check_gradients(std::slice::from_ref(&a), seed, |t, v| t.sigmoid(v[0]))?);
    push("op.softplus", check_gradients(std::slice::from_ref(&a), seed, |t, v| t.softplus(v[0]))?);
    push("op.prelu", check_gradients(&[a.clone(), alpha.clone()], seed, |t, v| t.prelu(v[0], v[1]))?);
    push("op.concat", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.concat(&[v[0], v[1]]))?);
    push(
        "op.fold_unfold",
        check_gradients(std::slice::from_ref(&a), seed, |t, v| {
            let f = t.fold_freq(v[0])?;
            let s = t.sigmoid(f)?;
            t.unfold_freq(s, 5)
        })?,
    );
    push("op.magnitude", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.magnitude(v[0], v[1], 1e-8))?);
    push("op.sum_sq", check_gradients(std::slice::from_ref(&a), seed, |t, v| t.sum_sq(v[0]))?);
    for mode in [NormMode::Frame, NormMode::Instance] {
        push(
            &format!("op.norm.{mode:?}"),
            check_gradients(&[a.clone(), alpha.clone(), rand(&[3])], seed, |t, v| t.norm(v[0], v[1], v[2], mode))?,
        );
    }
    let spec = ConvSpec::default().stride(1, 2).padding(Padding::causal(2, 1));
    push(
        "op.conv2d",
        check_gradients(&[rand(&[1, 2, 5, 11]), rand(&[3, 2, 2, 5]), rand(&[3])], seed, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), spec)
        })?,
    );
    let spec = ConvSpec::default().stride(1, 2).padding(Padding { time: (0, 1), freq: (0, 0) });
    push(
        "op.conv2d_transposed",
        check_gradients(&[rand(&[1, 4, 5, 4]), rand(&[4, 2, 2, 3]), rand(&[2])], seed, |t, v| {
            t.conv2d_transposed(v[0], v[1], Some(v[2]), spec)
        })?,
    );

    let mut init = ChaCha8Rng::seed_from_u64(seed);

    for (name, dir, mode) in [
        ("layer.encode_block.frame", Direction::Encode, Some(NormMode::Frame)),
        ("layer.encode_block.instance", Direction::Encode, Some(NormMode::Instance)),
        ("layer.decode_block", Direction::Decode, Some(NormMode::Frame)),
        ("layer.decode_output", Direction::Decode, None),
    ] {
        let (store, block) = randomized(&mut init, |s, r| Ok(ConvBlock::new(s, r, "b", dir, 2, 3, 3, mode)))?;
        push(name, check_module_gradients(&store, &[rand(&[1, 2, 4, 9])], seed, |t, p, v| block.forward(t, p, v[0]))?);
    }

    let (store, dc) = randomized(&mut init, |s, r| Ok(DilatedConv::new(s, r, "d", 3, 2, 3, 2, 1, true)))?;
    push(
        "layer.smoothed_dilated_conv",
        check_module_gradients(&store, &[rand(&[1, 3, 9, 1])], seed, |t, p, v| dc.forward(t, p, v[0]))?,
    );
    push(
        "layer.sd_conv",
        check_gradients(&[rand(&[1, 3, 9, 1]), rand(&[1, 1, 3, 1]), rand(&[2, 3, 3, 1])], seed, |t, v| {
            sd_conv_forward(t, v[0], v[1], v[2], 2)
        })?,
    );

    let tcms = [
        ("tcm.o", TcmConfig::o(1).with_io(4, 6)),
        ("tcm.mg.shared", TcmConfig { gate_weight_sharing: true, ..TcmConfig::mg(1).with_io(4, 3) }),
        ("tcm.mg.unshared", TcmConfig::mg(1).with_io(4, 3)),
        ("tcm.mg.smoothed", TcmConfig { smoothed: true, ..TcmConfig::mg(2).with_io(4, 3) }),
        ("tcm.dmg", TcmConfig { smoothed: true, ..TcmConfig::dmg(1).with_io(4, 3) }),
    ];
    for (name, cfg) in tcms {
        let (store, tcm) = randomized(&mut init, |s, r| Tcm::new(s, r, "t", cfg))?;
        push(name, check_module_gradients(&store, &[rand(&[1, 4, 10, 1])], seed, |t, p, v| tcm.forward(t, p, v[0]))?);
    }

    let (store, (enc, dec)) = randomized(&mut init, |s, r| {
        let enc = Encoder::new(s, r, "e", 1, 2, NormMode::Frame);
        Ok((enc, Decoder::new(s, r, "d", 2, 1, NormMode::Frame)?))
    })?;
    push(
        "layer.encoder_decoder",
        check_module_gradients(&store, &[rand(&[1, 1, 2, NUM_BINS])], seed, |t, p, v| {
            let skips = enc.forward(t, p, v[0])?;
            let top = *skips.last().expect("five blocks");
            dec.forward(t, p, top, &skips)
        })?,
    );

    let clean_mag = rand(&[2, 6]).map(f64::abs);
    push(
        "loss.cm",
        check_gradients(&[rand(&[2, 6]), rand(&[2, 6])], seed, |t, v| {
            let m = t.magnitude(v[0], v[1], 0.0)?;
            let c = t.constant(clean_mag.clone());
            loss_cm(t, m, c)
        })?,
    );
    let planes: Vec<Tensor<f64>> = (0..4).map(|_| rand(&[2, 6])).collect();
    for part in ["ri", "mag", "total"] {
        push(
            &format!("loss.stage2.{part}"),
            check_gradients(&planes, seed, |t, v| {
                let lcm = t.sum_sq(v[0])?;
                let l = loss_stage2(t, v[0], v[1], v[2], v[3], LAMBDA, lcm)?;
                Ok(match part {
                    "ri" => l.l_ri,
                    "mag" => l.l_mag,
                    _ => l.total,
                })
            })?,
        );
    }
    Ok(out)
}

/// Build a module, then replace every initial value (impulses, unit gains)
/// with random ones so no gradient path is trivially zero.
fn randomized<M>(
    rng: &mut ChaCha8Rng,
    build: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<M>,
) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let m = build(&mut store, rng)?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    Ok((store, m))
}

fn project(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let m = tape.mul(out, p)?;
    tape.sum(m)
}

/// [`check_gradients`] for a parameterized module: every parameter in
/// `store` is checked alongside the extra `inputs`.
pub fn check_module_gradients<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let all: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).chain(inputs.iter().cloned()).collect();
    check_gradients(&all, seed, |tape, vars| {
        let bound = Bound::from_vars(vars[..n].to_vec());
        f(tape, &bound, &vars[n..])
    })
}
