use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_gradients;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 4, 4], 1.0));
    let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, w, None, ConvSpec::default()).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn causal_time_conv_sees_zero_pad_first() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::new([1, 1, 2, 1], vec![1.0, 1.0]).unwrap());
    let spec = ConvSpec::default().padding(Padding::causal(2, 1));
    let y = tape.conv2d(x, w, None, spec).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0]);
}

#[test]
fn encoder_and_decoder_frequency_chains() {
    let mut f = 161;
    let mut chain = vec![];
    for k in [5, 3, 3, 3, 3] {
        f = conv_out_len(f, k, 2, 1, (0, 0)).unwrap();
        chain.push(f);
    }
    assert_eq!(chain, [79, 39, 19, 9, 4]);

    let mut chain = vec![];
    for k in [3, 3, 3, 3, 5] {
        f = conv_transpose_out_len(f, k, 2, 1, (0, 0), 0).unwrap();
        chain.push(f);
    }
    assert_eq!(chain, [9, 19, 39, 79, 161]);
}

#[test]
fn transposed_zero_input_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 5, 4]));
    let w = tape.constant(rand_tensor(&[2, 3, 2, 3], &mut rng));
    let y = tape
        .conv2d_transposed(x, w, None, ConvSpec::default().stride(1, 2))
        .unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 6, 9]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn adjoint_gap(spec: ConvSpec, xshape: [usize; 4], wshape: [usize; 4], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&xshape, &mut rng));
    let w = tape.constant(rand_tensor(&wshape, &mut rng));
    let cx = tape.conv2d(x, w, None, spec).unwrap();
    let yv = rand_tensor(tape.shape(cx), &mut rng);
    let (t_out, f_out) = (xshape[2], xshape[3]);
    // output padding that maps the conv output back onto the input extent
    let (ts, fs) = (tape.shape(cx)[2], tape.shape(cx)[3]);
    let full_t = (ts - 1) * spec.stride.0 + spec.dilation.0 * (wshape[2] - 1) + 1;
    let full_f = (fs - 1) * spec.stride.1 + spec.dilation.1 * (wshape[3] - 1) + 1;
    let op_t = t_out + spec.padding.time.0 + spec.padding.time.1 - full_t;
    let op_f = f_out + spec.padding.freq.0 + spec.padding.freq.1 - full_f;
    let y = tape.constant(yv.clone());
    let ty = tape
        .conv2d_transposed(y, w, None, spec.output_padding(op_t, op_f))
        .unwrap();
    assert_eq!(tape.shape(ty), &xshape);
    let lhs = tape.value(cx).dot(&yv);
    let rhs = tape.value(x).dot(tape.value(ty));
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let cases = [
        (ConvSpec::default().stride(1, 2), [2, 3, 6, 17], [4, 3, 2, 5]),
        (
            ConvSpec::default().padding(Padding::causal(2, 1)).stride(1, 2),
            [1, 2, 7, 9],
            [3, 2, 2, 3],
        ),
        (
            ConvSpec::default().padding(Padding::causal(5, 4)).dilation(4, 1),
            [1, 4, 20, 1],
            [4, 4, 5, 1],
        ),
        (
            ConvSpec::default().padding(Padding::symmetric_time(3, 2).with_freq(1, 2)).stride(2, 3),
            [2, 2, 11, 10],
            [2, 2, 3, 4],
        ),
        (
            ConvSpec::default().groups(2).padding(Padding::causal(3, 2)).dilation(2, 1),
            [1, 4, 12, 3],
            [6, 2, 3, 1],
        ),
    ];
    for seed in 0..10 {
        for (spec, xs, ws) in cases {
            let gap = adjoint_gap(spec, xs, ws, seed);
            assert!(gap < 1e-10, "{spec:?} seed {seed}: {gap}");
        }
    }
}

#[test]
fn conv_rejects_mismatched_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros([2, 2, 1, 1]));
    match tape.conv2d(x, w, None, ConvSpec::default()) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 3, 4, 4]);
            assert_eq!(rhs, vec![2, 2, 1, 1]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 2, 2], f64::MAX));
    let w = tape.constant(Tensor::full([1, 1, 1, 2], f64::MAX));
    assert!(matches!(
        tape.conv2d(x, w, None, ConvSpec::default()),
        Err(Error::NonFinite { op: "conv2d" })
    ));
}

#[test]
fn pointwise_values() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let sp = tape.softplus(z).unwrap();
    let sg = tape.sigmoid(z).unwrap();
    assert!((tape.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(tape.value(sg).item(), 0.5);

    let x = tape.constant(Tensor::new([1, 1], vec![-2.0]).unwrap());
    let a = tape.constant(Tensor::new([1], vec![0.25]).unwrap());
    let p = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(p).item(), -0.5);

    let big = tape.constant(Tensor::new([3], vec![-800.0, 0.0, 800.0]).unwrap());
    let sp = tape.softplus(big).unwrap();
    let sg = tape.sigmoid(big).unwrap();
    assert!(tape.value(sp).data().iter().all(|&v| v > 0.0 || v == 0.0));
    assert_eq!(tape.value(sp).data()[2], 800.0);
    assert!(tape.value(sg).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn instance_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&[2, 3, 7, 5], &mut rng).map(|v| 3.0 * v + 1.5));
    let g = tape.constant(Tensor::full([3], 1.0));
    let b = tape.constant(Tensor::zeros([3]));
    let y = tape.norm(x, g, b, NormMode::Instance).unwrap();
    let yv = tape.value(y);
    for slice in yv.data().chunks(35) {
        let mean = slice.iter().sum::<f64>() / 35.0;
        let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 35.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    let c = tape.constant(Tensor::full([1, 2, 3, 4], 7.0));
    let g2 = tape.constant(Tensor::full([2], 1.0));
    let b2 = tape.constant(Tensor::zeros([2]));
    for mode in [NormMode::Instance, NormMode::Frame] {
        let y = tape.norm(c, g2, b2, mode).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn frame_norm_statistics_per_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::<f64>::new();
    let xv = rand_tensor(&[1, 4, 6, 3], &mut rng);
    let x = tape.constant(xv);
    let g = tape.constant(Tensor::full([4], 1.0));
    let b = tape.constant(Tensor::zeros([4]));
    let y = tape.norm(x, g, b, NormMode::Frame).unwrap();
    let yv = tape.value(y);
    for t in 0..6 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|c| (0..3).map(move |f| (c, f)))
            .map(|(c, f)| yv.data()[yv.idx4(0, c, t, f)])
            .collect();
        let mean = vals.iter().sum::<f64>() / 12.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(rand_tensor(&[3, 4], &mut rng));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 0.25);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([2], vec![1.0, -2.0]).unwrap());
    let s = tape.sum_sq(x).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn fan_out_gradients_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = rand_tensor(&[1, 2, 3, 3], &mut rng);
    let branch = |use_f: bool, use_g: bool| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(xv.clone());
        let f = tape.sigmoid(x).unwrap();
        let g = tape.softplus(x).unwrap();
        let out = match (use_f, use_g) {
            (true, true) => tape.add(f, g).unwrap(),
            (true, false) => f,
            _ => g,
        };
        let s = tape.sum(out).unwrap();
        tape.backward(s).unwrap();
        tape.grad(x).unwrap().clone()
    };
    let both = branch(true, true);
    let mut sum = branch(true, false);
    sum.add_assign(&branch(false, true)).unwrap();
    for (a, b) in both.data().iter().zip(sum.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn conv_case(seed: u64, spec: ConvSpec, xs: [usize; 4], ws: [usize; 4], transposed: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cout = if transposed { ws[1] * spec.groups } else { ws[0] };
    let inputs = vec![
        rand_tensor(&xs, &mut rng),
        rand_tensor(&ws, &mut rng),
        rand_tensor(&[cout], &mut rng),
    ];
    check_gradients(&inputs, seed, |t, v| {
        if transposed {
            t.conv2d_transposed(v[0], v[1], Some(v[2]), spec)
        } else {
            t.conv2d(v[0], v[1], Some(v[2]), spec)
        }
    })
    .unwrap()
}

#[test]
fn finite_difference_convolutions() {
    for seed in 0..10 {
        let e = conv_case(
            seed,
            ConvSpec::default().stride(1, 2).padding(Padding::causal(2, 1)),
            [1, 2, 5, 11],
            [3, 2, 2, 5],
            false,
        );
        assert!(e < 1e-4, "conv2d seed {seed}: {e}");
        let e = conv_case(
            seed,
            ConvSpec::default().groups(3).dilation(2, 1).padding(Padding::causal(3, 2)),
            [2, 3, 9, 1],
            [3, 1, 3, 1],
            false,
        );
        assert!(e < 1e-4, "depthwise seed {seed}: {e}");
        let e = conv_case(
            seed,
            ConvSpec::default().stride(1, 2).padding(Padding { time: (0, 1), freq: (0, 0) }),
            [1, 4, 5, 4],
            [4, 2, 2, 3],
            true,
        );
        assert!(e < 1e-4, "transposed seed {seed}: {e}");
    }
}

#[test]
fn finite_difference_pointwise_and_structural() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = rand_tensor(&[1, 3, 4, 5], &mut rng);
        let b = rand_tensor(&[1, 3, 4, 5], &mut rng);
        let alpha = rand_tensor(&[3], &mut rng);
        let cases: Vec<(&str, f64)> = vec![
            ("add", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1])).unwrap()),
            ("sub", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1])).unwrap()),
            ("mul", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.mul(v[0], v[1])).unwrap()),
            ("scale", check_gradients(&[a.clone()], seed, |t, v| t.scale(v[0], 0.3)).unwrap()),
            ("sigmoid", check_gradients(&[a.clone()], seed, |t, v| t.sigmoid(v[0])).unwrap()),
            ("softplus", check_gradients(&[a.clone()], seed, |t, v| t.softplus(v[0])).unwrap()),
            ("prelu", check_gradients(&[a.clone(), alpha.clone()], seed, |t, v| t.prelu(v[0], v[1])).unwrap()),
            ("concat", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.concat(&[v[0], v[1], v[0]])).unwrap()),
            ("fold", check_gradients(&[a.clone()], seed, |t, v| t.fold_freq(v[0])).unwrap()),
            (
                "unfold",
                check_gradients(&[a.clone()], seed, |t, v| {
                    let f = t.fold_freq(v[0])?;
                    let s = t.sigmoid(f)?;
                    t.unfold_freq(s, 5)
                })
                .unwrap(),
            ),
            (
                "tile",
                check_gradients(&[rand_tensor(&[1, 1, 3, 1], &mut rng)], seed, |t, v| t.tile(v[0], 4)).unwrap(),
            ),
            ("magnitude", check_gradients(&[a.clone(), b.clone()], seed, |t, v| t.magnitude(v[0], v[1], 1e-8)).unwrap()),
            ("sum_sq", check_gradients(&[a.clone()], seed, |t, v| t.sum_sq(v[0])).unwrap()),
        ];
        for (name, e) in cases {
            assert!(e < 1e-4, "{name} seed {seed}: {e}");
        }
    }
}

#[test]
fn finite_difference_norms() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        let g = rand_tensor(&[3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        for mode in [NormMode::Instance, NormMode::Frame] {
            let e = check_gradients(&[x.clone(), g.clone(), b.clone()], seed, |t, v| t.norm(v[0], v[1], v[2], mode))
                .unwrap();
            assert!(e < 1e-4, "{mode:?} seed {seed}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn causal_conv_ignores_future_frames(
        seed in 0u64..1000,
        t in 0usize..12,
        kt in 1usize..4,
        dt in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 12;
        let xv = rand_tensor(&[1, 2, frames, 3], &mut rng);
        let wv = rand_tensor(&[2, 2, kt, 2], &mut rng);
        let spec = ConvSpec::default().padding(Padding::causal(kt, dt)).dilation(dt, 1);
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(x);
            let w = tape.constant(wv.clone());
            let y = tape.conv2d(x, w, None, spec).unwrap();
            tape.value(y).clone()
        };
        let base = run(xv.clone());
        let mut zeroed = xv.clone();
        for c in 0..2 {
            for tt in t + 1..frames {
                for f in 0..3 {
                    let i = zeroed.idx4(0, c, tt, f);
                    zeroed.data_mut()[i] = 0.0;
                }
            }
        }
        let other = run(zeroed);
        for c in 0..2 {
            for tt in 0..=t {
                for f in 0..2 {
                    prop_assert_eq!(base.data()[base.idx4(0, c, tt, f)], other.data()[other.idx4(0, c, tt, f)]);
                }
            }
        }
    }
}
