//! Training objectives on RI planes and magnitudes.
//!
//! All norms are plain sums of squares with no averaging over frames or bins.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Added under the square root of the magnitude loss.
pub const MAG_EPS: f64 = 1e-8;
pub const LAMBDA: f64 = 0.1;

/// `||est - clean||_F^2`.
pub fn loss_cm<T: Real>(tape: &mut Tape<T>, est: Var, clean: Var) -> Result<Var> {
    if tape.shape(est) != tape.shape(clean) {
        return Err(Error::shape("loss_cm", tape.shape(est), tape.shape(clean)));
    }
    let d = tape.sub(est, clean)?;
    tape.sum_sq(d)
}

pub fn loss_cm_value(est: &Tensor<f64>, clean: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(est.clone()), tape.constant(clean.clone()));
    let l = loss_cm(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Loss components as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Vars {
    pub l_ri: Var,
    pub l_mag: Var,
    pub total: Var,
}

/// `L_RI + L_Mag + lambda * L_cm` on the tape.
#[allow(clippy::too_many_arguments)]
pub fn loss_stage2<T: Real>(
    tape: &mut Tape<T>,
    est_r: Var,
    est_i: Var,
    clean_r: Var,
    clean_i: Var,
    lambda: f64,
    l_cm: Var,
) -> Result<Stage2Vars> {
    check_lambda(lambda)?;
    for v in [est_i, clean_r, clean_i] {
        if tape.shape(v) != tape.shape(est_r) {
            return Err(Error::shape("loss_stage2", tape.shape(est_r), tape.shape(v)));
        }
    }
    let dr = tape.sub(est_r, clean_r)?;
    let di = tape.sub(est_i, clean_i)?;
    let lr = tape.sum_sq(dr)?;
    let li = tape.sum_sq(di)?;
    let l_ri = tape.add(lr, li)?;

    let eps = T::from_f64(MAG_EPS);
    let me = tape.magnitude(est_r, est_i, eps)?;
    let mc = tape.magnitude(clean_r, clean_i, eps)?;
    let dm = tape.sub(me, mc)?;
    let l_mag = tape.sum_sq(dm)?;

    let s = tape.add(l_ri, l_mag)?;
    let w = tape.scale(l_cm, T::from_f64(lambda))?;
    let total = tape.add(s, w)?;
    Ok(Stage2Vars { l_ri, l_mag, total })
}

/// Loss components in 64-bit; `total` is composed here from the parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_cm: f64,
    pub l_ri: f64,
    pub l_mag: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn stage1(l_cm: f64) -> Self {
        Self {
            l_cm,
            l_ri: 0.0,
            l_mag: 0.0,
            lambda: 1.0,
            total: l_cm,
        }
    }

    pub fn stage2(l_cm: f64, l_ri: f64, l_mag: f64, lambda: f64) -> Self {
        Self {
            l_cm,
            l_ri,
            l_mag,
            lambda,
            total: l_ri + l_mag + lambda * l_cm,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cm, self.l_ri, self.l_mag, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean of per-utterance reports, then recomposed.
    pub fn mean(reports: &[LossReport], stage2: bool) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let l_cm = avg(|r| r.l_cm);
        if stage2 {
            let lambda = reports.first().map_or(LAMBDA, |r| r.lambda);
            Self::stage2(l_cm, avg(|r| r.l_ri), avg(|r| r.l_mag), lambda)
        } else {
            Self::stage1(l_cm)
        }
    }

    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} l_cm={} l_ri={} l_mag={} total={}",
            self.l_cm, self.l_ri, self.l_mag, self.total
        )
    }

    /// Inverse of [`LossReport::log_line`].
    pub fn parse_log_line(line: &str) -> Option<(usize, [f64; 4])> {
        let mut step = None;
        let mut v = [None; 4];
        for field in line.split_whitespace() {
            let (k, val) = field.split_once('=')?;
            match k {
                "step" => step = val.parse().ok(),
                "l_cm" => v[0] = val.parse().ok(),
                "l_ri" => v[1] = val.parse().ok(),
                "l_mag" => v[2] = val.parse().ok(),
                "total" => v[3] = val.parse().ok(),
                _ => {}
            }
        }
        Some((step?, [v[0]?, v[1]?, v[2]?, v[3]?]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn cm_examples() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let z = Tensor::zeros([2, 2]);
        assert_eq!(loss_cm_value(&a, &z).unwrap(), 30.0);
        assert_eq!(loss_cm_value(&z, &a).unwrap(), 30.0);
        assert_eq!(loss_cm_value(&a, &a).unwrap(), 0.0);
        assert!(matches!(loss_cm_value(&a, &Tensor::zeros([4])), Err(Error::Shape { .. })));
    }

    fn stage2_value(er: &Tensor<f64>, ei: &Tensor<f64>, cr: &Tensor<f64>, ci: &Tensor<f64>, lambda: f64, lcm: f64) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let v = [er, ei, cr, ci].map(|x| tape.constant(x.clone()));
        let l = tape.constant(Tensor::scalar(lcm));
        let s = loss_stage2(&mut tape, v[0], v[1], v[2], v[3], lambda, l)?;
        Ok((tape.value(s.l_ri).item(), tape.value(s.l_mag).item(), tape.value(s.total).item()))
    }

    #[test]
    fn phase_only_error_is_invisible_to_magnitude_term() {
        let n = 7;
        let one = Tensor::full([n], 1.0);
        let zero = Tensor::zeros([n]);
        let (ri, mag, _) = stage2_value(&zero, &one, &one, &zero, LAMBDA, 0.0).unwrap();
        assert_eq!(ri, 2.0 * n as f64);
        assert!(mag.abs() < 1e-20);
        let (ri, mag, total) = stage2_value(&one, &zero, &one, &zero, LAMBDA, 0.0).unwrap();
        assert_eq!((ri, mag, total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn lambda_weighting_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = || Tensor::from_fn([3, 5], |_| rng.gen_range(-1.0..1.0));
        let (a, b, c, d) = (r(), r(), r(), r());
        let (ri, mag, total) = stage2_value(&a, &b, &c, &d, 0.1, 3.0).unwrap();
        assert!((total - (ri + mag) - 0.3).abs() < 1e-12);
        let (_, _, t0) = stage2_value(&a, &b, &c, &d, 0.0, 3.0).unwrap();
        let (_, _, t1) = stage2_value(&a, &b, &c, &d, 0.5, 3.0).unwrap();
        assert!(((t1 - t0) / 0.5 - 3.0).abs() < 1e-12);
        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(stage2_value(&a, &b, &c, &d, bad, 1.0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn report_composition() {
        let r = LossReport::stage2(2.0, 3.0, 4.0, 0.1);
        assert_eq!(r.total, 3.0 + 4.0 + 0.2);
        let line = r.log_line(7);
        assert_eq!(line, "step=7 l_cm=2 l_ri=3 l_mag=4 total=7.2");
        let (s, v) = LossReport::parse_log_line(&line).unwrap();
        assert_eq!((s, v), (7, [2.0, 3.0, 4.0, r.total]));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = || Tensor::from_fn([2, 6], |_| rng.gen_range(-1.0..1.0));
            let ins = [r(), r(), r(), r(), r().map(f64::abs)];
            let err = check_gradients(&ins[..2], seed, |tape, v| {
                let a = tape.magnitude(v[0], v[1], 0.0)?;
                let c = tape.constant(ins[4].clone());
                loss_cm(tape, a, c)
            })
            .unwrap();
            assert!(err < 1e-4, "loss_cm seed {seed}: {err}");
            let err = check_gradients(&ins[..4], seed, |tape, v| {
                let lcm = tape.sum_sq(v[0])?;
                Ok(loss_stage2(tape, v[0], v[1], v[2], v[3], LAMBDA, lcm)?.total)
            })
            .unwrap();
            assert!(err < 1e-4, "stage2 seed {seed}: {err}");
        }
    }
}
