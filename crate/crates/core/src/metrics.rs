//! Energy-ratio SDR and its scale-invariant variant.

use crate::error::{Error, Result};

/// Results are clamped to `[-SDR_CLAMP_DB, SDR_CLAMP_DB]`.
pub const SDR_CLAMP_DB: f64 = 100.0;

fn check(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Metric(format!(
            "length mismatch: reference {} vs estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let e: f64 = reference.iter().map(|s| s * s).sum();
    if e == 0.0 {
        return Err(Error::Metric("reference has zero energy".into()));
    }
    Ok(e)
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        return SDR_CLAMP_DB;
    }
    if num == 0.0 {
        return -SDR_CLAMP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-SDR_CLAMP_DB, SDR_CLAMP_DB)
}

/// `10 log10(||s||^2 / ||s - est||^2)`.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let e = check(reference, estimate)?;
    let err: f64 = reference.iter().zip(estimate).map(|(s, y)| (s - y) * (s - y)).sum();
    Ok(ratio_db(e, err))
}

/// SDR after projecting the estimate onto the reference.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let e = check(reference, estimate)?;
    let alpha = reference.iter().zip(estimate).map(|(s, y)| s * y).sum::<f64>() / e;
    let target: f64 = alpha * alpha * e;
    let noise: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, y)| {
            let d = y - alpha * s;
            d * d
        })
        .sum();
    Ok(ratio_db(target, noise))
}
