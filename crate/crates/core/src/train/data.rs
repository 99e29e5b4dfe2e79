//! Seeded synthetic corpus: speech-like harmonic sources mixed with
//! filtered and babble-like noise at a requested SNR.

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::stft::{Waveform, SAMPLE_RATE};

const SR: f64 = SAMPLE_RATE as f64;
/// Noise sources are this many times longer than an utterance.
const NOISE_LENGTH_FACTOR: usize = 3;
const SOURCE_PEAK: f64 = 0.5;
const MIX_PEAK: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub clean_id: usize,
    pub noise_id: usize,
    pub snr_db: f64,
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub spec: MixtureSpec,
    pub clean: Waveform,
    /// Scaled noise as it appears in the mixture.
    pub noise: Waveform,
    pub mixture: Waveform,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
    /// Noise cuts redrawn because they were silent.
    pub resampled: usize,
}

/// `clean + alpha * noise` with `alpha` chosen for the requested SNR.
/// Returns the mixture and `alpha`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if clean.len() != noise.len() {
        return Err(Error::Usage(format!(
            "mix_at_snr: clean has {} samples, noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let es = clean.energy();
    let en = noise.energy();
    if es == 0.0 {
        return Err(Error::Contract("clean signal has zero energy".into()));
    }
    if en == 0.0 {
        return Err(Error::Contract("noise segment has zero energy".into()));
    }
    let alpha = (es / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean.samples.iter().zip(&noise.samples).map(|(s, n)| s + alpha * n).collect();
    Ok((Waveform::new(samples), alpha))
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Voiced harmonic source with vibrato, two formant resonances and a
/// syllable-rate amplitude envelope.
pub fn speech_like(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let f0 = rng.gen_range(100.0..220.0);
    let vib_rate = rng.gen_range(3.0..7.0);
    let vib_depth = rng.gen_range(0.01..0.05);
    let glide = rng.gen_range(-0.2..0.2);
    let formants = [rng.gen_range(300.0..850.0), rng.gen_range(900.0..2300.0), rng.gen_range(2400.0..3500.0)];
    let syl_rate = rng.gen_range(2.5..6.0);
    let syl_phase = rng.gen_range(0.0..2.0 * PI);
    let harmonics = (4000.0 / f0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let weight = |f: f64| {
        let bumps: f64 = formants
            .iter()
            .enumerate()
            .map(|(i, &fc)| {
                let bw = 80.0 + 60.0 * i as f64;
                (-(f - fc).powi(2) / (2.0 * bw * bw)).exp() / (1.0 + i as f64)
            })
            .sum();
        0.15 / (1.0 + f / 500.0) + bumps
    };
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / SR;
        let f = f0 * (1.0 + glide * t / (len as f64 / SR)) * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        phase += 2.0 * PI * f / SR;
        let env = (0.5 - 0.5 * (2.0 * PI * syl_rate * t + syl_phase).cos()).powf(1.5);
        let s: f64 = phases
            .iter()
            .enumerate()
            .map(|(h, &p)| {
                let k = (h + 1) as f64;
                weight(k * f) * (k * phase + p).sin()
            })
            .sum();
        out.push(env * s);
    }
    normalize_peak(&mut out, SOURCE_PEAK);
    out
}

/// White Gaussian noise through a random one-pole low- or high-pass.
pub fn filtered_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let a: f64 = rng.gen_range(0.3..0.95);
    let highpass = rng.gen_bool(0.3);
    let mut y = 0.0;
    let mut prev = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            if highpass {
                y = a * (y + x - prev);
                prev = x;
            } else {
                y = a * y + (1.0 - a) * x;
            }
            y
        })
        .collect();
    normalize_peak(&mut out, SOURCE_PEAK);
    out
}

/// Several overlapping talker-like harmonic sources.
pub fn babble(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let talkers = rng.gen_range(4..8);
    let mut out = vec![0.0; len];
    for _ in 0..talkers {
        let s = speech_like(rng, len);
        out.iter_mut().zip(&s).for_each(|(o, v)| *o += v);
    }
    normalize_peak(&mut out, SOURCE_PEAK);
    out
}

/// Deterministic corpus of `pairs` mixtures drawn from the config's SNR grid.
pub fn synth_corpus(cfg: &TrainConfig, pairs: usize, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (cfg.utterance_seconds * SR).round() as usize;
    let grid = cfg.snr_grid();
    let n_noise = pairs.div_ceil(2).max(1);
    let noises: Vec<Vec<f64>> = (0..n_noise)
        .map(|i| {
            let n = len * NOISE_LENGTH_FACTOR;
            if i % 2 == 0 {
                filtered_noise(&mut rng, n)
            } else {
                babble(&mut rng, n)
            }
        })
        .collect();
    let mut resampled = 0;
    let mut out = Vec::with_capacity(pairs);
    for clean_id in 0..pairs {
        let clean = Waveform::new(speech_like(&mut rng, len));
        let noise_id = rng.gen_range(0..n_noise);
        let snr_db = *grid.choose(&mut rng).expect("nonempty grid");
        let src = &noises[noise_id];
        let mut offset = rng.gen_range(0..=src.len() - len);
        let mut cut = Waveform::new(src[offset..offset + len].to_vec());
        let mut tries = 0;
        while cut.energy() == 0.0 {
            tries += 1;
            if tries > 100 {
                return Err(Error::Contract(format!("noise source {noise_id} is silent")));
            }
            log::warn!("silent noise cut at offset {offset}; redrawing");
            resampled += 1;
            offset = rng.gen_range(0..=src.len() - len);
            cut = Waveform::new(src[offset..offset + len].to_vec());
        }
        let (mut mixture, alpha) = mix_at_snr(&clean, &cut, snr_db)?;
        let mut clean = clean;
        let mut noise = Waveform::new(cut.samples.iter().map(|v| alpha * v).collect());
        // common rescale keeps the SNR and the clean + noise = mixture identity
        let peak = mixture.peak();
        if peak > MIX_PEAK {
            let k = MIX_PEAK / peak;
            for w in [&mut mixture, &mut clean, &mut noise] {
                w.samples.iter_mut().for_each(|v| *v *= k);
            }
        }
        out.push(Pair {
            spec: MixtureSpec {
                clean_id,
                noise_id,
                snr_db,
                offset,
            },
            clean,
            noise,
            mixture,
        });
    }
    Ok(Corpus { pairs: out, resampled })
}

/// Cover `0..len` with pieces of at most `max_len` samples. Boundaries
/// shift by a random phase so chunks differ between epochs.
pub fn chunk_bounds(len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<Range<usize>> {
    assert!(max_len > 0);
    if len <= max_len {
        return vec![0..len];
    }
    let n = len.div_ceil(max_len);
    let slack = n * max_len - len;
    let shift = rng.gen_range(0..=slack);
    (0..n)
        .map(|k| {
            let lo = (k * max_len).saturating_sub(shift);
            let hi = ((k + 1) * max_len).saturating_sub(shift).min(len);
            lo..hi
        })
        .filter(|r| !r.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sdr;
    use proptest::prelude::*;

    fn snr_of(clean: &Waveform, noise: &Waveform) -> f64 {
        10.0 * (clean.energy() / noise.energy()).log10()
    }

    #[test]
    fn mixing_hits_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = Waveform::new(speech_like(&mut rng, 8000));
        let noise = Waveform::new(filtered_noise(&mut rng, 8000));
        for snr in [-5.0, -2.5, 0.0] {
            let (mix, alpha) = mix_at_snr(&clean, &noise, snr).unwrap();
            let scaled = Waveform::new(noise.samples.iter().map(|v| alpha * v).collect());
            assert!((snr_of(&clean, &scaled) - snr).abs() < 0.01);
            assert!((sdr(&clean.samples, &mix.samples).unwrap() - snr).abs() < 0.01);
        }
        let (_, alpha) = mix_at_snr(&clean, &noise, -5.0).unwrap();
        let ratio = alpha * alpha * noise.energy() / clean.energy();
        assert!((ratio - 10f64.powf(0.5)).abs() < 1e-9);
    }

    #[test]
    fn mixing_errors() {
        let z = Waveform::new(vec![0.0; 10]);
        let one = Waveform::new(vec![0.5; 10]);
        assert!(mix_at_snr(&z, &one, 0.0).is_err());
        assert!(mix_at_snr(&one, &z, 0.0).is_err());
        assert!(mix_at_snr(&one, &Waveform::new(vec![0.5; 9]), 0.0).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let cfg = TrainConfig {
            utterance_seconds: 0.5,
            ..TrainConfig::default()
        };
        let a = synth_corpus(&cfg, 10, 3).unwrap();
        let b = synth_corpus(&cfg, 10, 3).unwrap();
        for (p, q) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(p.mixture.samples, q.mixture.samples);
            assert_eq!(p.spec, q.spec);
        }
        for p in &a.pairs {
            let snr = snr_of(&p.clean, &p.noise);
            assert!((snr - p.spec.snr_db).abs() < 0.01);
            assert!((-5.0..=0.0).contains(&p.spec.snr_db));
            for w in [&p.clean, &p.noise, &p.mixture] {
                assert!(w.samples.iter().all(|v| v.is_finite()));
                assert!(w.peak() <= 1.0);
            }
        }
    }

    #[test]
    fn twenty_seconds_chunk_to_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (len, max) = (20 * 16_000, 8 * 16_000);
        for _ in 0..20 {
            let c = chunk_bounds(len, max, &mut rng);
            assert!(c.iter().all(|r| r.len() <= max));
            assert_eq!(c.first().unwrap().start, 0);
            assert_eq!(c.last().unwrap().end, len);
            assert!(c.windows(2).all(|w| w[0].end == w[1].start));
        }
    }

    proptest! {
        #[test]
        fn chunks_tile_the_utterance(len in 1usize..5000, max in 1usize..900, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = chunk_bounds(len, max, &mut rng);
            prop_assert_eq!(c.iter().map(|r| r.len()).sum::<usize>(), len);
            prop_assert!(c.iter().all(|r| r.len() <= max && !r.is_empty()));
        }
    }
}
