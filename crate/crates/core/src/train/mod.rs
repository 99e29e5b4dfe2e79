//! Two-phase optimization: stage-1 pretraining of CME-Net on the magnitude
//! loss, then joint training of both stages with separate learning rates.

pub mod adam;
pub mod data;

pub use adam::{clip_global_norm, global_norm, Adam, ADAM_EPS};
pub use data::{chunk_bounds, mix_at_snr, synth_corpus, Corpus, MixtureSpec, Pair};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::{loss_cm, loss_stage2, LossReport};
use crate::metrics::sdr;
use crate::nets::{noisy_polar, CmeNet, CtsNet};
use crate::stft::{Framing, Stft, HOP, SAMPLE_RATE};
use crate::tensor::{Real, Tensor};

/// One training chunk as network tensors `[1, 1, T, 161]`.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub noisy_r: Tensor<T>,
    pub noisy_i: Tensor<T>,
    pub clean_r: Tensor<T>,
    pub clean_i: Tensor<T>,
}

impl<T: Real> Example<T> {
    /// Both signals framed exactly as enhancement frames its input. `None`
    /// for chunks shorter than one hop.
    pub fn new(plan: &Stft, noisy: &[f64], clean: &[f64]) -> Result<Option<Self>> {
        if noisy.len() < HOP || noisy.len() != clean.len() {
            return Ok(None);
        }
        let framing = Framing::new(noisy.len());
        let x = plan.stft(&framing.pad(noisy))?;
        let s = plan.stft(&framing.pad(clean))?;
        let (noisy_r, noisy_i) = x.to_network();
        let (clean_r, clean_i) = s.to_network();
        Ok(Some(Self {
            noisy_r,
            noisy_i,
            clean_r,
            clean_i,
        }))
    }

    pub fn frames(&self) -> usize {
        self.noisy_r.dim(2)
    }
}

/// Whole utterances, unchunked, in corpus order.
pub fn corpus_examples<T: Real>(corpus: &Corpus) -> Result<Vec<Example<T>>> {
    let plan = Stft::new();
    let mut out = Vec::new();
    for p in &corpus.pairs {
        out.extend(Example::new(&plan, &p.mixture.samples, &p.clean.samples)?);
    }
    Ok(out)
}

/// Chunked and shuffled examples for one epoch.
pub fn epoch_examples<T: Real>(cfg: &TrainConfig, corpus: &Corpus, epoch: usize) -> Result<Vec<Example<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
    let max_len = (cfg.max_chunk_seconds * SAMPLE_RATE as f64) as usize;
    let plan = Stft::new();
    let mut out = Vec::new();
    for p in &corpus.pairs {
        for r in chunk_bounds(p.mixture.len(), max_len, &mut rng) {
            out.extend(Example::new(&plan, &p.mixture.samples[r.clone()], &p.clean.samples[r])?);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Stage-1 loss and, if requested, gradients for every CME parameter.
pub fn stage1_example<T: Real>(net: &CmeNet<T>, ex: &Example<T>, with_grad: bool) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = net.store.bind(&mut tape, with_grad);
    let (xr, xi) = (tape.constant(ex.noisy_r.clone()), tape.constant(ex.noisy_i.clone()));
    let (sr, si) = (tape.constant(ex.clean_r.clone()), tape.constant(ex.clean_i.clone()));
    let (mag, _, _) = noisy_polar(&mut tape, xr, xi)?;
    let (clean_mag, _, _) = noisy_polar(&mut tape, sr, si)?;
    let est = net.forward(&mut tape, &p, mag)?;
    let l = loss_cm(&mut tape, est, clean_mag)?;
    let report = LossReport::stage1(tape.value(l).item().as_f64());
    let grads = if with_grad {
        tape.backward(l)?;
        p.grads(&tape)
    } else {
        Vec::new()
    };
    Ok((report, grads))
}

/// Joint loss with gradients for the CME and CSR parameter groups.
pub fn stage2_example<T: Real>(
    net: &CtsNet<T>,
    ex: &Example<T>,
    lambda: f64,
    with_grad: bool,
) -> Result<(LossReport, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let pc = net.cme.store.bind(&mut tape, with_grad);
    let ps = net.csr.store.bind(&mut tape, with_grad);
    let (xr, xi) = (tape.constant(ex.noisy_r.clone()), tape.constant(ex.noisy_i.clone()));
    let (sr, si) = (tape.constant(ex.clean_r.clone()), tape.constant(ex.clean_i.clone()));
    let v = net.forward(&mut tape, &pc, &ps, xr, xi)?;
    let (clean_mag, _, _) = noisy_polar(&mut tape, sr, si)?;
    let l_cm = loss_cm(&mut tape, v.coarse_mag, clean_mag)?;
    let s = loss_stage2(&mut tape, v.refined_r, v.refined_i, sr, si, lambda, l_cm)?;
    let val = |x| tape.value(x).item().as_f64();
    let report = LossReport::stage2(val(l_cm), val(s.l_ri), val(s.l_mag), lambda);
    if !with_grad {
        return Ok((report, Vec::new(), Vec::new()));
    }
    tape.backward(s.total)?;
    Ok((report, pc.grads(&tape), ps.grads(&tape)))
}

fn mean_grads<T: Real>(mut parts: Vec<Vec<Tensor<T>>>) -> Result<Vec<Tensor<T>>> {
    let n = parts.len();
    let mut acc = parts.remove(0);
    for g in &parts {
        for (a, b) in acc.iter_mut().zip(g) {
            a.add_assign(b)?;
        }
    }
    let k = T::from_f64(1.0 / n as f64);
    acc.iter_mut().for_each(|t| t.scale(k));
    Ok(acc)
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Batch-mean report of every optimizer step; step `n` is at index `n - 1`.
    pub steps: Vec<LossReport>,
    /// Stopping metric after each epoch.
    pub epochs: Vec<f64>,
    pub stopped_early: bool,
}

struct Stopper {
    patience: usize,
    best: f64,
    wait: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// True once the metric has not improved for `patience` epochs.
    fn update(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.patience > 0 && self.wait >= self.patience
    }
}

fn diverged(step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Diverged {
            step,
            reason: e.to_string(),
        }
    } else {
        e
    }
}

fn check_report(step: usize, r: &LossReport) -> Result<()> {
    if r.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            reason: format!("non-finite loss ({})", r.log_line(step)),
        })
    }
}

/// Train CME-Net alone on the magnitude loss. After a numeric failure the
/// network holds the parameters that produced the last finite loss.
pub fn pretrain_cme<T: Real>(
    cfg: &TrainConfig,
    net: &mut CmeNet<T>,
    corpus: &Corpus,
    val: Option<&Corpus>,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.pairs.is_empty() {
        return Err(Error::Usage("empty training corpus".into()));
    }
    let mut opt = Adam::new(&net.store, cfg.lr_stage1, cfg.beta1, cfg.beta2);
    let val_examples = val.map(corpus_examples::<T>).transpose()?;
    let mut last_good = None;
    let result = (|| -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut stop = Stopper::new(cfg.patience);
        for epoch in 0..cfg.max_epochs {
            let examples = epoch_examples::<T>(cfg, corpus, epoch)?;
            let mut epoch_loss = Vec::new();
            for batch in examples.chunks(cfg.batch_size) {
                let step = log.steps.len() + 1;
                let outs: Vec<Result<(LossReport, Vec<Tensor<T>>)>> =
                    batch.par_iter().map(|ex| stage1_example(net, ex, true)).collect();
                let mut reports = Vec::with_capacity(outs.len());
                let mut grads = Vec::with_capacity(outs.len());
                for o in outs {
                    let (r, g) = o.map_err(|e| diverged(step, e))?;
                    reports.push(r);
                    grads.push(g);
                }
                let report = LossReport::mean(&reports, false);
                check_report(step, &report)?;
                let mut g = mean_grads(grads)?;
                clip_global_norm(&mut [&mut g], cfg.clip_norm);
                last_good = Some(net.store.clone());
                opt.step(&mut net.store, &g).map_err(|e| diverged(step, e))?;
                sink(&report.log_line(step));
                epoch_loss.push(report.total);
                log.steps.push(report);
            }
            let metric = match &val_examples {
                Some(v) if !v.is_empty() => {
                    let r: Vec<Result<(LossReport, _)>> = v.par_iter().map(|ex| stage1_example(net, ex, false)).collect();
                    let r: Vec<LossReport> = r.into_iter().map(|x| x.map(|p| p.0)).collect::<Result<_>>()?;
                    LossReport::mean(&r, false).total
                }
                _ => epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64,
            };
            log::info!("epoch={} metric={metric}", epoch + 1);
            log.epochs.push(metric);
            if stop.update(metric) {
                log.stopped_early = true;
                break;
            }
        }
        Ok(log)
    })();
    if let (Err(e), Some(good)) = (&result, last_good) {
        if e.is_numeric() {
            net.store = good;
        }
    }
    result
}

/// Learning rate of every parameter in joint training, CME group first.
pub fn lr_assignments<T: Real>(cfg: &TrainConfig, net: &CtsNet<T>) -> Vec<(String, f64)> {
    net.cme
        .store
        .iter()
        .map(|p| (p.name.clone(), cfg.lr_finetune_cme))
        .chain(net.csr.store.iter().map(|p| (p.name.clone(), cfg.lr_csr)))
        .collect()
}

/// Fine-tune a pretrained CME-Net together with CSR-Net on the combined loss.
/// Numeric failures restore the last good parameters as in [`pretrain_cme`].
pub fn joint_train<T: Real>(
    cfg: &TrainConfig,
    net: &mut CtsNet<T>,
    corpus: &Corpus,
    val: Option<&Corpus>,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.pairs.is_empty() {
        return Err(Error::Usage("empty training corpus".into()));
    }
    let mut opt_cme = Adam::new(&net.cme.store, cfg.lr_finetune_cme, cfg.beta1, cfg.beta2);
    let mut opt_csr = Adam::new(&net.csr.store, cfg.lr_csr, cfg.beta1, cfg.beta2);
    let val_examples = val.map(corpus_examples::<T>).transpose()?;
    let mut last_good = None;
    let result = (|| -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut stop = Stopper::new(cfg.patience);
        for epoch in 0..cfg.max_epochs {
            let examples = epoch_examples::<T>(cfg, corpus, epoch)?;
            let mut epoch_loss = Vec::new();
            for batch in examples.chunks(cfg.batch_size) {
                let step = log.steps.len() + 1;
                let outs: Vec<_> = batch
                    .par_iter()
                    .map(|ex| stage2_example(net, ex, cfg.lambda, true))
                    .collect();
                let mut reports = Vec::with_capacity(outs.len());
                let (mut gc, mut gs) = (Vec::new(), Vec::new());
                for o in outs {
                    let (r, a, b) = o.map_err(|e| diverged(step, e))?;
                    reports.push(r);
                    gc.push(a);
                    gs.push(b);
                }
                let report = LossReport::mean(&reports, true);
                check_report(step, &report)?;
                let mut gc = mean_grads(gc)?;
                let mut gs = mean_grads(gs)?;
                clip_global_norm(&mut [&mut gc, &mut gs], cfg.clip_norm);
                // both groups are checked before either is touched
                for g in gc.iter().chain(&gs) {
                    if !g.is_finite() {
                        return Err(Error::Diverged {
                            step,
                            reason: "non-finite gradient".into(),
                        });
                    }
                }
                last_good = Some((net.cme.store.clone(), net.csr.store.clone()));
                opt_cme.step(&mut net.cme.store, &gc).map_err(|e| diverged(step, e))?;
                opt_csr.step(&mut net.csr.store, &gs).map_err(|e| diverged(step, e))?;
                sink(&report.log_line(step));
                epoch_loss.push(report.total);
                log.steps.push(report);
            }
            let metric = match &val_examples {
                Some(v) if !v.is_empty() => {
                    let r: Vec<_> = v
                        .par_iter()
                        .map(|ex| stage2_example(net, ex, cfg.lambda, false).map(|p| p.0))
                        .collect();
                    let r: Vec<LossReport> = r.into_iter().collect::<Result<_>>()?;
                    LossReport::mean(&r, true).total
                }
                _ => epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64,
            };
            log::info!("epoch={} metric={metric}", epoch + 1);
            log.epochs.push(metric);
            if stop.update(metric) {
                log.stopped_early = true;
                break;
            }
        }
        Ok(log)
    })();
    if let (Err(e), Some(good)) = (&result, last_good) {
        if e.is_numeric() {
            (net.cme.store, net.csr.store) = good;
        }
    }
    result
}

/// SDR of the noisy input, the stage-1 output and the full output for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub noisy: f64,
    pub stage1: f64,
    pub cts: f64,
}

pub fn score_pairs<T: Real>(net: &CtsNet<T>, corpus: &Corpus) -> Result<Vec<PairScore>> {
    corpus
        .pairs
        .par_iter()
        .map(|p| {
            let s1 = net.cme.enhance(&p.mixture)?;
            let out = net.enhance(&p.mixture)?;
            Ok(PairScore {
                noisy: sdr(&p.clean.samples, &p.mixture.samples)?,
                stage1: sdr(&p.clean.samples, &s1.samples)?,
                cts: sdr(&p.clean.samples, &out.enhanced.samples)?,
            })
        })
        .collect()
}
