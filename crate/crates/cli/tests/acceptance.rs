//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any criterion fails.

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctsnet::analysis::{
    count_params, group_receptive_field, impulse_span, probe_causality, probe_waveform_causality, tcm_report,
    ConvStack,
};
use ctsnet::config::TrainConfig;
use ctsnet::gradcheck::gradient_suite;
use ctsnet::loss::{LossReport, LAMBDA};
use ctsnet::nn::{Extent, TcmConfig, TcmVariant};
use ctsnet::stft::{coverage, Framing, Stft};
use ctsnet::train::{
    corpus_examples, joint_train, mix_at_snr, pretrain_cme, score_pairs, stage1_example, synth_corpus, Corpus,
};
use ctsnet::{CmeNet, CsrNet, CtsNet, NetConfig, Waveform};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget: Duration, detail: String) -> Outcome {
    ensure(
        elapsed <= budget,
        format!("{detail}; {:.1}s of {:.0}s budget", elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

fn param_counts() -> Outcome {
    let t = Instant::now();
    let o = tcm_report(TcmConfig::o(0)).map_err(|e| e.to_string())?.conv_only;
    let mg = tcm_report(TcmConfig {
        gate_weight_sharing: true,
        ..TcmConfig::mg(0)
    })
    .map_err(|e| e.to_string())?
    .conv_only;
    // the same modules as the full-size network builds them
    let full = NetConfig {
        gate_weight_sharing: true,
        ..NetConfig::full()
    };
    let o_net = tcm_report(full.tcm_base(TcmVariant::O)).map_err(|e| e.to_string())?.conv_only;
    let mg_net = tcm_report(full.tcm_base(TcmVariant::Mg)).map_err(|e| e.to_string())?.conv_only;
    let detail = format!("O={o} MG(shared)={mg} in-network O={o_net} MG={mg_net}");
    ensure(o == 263_680 && mg == 53_248 && o_net == o && mg_net == mg, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(1), detail)
}

fn network_totals() -> Outcome {
    let t = Instant::now();
    let cfg = NetConfig::full();
    let cme = CmeNet::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    let (_, n_cme) = count_params(&cme, true);
    let cts = CtsNet::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    let (_, n_cts) = count_params(&cts, true);
    let near = |n: usize, target: f64| ((n as f64 - target) / target).abs() <= 0.15;
    let detail = format!(
        "CME {:.3}M (target 1.96M) CTS {:.3}M (target 4.99M)",
        n_cme as f64 / 1e6,
        n_cts as f64 / 1e6
    );
    ensure(near(n_cme, 1.96e6) && near(n_cts, 4.99e6), detail.clone())?;
    within(t.elapsed(), Duration::from_secs(5), detail)
}

fn causality() -> Outcome {
    let t = Instant::now();
    let cfg = NetConfig::full();
    let cme = CmeNet::<f64>::new(&cfg).map_err(|e| e.to_string())?;
    let csr = CsrNet::<f64>::new(&cfg).map_err(|e| e.to_string())?;
    let cts = CtsNet::<f64>::new(&cfg).map_err(|e| e.to_string())?;
    let frames = 6;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, probe) in [
        ("cme", &cme as &dyn ctsnet::analysis::Probe),
        ("csr", &csr),
        ("cts", &cts),
    ] {
        let r = probe_causality(probe, frames, 100, 7).map_err(|e| e.to_string())?;
        ok &= r.passed() && r.trials == 100;
        parts.push(format!("{name} {}/{} violations", r.violations.len(), r.trials));
    }
    let wave = probe_waveform_causality(&cts, frames, 20, 7).map_err(|e| e.to_string())?;
    ok &= wave == 0;
    parts.push(format!("waveform {wave} violations"));
    let bad = ConvStack::with_symmetric_layer(3, &[1, 2], 1, 0);
    let neg = probe_causality(&bad, 10, 100, 7).map_err(|e| e.to_string())?;
    let flagged = neg.offending_layers();
    ok &= !neg.passed() && flagged == ["stack.l1"];
    parts.push(format!("negative control flags {flagged:?}"));
    let detail = parts.join(", ");
    ensure(ok, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(120), detail)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut cases = 0;
    for seed in 0..10 {
        for (name, e) in gradient_suite(seed).map_err(|e| e.to_string())? {
            cases += 1;
            if !(e < 1e-4) {
                return Err(format!("{name} seed {seed}: relative error {e:e}"));
            }
            if e > worst.1 {
                worst = (name, e);
            }
        }
    }
    within(
        t.elapsed(),
        Duration::from_secs(300),
        format!("{cases} checks over 10 seeds, worst {} {:.2e}", worst.0, worst.1),
    )
}

fn noise(len: usize, rng: &mut ChaCha8Rng) -> Waveform {
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn stft_round_trip() -> Outcome {
    let t = Instant::now();
    let plan = Stft::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut worst_full, mut worst_add) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let w = noise(16_000, &mut rng);
        let s = plan.stft(&w).map_err(|e| e.to_string())?;
        let n = coverage(s.frames());
        let r = plan.istft(&s, n).map_err(|e| e.to_string())?;
        let (mut err, mut norm) = (0.0, 0.0);
        for k in 160..n - 160 {
            err += (r.samples[k] - w.samples[k]).powi(2);
            norm += w.samples[k].powi(2);
        }
        worst = worst.max((err / norm).sqrt());

        // padded framing reconstructs every sample
        let f = Framing::new(w.len());
        let padded = f.pad(&w.samples);
        let back = f.crop(plan.istft(&plan.stft(&padded).map_err(|e| e.to_string())?, padded.len()).map_err(|e| e.to_string())?);
        let err: f64 = back.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).powi(2)).sum();
        worst_full = worst_full.max((err / w.energy()).sqrt());

        let v = noise(16_000, &mut rng);
        let sum = Waveform::new(w.samples.iter().zip(&v.samples).map(|(a, b)| a + b).collect());
        let lhs = plan.stft(&sum).map_err(|e| e.to_string())?;
        let rhs = s.scaled_sum(1.0, &plan.stft(&v).map_err(|e| e.to_string())?, 1.0).map_err(|e| e.to_string())?;
        let planes = [(&lhs.real, &rhs.real), (&lhs.imag, &rhs.imag)];
        let (mut d, mut m) = (0.0f64, 0.0f64);
        for (a, b) in planes {
            for (x, y) in a.data().iter().zip(b.data()) {
                d = d.max((x - y).abs());
                m = m.max(y.abs());
            }
        }
        worst_add = worst_add.max(d / m);
    }
    let detail = format!("interior {worst:.1e}, padded full-length {worst_full:.1e}, additivity {worst_add:.1e}");
    ensure(worst < 1e-6 && worst_full < 1e-6 && worst_add < 1e-12, detail.clone())?;
    within(t.elapsed(), Duration::from_secs(10), detail)
}

fn loss_composition() -> Outcome {
    let cfg = TrainConfig {
        pairs: 10,
        utterance_seconds: 0.5,
        max_epochs: 10,
        patience: 0,
        ..TrainConfig::default()
    };
    let corpus = synth_corpus(&cfg, cfg.pairs, 3).map_err(|e| e.to_string())?;
    let mut net = CtsNet::<f32>::new(&NetConfig::tiny()).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    joint_train(&cfg, &mut net, &corpus, None, &mut |l| lines.push(l.to_string())).map_err(|e| e.to_string())?;
    if lines.len() != 50 {
        return Err(format!("{} steps logged, expected 50", lines.len()));
    }
    let mut worst = 0.0f64;
    for (k, line) in lines.iter().enumerate() {
        let (step, [cm, ri, mag, total]) = LossReport::parse_log_line(line).ok_or(format!("unparsable: {line}"))?;
        if step != k + 1 {
            return Err(format!("step {step} at line {}", k + 1));
        }
        let rel = ((ri + mag + 0.1 * cm) - total).abs() / total.abs();
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-12 && LAMBDA == 0.1, format!("50 steps, worst relative mismatch {worst:.1e}"))
}

fn corpus_loss(net: &CmeNet<f32>, corpus: &Corpus) -> Result<f64, String> {
    let examples = corpus_examples::<f32>(corpus).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for ex in &examples {
        total += stage1_example(net, ex, false).map_err(|e| e.to_string())?.0.l_cm;
    }
    Ok(total / examples.len() as f64)
}

/// Shared by the learning and directionality criteria.
struct DeskRun {
    loss_before: f64,
    loss_after: f64,
    scores: Vec<ctsnet::train::PairScore>,
    elapsed: Duration,
}

fn desk_run() -> Result<DeskRun, String> {
    let t = Instant::now();
    let stage1 = TrainConfig {
        pairs: 10,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    let corpus = synth_corpus(&stage1, stage1.pairs, 0).map_err(|e| e.to_string())?;
    let mut cme = CmeNet::<f32>::new(&NetConfig::tiny()).map_err(|e| e.to_string())?;
    let loss_before = corpus_loss(&cme, &corpus)?;
    pretrain_cme(&stage1, &mut cme, &corpus, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let loss_after = corpus_loss(&cme, &corpus)?;
    let mut cts = CtsNet::from_cme(cme).map_err(|e| e.to_string())?;
    let joint = TrainConfig {
        max_epochs: 100,
        ..stage1
    };
    joint_train(&joint, &mut cts, &corpus, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let scores = score_pairs(&cts, &corpus).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        loss_before,
        loss_after,
        scores,
        elapsed: t.elapsed(),
    })
}

fn desk_learning(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let reduction = 1.0 - run.loss_after / run.loss_before;
    let gains: Vec<f64> = run.scores.iter().map(|s| s.cts - s.noisy).collect();
    let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let detail = format!(
        "stage-1 loss reduced {:.1}%, SDR gain min {min:+.2} dB mean {mean:+.2} dB",
        100.0 * reduction
    );
    ensure(reduction >= 0.9 && min >= 10.0, detail.clone())?;
    within(run.elapsed, Duration::from_secs(1800), detail)
}

fn directionality(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let wins = run.scores.iter().filter(|s| s.cts >= s.stage1).count();
    let margins: Vec<String> = run.scores.iter().map(|s| format!("{:+.1}", s.cts - s.stage1)).collect();
    ensure(
        wins >= 8,
        format!("full output >= stage 1 on {wins}/10 pairs (dB margins {})", margins.join(" ")),
    )
}

fn receptive_field() -> Outcome {
    let t = Instant::now();
    let r = group_receptive_field(TcmConfig::mg(0)).map_err(|e| e.to_string())?;
    let fixture = ConvStack::causal(5, &[1, 2], 0);
    let analytic = fixture.topology().span();
    let frames = 40;
    let empirical = impulse_span(&fixture, frames, 10).map_err(|e| e.to_string())?;
    let detail = format!(
        "MG group past {:?} future {:?}; fixture analytic {:?} empirical {:?}",
        r.span.past, r.span.future, analytic.past, empirical.past
    );
    ensure(
        r.span.past == Extent::Finite(252)
            && r.span.future == Extent::Finite(0)
            && empirical == analytic
            && analytic.past == Extent::Finite(12),
        detail.clone(),
    )?;
    within(t.elapsed(), Duration::from_secs(30), detail)
}

fn mixture_snr() -> Outcome {
    let cfg = TrainConfig {
        utterance_seconds: 0.5,
        ..TrainConfig::default()
    };
    let corpus = synth_corpus(&cfg, 60, 11).map_err(|e| e.to_string())?;
    let grid = cfg.snr_grid();
    let mut worst = 0.0f64;
    let mut seen = vec![false; grid.len()];
    for p in &corpus.pairs {
        let snr = 10.0 * (p.clean.energy() / p.noise.energy()).log10();
        worst = worst.max((snr - p.spec.snr_db).abs());
        let k = grid.iter().position(|&g| g == p.spec.snr_db).ok_or(format!("{} dB off grid", p.spec.snr_db))?;
        seen[k] = true;
        let rebuilt: f64 = p
            .mixture
            .samples
            .iter()
            .zip(p.clean.samples.iter().zip(&p.noise.samples))
            .map(|(m, (c, n))| (m - c - n).abs())
            .fold(0.0, f64::max);
        if rebuilt > 1e-12 {
            return Err("mixture is not clean + noise".into());
        }
    }
    // the mixer alone, on every grid point
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &snr in &grid {
        let (clean, n) = (noise(8000, &mut rng), noise(8000, &mut rng));
        let (mix, alpha) = mix_at_snr(&clean, &n, snr).map_err(|e| e.to_string())?;
        let scaled_energy: f64 = mix.samples.iter().zip(&clean.samples).map(|(m, c)| (m - c).powi(2)).sum();
        let got = 10.0 * (clean.energy() / scaled_energy).log10();
        worst = worst.max((got - snr).abs());
        if !(alpha > 0.0) {
            return Err(format!("alpha {alpha} at {snr} dB"));
        }
    }
    ensure(
        worst <= 0.01 && seen.iter().all(|&s| s),
        format!("60 pairs over {:?} dB, worst deviation {worst:.2e} dB", grid),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "pairs=3\nutterance_seconds=0.5\nmax_epochs=3\nseed=9\n").map_err(|e| e.to_string())?;
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("model{k}.bin"));
        let status = Command::new(env!("CARGO_BIN_EXE_ctsnet"))
            .args(["train", "--stage", "1", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("train exited with {}", status.status));
        }
        outs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(
        outs[0] == outs[1] && !outs[0].is_empty(),
        format!("two checkpoints of {} and {} bytes identical: {}", outs[0].len(), outs[1].len(), outs[0] == outs[1]),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` forwards its own flags; skip when a filter excludes us
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }

    // trained once, scored by two criteria
    let desk: OnceCell<Result<DeskRun, String>> = OnceCell::new();
    let run = || {
        desk.get_or_init(|| {
            catch_unwind(desk_run).unwrap_or_else(|_| Err("training panicked".into()))
        })
    };
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("parameter counts", Box::new(param_counts)),
        ("network totals", Box::new(network_totals)),
        ("causality", Box::new(causality)),
        ("gradients", Box::new(gradients)),
        ("stft round trip", Box::new(stft_round_trip)),
        ("loss composition", Box::new(loss_composition)),
        ("desk learning", Box::new(|| desk_learning(run()))),
        ("two-stage directionality", Box::new(|| directionality(run()))),
        ("receptive field", Box::new(receptive_field)),
        ("mixture snr", Box::new(mixture_snr)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let r = guarded(f);
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d}) [{secs:.1}s]", k + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d}) [{secs:.1}s]", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
