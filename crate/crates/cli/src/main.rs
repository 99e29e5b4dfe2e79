use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctsnet::analysis::{count_params, probe_causality, group_receptive_field, receptive_field, tcm_report, Probe};
use ctsnet::config::RunConfig;
use ctsnet::io::{wav_read, wav_write, Checkpoint, ModelKind};
use ctsnet::metrics::{sdr, si_sdr};
use ctsnet::nn::TcmVariant;
use ctsnet::train::{joint_train, pretrain_cme, synth_corpus, Corpus, MixtureSpec, Pair};
use ctsnet::{CmeNet, CtsNet, Error, NetConfig, Result};

#[derive(Parser)]
#[command(name = "ctsnet", version, about = "Two-stage complex spectral speech enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Enhance a 16 kHz mono WAV file.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Magnitude estimate with the noisy phase only.
        #[arg(long)]
        stage1_only: bool,
    },
    /// Train stage 1 (CME-Net) or jointly train both stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to start from; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "model.bin")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train on `noisy_*.wav` / `clean_*.wav` pairs instead of a fresh synthetic corpus.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Parameter counts and receptive field.
    Analyze {
        /// Without a checkpoint the default full-size model is analyzed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        conv_only: bool,
        /// Share main/gate weights in MG-TCMs (default model only).
        #[arg(long)]
        gate_sharing: bool,
    },
    /// Future-perturbation causality probe.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic corpus as WAV files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// SDR and SI-SDR of an estimate against a reference.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        est: PathBuf,
    },
}

enum Outcome {
    Ok,
    Failed,
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&fs::read_to_string(path)?)?;
    if let Some(s) = seed {
        cfg.net.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn enhance(input: &Path, out: &Path, ckpt: &Path, stage1_only: bool) -> Result<Outcome> {
    let ck = Checkpoint::load(ckpt)?;
    let noisy = wav_read(input)?;
    let y = if stage1_only {
        ck.cme::<f32>()?.enhance(&noisy)?
    } else {
        if ck.kind == ModelKind::Cme {
            return Err(Error::Usage("stage-1 checkpoint: pass --stage1-only".into()));
        }
        ck.cts::<f32>()?.enhance(&noisy)?.enhanced
    };
    wav_write(out, &y)?;
    Ok(Outcome::Ok)
}

fn load_pairs(dir: &Path) -> Result<Corpus> {
    let mut pairs = Vec::new();
    for k in 0.. {
        let noisy = dir.join(format!("noisy_{k:03}.wav"));
        if !noisy.exists() {
            break;
        }
        let mixture = wav_read(&noisy)?;
        let clean = wav_read(dir.join(format!("clean_{k:03}.wav")))?;
        if clean.len() != mixture.len() {
            return Err(Error::Usage(format!("pair {k}: clean and noisy lengths differ")));
        }
        let noise = ctsnet::Waveform::new(mixture.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect());
        pairs.push(Pair {
            spec: MixtureSpec {
                clean_id: k,
                noise_id: k,
                snr_db: 10.0 * (clean.energy() / noise.energy()).log10(),
                offset: 0,
            },
            clean,
            noise,
            mixture,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Usage(format!("no noisy_000.wav in {}", dir.display())));
    }
    Ok(Corpus { pairs, resampled: 0 })
}

fn train(config: &Path, stage: u8, init: Option<&Path>, out: &Path, seed: Option<u64>, data: Option<&Path>) -> Result<Outcome> {
    let cfg = read_config(config, seed)?;
    let corpus = match data {
        Some(d) => load_pairs(d)?,
        None => synth_corpus(&cfg.train, cfg.train.pairs, cfg.train.seed)?,
    };
    let val = if cfg.train.val_pairs > 0 {
        Some(synth_corpus(&cfg.train, cfg.train.val_pairs, cfg.train.seed.wrapping_add(1))?)
    } else {
        None
    };
    let mut print = |line: &str| println!("{line}");
    if stage == 1 {
        let mut net = match init {
            Some(p) => {
                let ck = Checkpoint::load(p)?;
                let bad = ck.config_mismatches(&cfg.net);
                if !bad.is_empty() {
                    return Err(Error::Mismatch(bad));
                }
                ck.cme::<f32>()?
            }
            None => CmeNet::<f32>::new(&cfg.net)?,
        };
        let res = pretrain_cme(&cfg.train, &mut net, &corpus, val.as_ref(), &mut print);
        Checkpoint::from_cme(&net).save(out)?;
        res?;
    } else {
        let init = init.ok_or_else(|| Error::Usage("stage 2 needs --init <stage-1 checkpoint>".into()))?;
        let mut net: CtsNet<f32> = Checkpoint::load(init)?.cts_matching(&cfg.net)?;
        let res = joint_train(&cfg.train, &mut net, &corpus, val.as_ref(), &mut print);
        Checkpoint::from_cts(&net).save(out)?;
        res?;
    }
    log::info!("wrote {}", out.display());
    Ok(Outcome::Ok)
}

fn analyze(ckpt: Option<&Path>, conv_only: bool, gate_sharing: bool) -> Result<Outcome> {
    let (net, kind): (CtsNet<f32>, ModelKind) = match ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.cts()?, ck.kind)
        }
        None => {
            let cfg = NetConfig {
                gate_weight_sharing: gate_sharing,
                smoothed: false,
                ..NetConfig::full()
            };
            (CtsNet::new(&cfg)?, ModelKind::Cts)
        }
    };
    let cfg = net.cfg().clone();
    println!("model.kind={}", kind.name());
    for (k, v) in cfg.entries() {
        println!("config.{k}={v}");
    }
    for variant in [TcmVariant::O, TcmVariant::Mg, TcmVariant::Dmg] {
        let r = tcm_report(cfg.tcm_base(variant))?;
        println!("tcm.{}.params={}", variant.name(), r.count(!conv_only));
        print!("{}", prefixed(&format!("tcm.{}.group.", variant.name()), &group_receptive_field(cfg.tcm_base(variant))?.to_kv()));
    }
    let include = !conv_only;
    let (cme, n_cme) = count_params(&net.cme, include);
    print!("{}", prefixed("cme.", &cme.to_kv(include)));
    println!("cme.params_million={:.3}", n_cme as f64 / 1e6);
    if kind == ModelKind::Cts {
        let (csr, _) = count_params(&net.csr, include);
        print!("{}", prefixed("csr.", &csr.to_kv(include)));
        let (_, n) = count_params(&net, include);
        println!("cts.params={n}");
        println!("cts.params_million={:.3}", n as f64 / 1e6);
    }
    print!("{}", prefixed("cme.", &receptive_field(&net.cme).to_kv()));
    if kind == ModelKind::Cts {
        print!("{}", prefixed("csr.", &receptive_field(&net.csr).to_kv()));
        print!("{}", prefixed("cts.", &receptive_field(&net).to_kv()));
    }
    Ok(Outcome::Ok)
}

fn prefixed(prefix: &str, kv: &str) -> String {
    kv.lines().map(|l| format!("{prefix}{l}\n")).collect()
}

fn probe(ckpt: &Path, trials: usize, frames: usize, seed: u64) -> Result<Outcome> {
    if frames < 2 {
        return Err(Error::Usage("--frames must be at least 2".into()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let net: CtsNet<f64> = ck.cts()?;
    let mut targets: Vec<&dyn Probe> = vec![&net.cme];
    if ck.kind == ModelKind::Cts {
        targets.push(&net.csr);
        targets.push(&net);
    }
    let mut ok = true;
    for t in targets {
        let r = probe_causality(t, frames, trials, seed)?;
        print!("{}", r.to_kv());
        ok &= r.passed();
    }
    Ok(if ok { Outcome::Ok } else { Outcome::Failed })
}

fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = read_config(config, seed)?;
    let corpus = synth_corpus(&cfg.train, cfg.train.pairs, cfg.train.seed)?;
    fs::create_dir_all(out)?;
    let mut manifest = String::new();
    for (k, p) in corpus.pairs.iter().enumerate() {
        wav_write(out.join(format!("clean_{k:03}.wav")), &p.clean)?;
        wav_write(out.join(format!("noise_{k:03}.wav")), &p.noise)?;
        wav_write(out.join(format!("noisy_{k:03}.wav")), &p.mixture)?;
        manifest.push_str(&format!(
            "pair={k} clean_id={} noise_id={} snr_db={} offset={}\n",
            p.spec.clean_id, p.spec.noise_id, p.spec.snr_db, p.spec.offset
        ));
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!("pairs={}", corpus.pairs.len());
    println!("resampled_noise_cuts={}", corpus.resampled);
    Ok(Outcome::Ok)
}

fn eval(reference: &Path, est: &Path) -> Result<Outcome> {
    let r = wav_read(reference)?;
    let e = wav_read(est)?;
    println!("sdr={}", sdr(&r.samples, &e.samples)?);
    println!("si_sdr={}", si_sdr(&r.samples, &e.samples)?);
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Enhance {
            input,
            out,
            ckpt,
            stage1_only,
        } => enhance(input, out, ckpt, *stage1_only),
        Cmd::Train {
            config,
            stage,
            init,
            out,
            seed,
            data,
        } => train(config, *stage, init.as_deref(), out, *seed, data.as_deref()),
        Cmd::Analyze {
            ckpt,
            conv_only,
            gate_sharing,
        } => analyze(ckpt.as_deref(), *conv_only, *gate_sharing),
        Cmd::Probe {
            ckpt,
            trials,
            frames,
            seed,
        } => probe(ckpt, *trials, *frames, *seed),
        Cmd::Synth { config, out, seed } => synth(config, out, *seed),
        Cmd::Eval { reference, est } => eval(reference, est),
    };
    match res {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
