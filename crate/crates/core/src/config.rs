//! Flat `key = value` configuration files.

use crate::error::{Error, Result};
use crate::loss::{check_lambda, LAMBDA};
use crate::nets::NetConfig;

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_finetune_cme: f64,
    pub lr_csr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    pub max_chunk_seconds: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub snr_step_db: f64,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Synthetic corpus size and utterance length.
    pub pairs: usize,
    pub val_pairs: usize,
    pub utterance_seconds: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_stage1: 1e-3,
            lr_finetune_cme: 1e-4,
            lr_csr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            lambda: LAMBDA,
            batch_size: 2,
            max_chunk_seconds: 8.0,
            snr_min_db: -5.0,
            snr_max_db: 0.0,
            snr_step_db: 1.0,
            max_epochs: 200,
            patience: 5,
            clip_norm: 5.0,
            seed: 0,
            pairs: 10,
            val_pairs: 0,
            utterance_seconds: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_finetune_cme", self.lr_finetune_cme),
            ("lr_csr", self.lr_csr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite nonnegative rate, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        check_lambda(self.lambda)?;
        if self.batch_size == 0 || self.pairs == 0 {
            return Err(Error::Config("batch_size and pairs must be positive".into()));
        }
        if !(self.snr_min_db <= self.snr_max_db && self.snr_step_db > 0.0) {
            return Err(Error::Config(format!(
                "empty snr range [{}, {}] step {}",
                self.snr_min_db, self.snr_max_db, self.snr_step_db
            )));
        }
        if !(self.max_chunk_seconds > 0.0 && self.utterance_seconds > 0.0) {
            return Err(Error::Config("durations must be positive".into()));
        }
        Ok(())
    }

    /// Requested SNR grid, inclusive of both ends.
    pub fn snr_grid(&self) -> Vec<f64> {
        let n = ((self.snr_max_db - self.snr_min_db) / self.snr_step_db + 1e-9).floor() as usize;
        (0..=n).map(|k| self.snr_min_db + k as f64 * self.snr_step_db).collect()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr_stage1", self.lr_stage1.to_string()),
            ("lr_finetune_cme", self.lr_finetune_cme.to_string()),
            ("lr_csr", self.lr_csr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("lambda", self.lambda.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_chunk_seconds", self.max_chunk_seconds.to_string()),
            ("snr_min_db", self.snr_min_db.to_string()),
            ("snr_max_db", self.snr_max_db.to_string()),
            ("snr_step_db", self.snr_step_db.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("pairs", self.pairs.to_string()),
            ("val_pairs", self.val_pairs.to_string()),
            ("utterance_seconds", self.utterance_seconds.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let float = || value.parse::<f64>().map_err(|_| bad());
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "lr_stage1" => self.lr_stage1 = float()?,
            "lr_finetune_cme" => self.lr_finetune_cme = float()?,
            "lr_csr" => self.lr_csr = float()?,
            "beta1" => self.beta1 = float()?,
            "beta2" => self.beta2 = float()?,
            "lambda" => self.lambda = float()?,
            "batch_size" => self.batch_size = int()?,
            "max_chunk_seconds" => self.max_chunk_seconds = float()?,
            "snr_min_db" => self.snr_min_db = float()?,
            "snr_max_db" => self.snr_max_db = float()?,
            "snr_step_db" => self.snr_step_db = float()?,
            "max_epochs" => self.max_epochs = int()?,
            "patience" => self.patience = int()?,
            "clip_norm" => self.clip_norm = float()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "pairs" => self.pairs = int()?,
            "val_pairs" => self.val_pairs = int()?,
            "utterance_seconds" => self.utterance_seconds = float()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Model structure plus training protocol, as read from one file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::tiny(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// `seed` seeds both initialization and training; `preset = full|tiny`
    /// must come first if present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, (k, v)) in parse_kv(text)?.into_iter().enumerate() {
            if k == "preset" {
                if i != 0 {
                    return Err(Error::Config("preset must be the first key".into()));
                }
                cfg.net = match v.as_str() {
                    "full" => NetConfig::full(),
                    "tiny" => NetConfig::tiny(),
                    _ => return Err(Error::Config(format!("unknown preset {v:?}"))),
                };
                continue;
            }
            let net = cfg.net.apply(&k, &v)?;
            let train = cfg.train.apply(&k, &v)?;
            if !net && !train {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.net.entries().into_iter().chain(self.train.entries()) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::parse("# demo\nchannels = 8\n\nlr_csr=0.002 # inline\nseed = 9\n").unwrap();
        assert_eq!(cfg.net.channels, 8);
        assert_eq!(cfg.train.lr_csr, 0.002);
        assert_eq!((cfg.net.seed, cfg.train.seed), (9, 9));
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.net.entries(), cfg.net.entries());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("unknown = 1").is_err());
        assert!(RunConfig::parse("lambda = 2").is_err());
        assert!(RunConfig::parse("lr_stage1 = -1").is_err());
        assert!(RunConfig::parse("snr_min_db = 3\nsnr_max_db = 0").is_err());
        assert!(RunConfig::parse("channels = 8\npreset = full").is_err());
    }

    #[test]
    fn preset_and_defaults() {
        let cfg = RunConfig::parse("preset = full").unwrap();
        assert_eq!(cfg.net, NetConfig::full());
        let t = TrainConfig::default();
        assert_eq!((t.lr_stage1, t.lr_finetune_cme, t.lr_csr), (1e-3, 1e-4, 1e-3));
        assert_eq!((t.beta1, t.beta2, t.lambda), (0.9, 0.999, 0.1));
        assert_eq!(t.snr_grid(), vec![-5.0, -4.0, -3.0, -2.0, -1.0, 0.0]);
    }
}
