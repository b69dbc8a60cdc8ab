//! Model and training configuration, plus the plain-text `key = value`
//! config file.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys, malformed
//! values and constraint violations are collected and reported together.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Which residual encoder the model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoVae,
    Global,
    Fine,
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "novae" => Ok(Variant::NoVae),
            "global" => Ok(Variant::Global),
            "fine" => Ok(Variant::Fine),
            _ => Err(format!("unknown variant '{s}' (expected novae, global or fine)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::NoVae => "novae",
            Variant::Global => "global",
            Variant::Fine => "fine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    LConv,
    Transformer,
}

impl FromStr for DecoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lconv" => Ok(DecoderKind::LConv),
            "transformer" => Ok(DecoderKind::Transformer),
            _ => Err(format!("unknown decoder '{s}' (expected lconv or transformer)")),
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::LConv => "lconv",
            DecoderKind::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub num_speakers: usize,
    pub d_model: usize,
    pub speaker_dim: usize,
    pub latent_dim: usize,
    pub latent_proj_dim: usize,

    pub enc_conv_blocks: usize,
    pub enc_conv_width: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,

    /// Channel width inside both posterior networks.
    pub vae_dim: usize,
    pub vae_heads: usize,
    pub vae_width: usize,
    pub global_plain_blocks: usize,
    pub global_strided_blocks: usize,
    pub fine_blocks: usize,
    /// Width of each positional sinusoid fed to the fine posterior.
    pub fine_pos_dim: usize,
    pub prior_hidden: usize,

    pub dur_blocks: usize,
    pub dur_width: usize,
    pub dur_heads: usize,

    pub decoder: DecoderKind,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub dec_width: usize,

    pub mel_bins: usize,
    pub dropout: f64,
    pub frame_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Global,
            vocab_size: 28,
            num_speakers: 4,
            d_model: 64,
            speaker_dim: 64,
            latent_dim: 8,
            latent_proj_dim: 32,
            enc_conv_blocks: 3,
            enc_conv_width: 5,
            enc_blocks: 6,
            enc_heads: 8,
            vae_dim: 32,
            vae_heads: 8,
            vae_width: 17,
            global_plain_blocks: 3,
            global_strided_blocks: 5,
            fine_blocks: 5,
            fine_pos_dim: 16,
            prior_hidden: 128,
            dur_blocks: 4,
            dur_width: 3,
            dur_heads: 8,
            decoder: DecoderKind::LConv,
            dec_blocks: 6,
            dec_heads: 8,
            dec_width: 17,
            mel_bins: 128,
            dropout: 0.1,
            frame_rate: 80.0,
        }
    }
}

impl ModelConfig {
    /// Width of the conditioned token representation
    /// (encoder + speaker + projected latent).
    pub fn cond_dim(&self) -> usize {
        self.d_model + self.speaker_dim + self.latent_proj_dim
    }

    /// A small configuration for gradient checks and unit tests.
    pub fn tiny(variant: Variant, decoder: DecoderKind) -> Self {
        ModelConfig {
            variant,
            vocab_size: 6,
            num_speakers: 2,
            d_model: 8,
            speaker_dim: 4,
            latent_dim: 2,
            latent_proj_dim: 4,
            enc_conv_blocks: 1,
            enc_conv_width: 3,
            enc_blocks: 1,
            enc_heads: 2,
            vae_dim: 4,
            vae_heads: 2,
            vae_width: 3,
            global_plain_blocks: 1,
            global_strided_blocks: 2,
            fine_blocks: 1,
            fine_pos_dim: 4,
            prior_hidden: 4,
            dur_blocks: 1,
            dur_width: 3,
            dur_heads: 2,
            decoder,
            dec_blocks: 2,
            dec_heads: 2,
            dec_width: 3,
            mel_bins: 3,
            dropout: 0.0,
            frame_rate: 80.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_speakers", self.num_speakers),
            ("d_model", self.d_model),
            ("speaker_dim", self.speaker_dim),
            ("latent_dim", self.latent_dim),
            ("latent_proj_dim", self.latent_proj_dim),
            ("enc_heads", self.enc_heads),
            ("vae_dim", self.vae_dim),
            ("vae_heads", self.vae_heads),
            ("fine_pos_dim", self.fine_pos_dim),
            ("prior_hidden", self.prior_hidden),
            ("dur_heads", self.dur_heads),
            ("dec_blocks", self.dec_blocks),
            ("dec_heads", self.dec_heads),
            ("mel_bins", self.mel_bins),
        ];
        for (k, v) in positive {
            if v == 0 {
                errs.push(format!("{k} must be positive"));
            }
        }
        if errs.is_empty() {
            let cond = self.cond_dim();
            let divides = [
                ("enc_heads", self.enc_heads, "d_model", self.d_model),
                ("vae_heads", self.vae_heads, "vae_dim", self.vae_dim),
                ("dur_heads", self.dur_heads, "conditioned width", cond),
                ("dec_heads", self.dec_heads, "conditioned width", cond),
            ];
            for (hk, h, dk, d) in divides {
                if d % h != 0 {
                    errs.push(format!("{hk} = {h} does not divide {dk} = {d}"));
                }
            }
        }
        if self.d_model % 2 != 0 {
            errs.push(format!("d_model must be even, got {}", self.d_model));
        }
        if self.cond_dim() % 2 != 0 {
            errs.push(format!("conditioned width must be even, got {}", self.cond_dim()));
        }
        if self.fine_pos_dim % 2 != 0 {
            errs.push(format!("fine_pos_dim must be even, got {}", self.fine_pos_dim));
        }
        for (k, w) in [
            ("enc_conv_width", self.enc_conv_width),
            ("vae_width", self.vae_width),
            ("dur_width", self.dur_width),
            ("dec_width", self.dec_width),
        ] {
            if w % 2 == 0 {
                errs.push(format!("{k} must be odd, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.frame_rate.is_nan() || self.frame_rate <= 0.0 {
            errs.push(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub decay_start: usize,
    pub decay_end: usize,
    pub lr_floor: f64,
    pub clip_norm: f64,
    pub kl_start: usize,
    pub kl_end: usize,
    pub kl_final: f64,
    pub global_beta: f64,
    pub lambda_dur: f64,
    pub iterative_loss: bool,
    pub precision: Precision,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            steps: 1200,
            batch_size: 16,
            base_lr: 0.1,
            momentum: 0.99,
            warmup_steps: 100,
            decay_start: 200,
            decay_end: 1000,
            lr_floor: 0.01,
            clip_norm: 0.2,
            kl_start: 60,
            kl_end: 500,
            kl_final: 1.0,
            global_beta: 1.0,
            lambda_dur: 1.0,
            iterative_loss: true,
            precision: Precision::Standard,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) {
            errs.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.warmup_steps > self.decay_start {
            errs.push(format!(
                "warmup_steps ({}) must not exceed decay_start ({})",
                self.warmup_steps, self.decay_start
            ));
        }
        if self.decay_start >= self.decay_end {
            errs.push(format!(
                "decay_start ({}) must be below decay_end ({})",
                self.decay_start, self.decay_end
            ));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            errs.push(format!("lr_floor must lie in (0, 1], got {}", self.lr_floor));
        }
        if !(self.clip_norm > 0.0) {
            errs.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.kl_start >= self.kl_end {
            errs.push(format!("kl_start ({}) must be below kl_end ({})", self.kl_start, self.kl_end));
        }
        if !(self.kl_final >= 0.0) || !(self.global_beta >= 0.0) {
            errs.push("KL weights must be non-negative".into());
        }
        if !(self.lambda_dur >= 0.0) {
            errs.push(format!("lambda_dur must be non-negative, got {}", self.lambda_dur));
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Keys the fine variant must state explicitly.
pub const FINE_REQUIRED_KEYS: [&str; 3] = ["kl_start", "kl_end", "kl_final"];

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Like [`RunConfig::parse`], with `overrides` replacing or adding keys
    /// before validation.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut errs = Vec::new();
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let k = k.trim().to_string();
                    if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                        errs.push(format!("line {}: duplicate key '{k}'", no + 1));
                    }
                }
                None => errs.push(format!("line {}: expected 'key = value', got '{line}'", no + 1)),
            }
        }
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        let mut cfg = RunConfig::default();
        for (k, v) in &entries {
            if let Err(e) = cfg.set(k, v) {
                errs.push(e);
            }
        }
        if cfg.model.variant == Variant::Fine {
            for k in FINE_REQUIRED_KEYS {
                if !entries.contains_key(k) {
                    errs.push(format!("variant fine requires '{k}'"));
                }
            }
        }
        errs.extend(cfg.model.problems());
        errs.extend(cfg.train.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "on" | "true" | "1" => Ok(true),
                "off" | "false" | "0" => Ok(false),
                _ => Err(format!("{key}: expected on/off, got '{v}'")),
            }
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "variant" => m.variant = value.parse().map_err(|e| format!("variant: {e}"))?,
            "vocab_size" => m.vocab_size = p(key, value)?,
            "num_speakers" => m.num_speakers = p(key, value)?,
            "d_model" => m.d_model = p(key, value)?,
            "speaker_dim" => m.speaker_dim = p(key, value)?,
            "latent_dim" => m.latent_dim = p(key, value)?,
            "latent_proj_dim" => m.latent_proj_dim = p(key, value)?,
            "enc_conv_blocks" => m.enc_conv_blocks = p(key, value)?,
            "enc_conv_width" => m.enc_conv_width = p(key, value)?,
            "enc_blocks" => m.enc_blocks = p(key, value)?,
            "enc_heads" => m.enc_heads = p(key, value)?,
            "vae_dim" => m.vae_dim = p(key, value)?,
            "vae_heads" => m.vae_heads = p(key, value)?,
            "vae_width" => m.vae_width = p(key, value)?,
            "global_plain_blocks" => m.global_plain_blocks = p(key, value)?,
            "global_strided_blocks" => m.global_strided_blocks = p(key, value)?,
            "fine_blocks" => m.fine_blocks = p(key, value)?,
            "fine_pos_dim" => m.fine_pos_dim = p(key, value)?,
            "prior_hidden" => m.prior_hidden = p(key, value)?,
            "dur_blocks" => m.dur_blocks = p(key, value)?,
            "dur_width" => m.dur_width = p(key, value)?,
            "dur_heads" => m.dur_heads = p(key, value)?,
            "decoder" => m.decoder = value.parse().map_err(|e| format!("decoder: {e}"))?,
            "dec_blocks" => m.dec_blocks = p(key, value)?,
            "dec_heads" => m.dec_heads = p(key, value)?,
            "dec_width" => m.dec_width = p(key, value)?,
            "mel_bins" => m.mel_bins = p(key, value)?,
            "dropout" => m.dropout = p(key, value)?,
            "frame_rate" => m.frame_rate = p(key, value)?,
            "seed" => t.seed = p(key, value)?,
            "steps" => t.steps = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "base_lr" => t.base_lr = p(key, value)?,
            "momentum" => t.momentum = p(key, value)?,
            "warmup_steps" => t.warmup_steps = p(key, value)?,
            "decay_start" => t.decay_start = p(key, value)?,
            "decay_end" => t.decay_end = p(key, value)?,
            "lr_floor" => t.lr_floor = p(key, value)?,
            "clip_norm" => t.clip_norm = p(key, value)?,
            "kl_start" => t.kl_start = p(key, value)?,
            "kl_end" => t.kl_end = p(key, value)?,
            "kl_final" => t.kl_final = p(key, value)?,
            "global_beta" => t.global_beta = p(key, value)?,
            "lambda_dur" => t.lambda_dur = p(key, value)?,
            "iterative_loss" => t.iterative_loss = flag(key, value)?,
            "precision" => {
                t.precision = match value {
                    "high" => Precision::High,
                    "standard" => Precision::Standard,
                    _ => return Err(format!("precision: expected high or standard, got '{value}'")),
                }
            }
            "log_every" => t.log_every = p(key, value)?,
            "checkpoint_every" => t.checkpoint_every = p(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let precision = match t.precision {
            Precision::High => "high",
            Precision::Standard => "standard",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("variant", m.variant.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("num_speakers", m.num_speakers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("speaker_dim", m.speaker_dim.to_string()),
            ("latent_dim", m.latent_dim.to_string()),
            ("latent_proj_dim", m.latent_proj_dim.to_string()),
            ("enc_conv_blocks", m.enc_conv_blocks.to_string()),
            ("enc_conv_width", m.enc_conv_width.to_string()),
            ("enc_blocks", m.enc_blocks.to_string()),
            ("enc_heads", m.enc_heads.to_string()),
            ("vae_dim", m.vae_dim.to_string()),
            ("vae_heads", m.vae_heads.to_string()),
            ("vae_width", m.vae_width.to_string()),
            ("global_plain_blocks", m.global_plain_blocks.to_string()),
            ("global_strided_blocks", m.global_strided_blocks.to_string()),
            ("fine_blocks", m.fine_blocks.to_string()),
            ("fine_pos_dim", m.fine_pos_dim.to_string()),
            ("prior_hidden", m.prior_hidden.to_string()),
            ("dur_blocks", m.dur_blocks.to_string()),
            ("dur_width", m.dur_width.to_string()),
            ("dur_heads", m.dur_heads.to_string()),
            ("decoder", m.decoder.to_string()),
            ("dec_blocks", m.dec_blocks.to_string()),
            ("dec_heads", m.dec_heads.to_string()),
            ("dec_width", m.dec_width.to_string()),
            ("mel_bins", m.mel_bins.to_string()),
            ("dropout", format!("{:?}", m.dropout)),
            ("frame_rate", format!("{:?}", m.frame_rate)),
            ("seed", t.seed.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("base_lr", format!("{:?}", t.base_lr)),
            ("momentum", format!("{:?}", t.momentum)),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("decay_start", t.decay_start.to_string()),
            ("decay_end", t.decay_end.to_string()),
            ("lr_floor", format!("{:?}", t.lr_floor)),
            ("clip_norm", format!("{:?}", t.clip_norm)),
            ("kl_start", t.kl_start.to_string()),
            ("kl_end", t.kl_end.to_string()),
            ("kl_final", format!("{:?}", t.kl_final)),
            ("global_beta", format!("{:?}", t.global_beta)),
            ("lambda_dur", format!("{:?}", t.lambda_dur)),
            ("iterative_loss", if t.iterative_loss { "on" } else { "off" }.to_string()),
            ("precision", precision.to_string()),
            ("log_every", t.log_every.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = Variant::Fine;
        cfg.train.base_lr = 0.0375;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_are_collected() {
        let err = RunConfig::parse("d_model = x\nbogus = 1\nwarmup_steps = 500\nno equals sign\n").unwrap_err();
        let Error::Config(list) = err else { panic!("expected config error") };
        assert!(list.iter().any(|e| e.contains("d_model")));
        assert!(list.iter().any(|e| e.contains("bogus")));
        assert!(list.iter().any(|e| e.contains("warmup_steps")));
        assert!(list.iter().any(|e| e.contains("line 4")));
    }

    #[test]
    fn fine_requires_kl_keys() {
        let err = RunConfig::parse("variant = fine\nkl_start = 10\n").unwrap_err();
        let Error::Config(list) = err else { panic!("expected config error") };
        assert_eq!(list.len(), 2);
        assert!(list.iter().any(|e| e.contains("kl_end")));
        assert!(list.iter().any(|e| e.contains("kl_final")));
        assert!(RunConfig::parse("variant = fine\nkl_start = 10\nkl_end = 20\nkl_final = 1.0\n").is_ok());
    }

    #[test]
    fn overrides_replace_file_values() {
        let set = |k: &str, v: &str| (k.to_string(), v.to_string());
        let cfg = RunConfig::parse_with("steps = 5\nseed = 3\n", &[set("steps", "9")]).unwrap();
        assert_eq!((cfg.train.steps, cfg.train.seed), (9, 3));
        assert!(RunConfig::parse_with("", &[set("variant", "fine")]).is_err());
        assert!(RunConfig::parse_with("", &[set("bogus", "1")]).is_err());
    }
}
