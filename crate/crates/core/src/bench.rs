//! Decoder-only cost measurements: the parallel LConv and Transformer
//! decoders, and a frame-by-frame autoregressive stand-in.
//!
//! The autoregressive decoder is a causal LConv stack with the same block
//! shapes. At each frame it feeds back the previous prediction through a
//! linear layer and re-runs the stack over the frames inside its receptive
//! field, which is what a decoder without cached convolution state pays.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderKind, ModelConfig};
use crate::decoder::SpecDecoder;
use crate::error::{Error, Result};
use crate::nn::{Init, LConvBlock, Linear, SeqMask};
use crate::tensor::{mac_count, reset_mac_count, Ctx, ParamStore, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchDecoder {
    LConv,
    Transformer,
    ArSim,
}

impl std::str::FromStr for BenchDecoder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lconv" => Ok(BenchDecoder::LConv),
            "transformer" => Ok(BenchDecoder::Transformer),
            "ar-sim" => Ok(BenchDecoder::ArSim),
            _ => Err(format!("unknown decoder '{s}' (expected lconv, transformer or ar-sim)")),
        }
    }
}

impl std::fmt::Display for BenchDecoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchDecoder::LConv => "lconv",
            BenchDecoder::Transformer => "transformer",
            BenchDecoder::ArSim => "ar-sim",
        })
    }
}

/// Decoder shape shared by every benchmarked variant.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub width: usize,
    pub mel_bins: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d: 32,
            blocks: 2,
            heads: 8,
            width: 17,
            mel_bins: 128,
            seed: 3,
        }
    }
}

impl BenchConfig {
    fn model_config(&self, kind: DecoderKind) -> ModelConfig {
        ModelConfig {
            decoder: kind,
            dec_blocks: self.blocks,
            dec_heads: self.heads,
            dec_width: self.width,
            mel_bins: self.mel_bins,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    /// Frames visible to the last layer of a causal stack.
    pub fn receptive_field(&self) -> usize {
        1 + self.blocks * (self.width - 1)
    }
}

/// A frame-at-a-time causal LConv decoder.
#[derive(Clone, Debug)]
pub struct ArSimDecoder {
    pub feedback: Linear,
    pub blocks: Vec<LConvBlock>,
    pub projection: Linear,
    pub window: usize,
    pub d: usize,
    pub mel_bins: usize,
}

impl ArSimDecoder {
    pub fn new(init: &mut Init<'_>, cfg: &BenchConfig) -> Result<Self> {
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut b = LConvBlock::new(&mut init.sub(&format!("block{i}")), cfg.d, cfg.heads, cfg.width, 0.0)?;
                b.causal = true;
                Ok(b)
            })
            .collect::<Result<_>>()?;
        Ok(ArSimDecoder {
            feedback: Linear::new(&mut init.sub("feedback"), cfg.mel_bins, cfg.d, true)?,
            blocks,
            projection: Linear::new(&mut init.sub("projection"), cfg.d, cfg.mel_bins, true)?,
            window: cfg.receptive_field(),
            d: cfg.d,
            mel_bins: cfg.mel_bins,
        })
    }

    /// Generates one frame per conditioning row of `cond` ([T, d] values).
    pub fn generate(&self, store: &ParamStore, cond: &[f64], frames: usize) -> Result<Vec<f64>> {
        let (d, bins) = (self.d, self.mel_bins);
        if cond.len() != frames * d {
            return Err(Error::invalid("conditioning does not match frames x width"));
        }
        let mut out = vec![0.0; frames * bins];
        for t in 0..frames {
            let w = self.window.min(t + 1);
            let s = t + 1 - w;
            // Frame j of the window sees the prediction for frame j - 1.
            let mut prev = vec![0.0; w * bins];
            for j in 0..w {
                if s + j > 0 {
                    let src = (s + j - 1) * bins;
                    prev[j * bins..(j + 1) * bins].copy_from_slice(&out[src..src + bins]);
                }
            }
            let mut cx = Ctx::new(store, Precision::Standard, 0);
            let c = cx.g.constant(&[1, w, d], cond[s * d..(t + 1) * d].to_vec())?;
            let p = cx.g.constant(&[1, w, bins], prev)?;
            let fb = self.feedback.forward(&mut cx, p)?;
            let mut h = cx.g.add(c, fb)?;
            let mask = SeqMask::full(1, w);
            for block in &self.blocks {
                h = block.forward(&mut cx, h, &mask)?;
            }
            let last = cx.g.narrow(h, 1, w - 1, 1)?;
            let y = self.projection.forward(&mut cx, last)?;
            out[t * bins..(t + 1) * bins].copy_from_slice(cx.g.value(y));
        }
        Ok(out)
    }
}

/// A built decoder ready to run at any length.
pub enum BenchModel {
    Parallel(SpecDecoder),
    ArSim(ArSimDecoder),
}

pub struct BenchRunner {
    pub kind: BenchDecoder,
    pub cfg: BenchConfig,
    pub store: ParamStore,
    pub model: BenchModel,
}

impl BenchRunner {
    pub fn new(kind: BenchDecoder, cfg: &BenchConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(&mut store, &mut rng);
        let model = match kind {
            BenchDecoder::LConv => {
                BenchModel::Parallel(SpecDecoder::with_width(&mut init, &cfg.model_config(DecoderKind::LConv), cfg.d)?)
            }
            BenchDecoder::Transformer => BenchModel::Parallel(SpecDecoder::with_width(
                &mut init,
                &cfg.model_config(DecoderKind::Transformer),
                cfg.d,
            )?),
            BenchDecoder::ArSim => BenchModel::ArSim(ArSimDecoder::new(&mut init, cfg)?),
        };
        Ok(BenchRunner {
            kind,
            cfg: cfg.clone(),
            store,
            model,
        })
    }

    fn conditioning(&self, frames: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ frames as u64);
        (0..frames * self.cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// One decoder-only forward pass; returns the multiply-adds it counted.
    pub fn run_once(&self, frames: usize) -> Result<u64> {
        let cond = self.conditioning(frames);
        reset_mac_count();
        match &self.model {
            BenchModel::Parallel(dec) => {
                let mut cx = Ctx::new(&self.store, Precision::Standard, 0);
                let x = cx.g.constant(&[1, frames, self.cfg.d], cond)?;
                dec.decode(&mut cx, x, &SeqMask::full(1, frames))?;
            }
            BenchModel::ArSim(dec) => {
                dec.generate(&self.store, &cond, frames)?;
            }
        }
        Ok(mac_count())
    }

    /// Mean and standard deviation of wall-clock milliseconds over
    /// `repeats` passes, plus the per-pass multiply-add count.
    pub fn measure(&self, frames: usize, repeats: usize) -> Result<BenchRow> {
        if repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        let mut times = Vec::with_capacity(repeats);
        let mut macs = 0;
        for _ in 0..repeats {
            let start = Instant::now();
            macs = self.run_once(frames)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let std = if repeats > 1 {
            Some((times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt())
        } else {
            None
        };
        Ok(BenchRow {
            decoder: self.kind,
            frames,
            mean_ms: mean,
            std_ms: std,
            macs,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub decoder: BenchDecoder,
    pub frames: usize,
    pub mean_ms: f64,
    /// Sample standard deviation; absent for a single repeat.
    pub std_ms: Option<f64>,
    pub macs: u64,
}

pub const BENCH_HEADER: &str = "decoder,frames,mean_ms,stddev_ms,macs";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        let std = self.std_ms.map(|s| format!("{s:.4}")).unwrap_or_default();
        format!("{},{},{:.4},{},{}", self.decoder, self.frames, self.mean_ms, std, self.macs)
    }
}
