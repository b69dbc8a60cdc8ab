//! Spectrogram decoder with an independent mel projection after every
//! block, and the per-block L1 losses.

use crate::config::{DecoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Init, LConvBlock, Linear, SeqMask, TransformerBlock};
use crate::tensor::{Ctx, Var};

#[derive(Clone, Debug)]
pub enum DecoderBlock {
    LConv(LConvBlock),
    Transformer(TransformerBlock),
}

impl DecoderBlock {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
        match self {
            DecoderBlock::LConv(b) => b.forward(cx, x, mask),
            DecoderBlock::Transformer(b) => b.forward(cx, x, mask),
        }
    }
}

pub struct DecoderOutput {
    /// One [B, T, bins] prediction per block; the last is the output.
    pub predictions: Vec<Var>,
}

impl DecoderOutput {
    pub fn last(&self) -> Var {
        *self.predictions.last().expect("decoder has at least one block")
    }
}

#[derive(Clone, Debug)]
pub struct SpecDecoder {
    pub blocks: Vec<DecoderBlock>,
    pub projections: Vec<Linear>,
    pub kind: DecoderKind,
    pub d: usize,
    pub mel_bins: usize,
}

impl SpecDecoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Self::with_width(init, cfg, cfg.cond_dim())
    }

    /// Decoder over `d`-wide frame features.
    pub fn with_width(init: &mut Init<'_>, cfg: &ModelConfig, d: usize) -> Result<Self> {
        if cfg.dec_blocks == 0 {
            return Err(Error::invalid("decoder needs at least one block"));
        }
        let mut blocks = Vec::with_capacity(cfg.dec_blocks);
        let mut projections = Vec::with_capacity(cfg.dec_blocks);
        for i in 0..cfg.dec_blocks {
            let mut s = init.sub(&format!("block{i}"));
            blocks.push(match cfg.decoder {
                DecoderKind::LConv => DecoderBlock::LConv(LConvBlock::new(&mut s, d, cfg.dec_heads, cfg.dec_width, cfg.dropout)?),
                DecoderKind::Transformer => {
                    DecoderBlock::Transformer(TransformerBlock::new(&mut s, d, cfg.dec_heads, cfg.dropout)?)
                }
            });
            projections.push(Linear::new(&mut init.sub(&format!("proj{i}")), d, cfg.mel_bins, true)?);
        }
        Ok(SpecDecoder {
            blocks,
            projections,
            kind: cfg.decoder,
            d,
            mel_bins: cfg.mel_bins,
        })
    }

    pub fn decode(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<DecoderOutput> {
        let mut h = x;
        let mut predictions = Vec::with_capacity(self.blocks.len());
        for (block, proj) in self.blocks.iter().zip(&self.projections) {
            h = block.forward(cx, h, mask)?;
            let y = proj.forward(cx, h)?;
            predictions.push(mask.apply(cx, y)?);
        }
        Ok(DecoderOutput { predictions })
    }
}

/// Unnormalized L1 between one prediction and the target over valid frames.
pub fn spec_l1(cx: &mut Ctx<'_>, pred: Var, target: Var, mask: &SeqMask) -> Result<Var> {
    let diff = cx.g.sub(pred, target)?;
    let a = cx.g.abs(diff);
    let a = mask.apply(cx, a)?;
    Ok(cx.g.sum(a))
}

fn normalizer(cx: &Ctx<'_>, target: Var, mask: &SeqMask) -> Result<f64> {
    let bins = *cx.g.shape(target).last().unwrap_or(&0);
    let denom = (bins * mask.total()) as f64;
    if denom == 0.0 {
        return Err(Error::invalid("spectrogram loss over zero valid frames"));
    }
    Ok(1.0 / denom)
}

/// Sum over blocks of the L1 loss, divided by bins x valid frames.
pub fn iterative_spec_loss(cx: &mut Ctx<'_>, out: &DecoderOutput, target: Var, mask: &SeqMask) -> Result<Var> {
    let k = normalizer(cx, target, mask)?;
    let mut total: Option<Var> = None;
    for &p in &out.predictions {
        let l = spec_l1(cx, p, target, mask)?;
        total = Some(match total {
            Some(t) => cx.g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("decoder output is empty"))?;
    Ok(cx.g.scale(total, k))
}

/// The final block's L1 loss, divided by bins x valid frames.
pub fn single_spec_loss(cx: &mut Ctx<'_>, out: &DecoderOutput, target: Var, mask: &SeqMask) -> Result<Var> {
    let k = normalizer(cx, target, mask)?;
    let l = spec_l1(cx, out.last(), target, mask)?;
    Ok(cx.g.scale(l, k))
}
