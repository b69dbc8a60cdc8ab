//! Duration model: a non-zero gate and a duration in seconds per token.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Init, LConvBlock, Linear, SeqMask};
use crate::tensor::{Ctx, Var};

/// Tokens whose non-zero probability falls below this emit no frames.
pub const NONZERO_THRESHOLD: f64 = 0.99;

/// Duration the seconds head predicts for a zero input at init. Starting
/// near real phone lengths keeps the first updates from driving the
/// softplus into its flat region.
pub const INITIAL_SECONDS: f64 = 0.05;

pub struct DurationPrediction {
    /// [B, N] gate logits; p_z = sigmoid(logits).
    pub logits: Var,
    /// [B, N] non-zero probability.
    pub p_z: Var,
    /// [B, N] seconds, > 0.
    pub seconds: Var,
    /// [B, N, d] last block activation.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct DurationPredictor {
    pub blocks: Vec<LConvBlock>,
    pub gate: Linear,
    pub seconds: Linear,
}

impl DurationPredictor {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.cond_dim();
        let blocks = (0..cfg.dur_blocks)
            .map(|i| LConvBlock::new(&mut init.sub(&format!("block{i}")), d, cfg.dur_heads, cfg.dur_width, cfg.dropout))
            .collect::<Result<_>>()?;
        Ok(DurationPredictor {
            blocks,
            gate: Linear::new(&mut init.sub("gate"), d, 1, true)?,
            seconds: {
                let mut init = init.sub("seconds");
                Linear {
                    w: init.glorot("w", &[d, 1], d, 1)?,
                    b: Some(init.values("b", &[1], vec![INITIAL_SECONDS.exp_m1().ln()])?),
                    d_in: d,
                    d_out: 1,
                }
            },
        })
    }

    pub fn predict(&self, cx: &mut Ctx<'_>, cond: Var, mask: &SeqMask) -> Result<DurationPrediction> {
        let mut h = cond;
        for block in &self.blocks {
            h = block.forward(cx, h, mask)?;
        }
        let (b, n) = (mask.batch(), mask.max_len());
        let logits = self.gate.forward(cx, h)?;
        let logits = cx.g.reshape(logits, &[b, n])?;
        let p_z = cx.g.sigmoid(logits);
        let s = self.seconds.forward(cx, h)?;
        let s = cx.g.softplus(s);
        let seconds = cx.g.reshape(s, &[b, n])?;
        Ok(DurationPrediction {
            logits,
            p_z,
            seconds,
            hidden: h,
        })
    }
}

/// True durations of a padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationTarget {
    /// [B, N], zero at padding.
    pub frames: Vec<usize>,
    pub seconds: Vec<f64>,
    pub nonzero: Vec<bool>,
}

impl DurationTarget {
    pub fn new(frames: &[Vec<usize>], mask: &SeqMask, frame_rate: f64) -> Result<Self> {
        let n = mask.max_len();
        if frames.len() != mask.batch() {
            return Err(Error::invalid(format!("{} duration rows for batch of {}", frames.len(), mask.batch())));
        }
        let mut flat = vec![0; frames.len() * n];
        for (b, f) in frames.iter().enumerate() {
            if f.len() != mask.lens()[b] {
                return Err(Error::invalid(format!(
                    "utterance {b}: {} durations for {} tokens",
                    f.len(),
                    mask.lens()[b]
                )));
            }
            flat[b * n..b * n + f.len()].copy_from_slice(f);
        }
        Ok(DurationTarget {
            seconds: flat.iter().map(|&f| f as f64 / frame_rate).collect(),
            nonzero: flat.iter().map(|&f| f > 0).collect(),
            frames: flat,
        })
    }
}

/// Summed over valid tokens: binary cross-entropy of the gate and the L1
/// error in seconds.
pub struct DurationLoss {
    pub ce: Var,
    pub l1: Var,
}

pub fn duration_loss(
    cx: &mut Ctx<'_>,
    pred: &DurationPrediction,
    target: &DurationTarget,
    mask: &SeqMask,
) -> Result<DurationLoss> {
    let (b, n) = (mask.batch(), mask.max_len());
    let m = cx.g.constant(&[b, n], mask.values())?;
    // -[y log p + (1-y) log(1-p)] = softplus(z) - y z
    let y = cx.g.constant(&[b, n], target.nonzero.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
    let sp = cx.g.softplus(pred.logits);
    let yz = cx.g.mul(y, pred.logits)?;
    let ce = cx.g.sub(sp, yz)?;
    let ce = cx.g.mul(ce, m)?;
    let ce = cx.g.sum(ce);
    let s = cx.g.constant(&[b, n], target.seconds.clone())?;
    let diff = cx.g.sub(pred.seconds, s)?;
    let l1 = cx.g.abs(diff);
    let l1 = cx.g.mul(l1, m)?;
    let l1 = cx.g.sum(l1);
    Ok(DurationLoss { ce, l1 })
}

/// Gates and rounds one utterance's predicted durations to frames. Gated
/// seconds become zero; frames come from rounding the running total, so
/// the sum equals round(rate * total seconds).
pub fn finalize_one(p_z: &[f64], seconds: &[f64], frame_rate: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(seconds.len());
    let mut total = 0.0;
    let mut prev = 0i64;
    for (&p, &s) in p_z.iter().zip(seconds) {
        if p >= NONZERO_THRESHOLD {
            total += s.max(0.0);
        }
        let cur = (total * frame_rate).round() as i64;
        out.push((cur - prev) as usize);
        prev = cur;
    }
    out
}

/// Frames per valid token for each utterance of a batch. An utterance
/// whose tokens are all gated off is rejected.
pub fn finalize_durations(p_z: &[f64], seconds: &[f64], mask: &SeqMask, frame_rate: f64) -> Result<Vec<Vec<usize>>> {
    let n = mask.max_len();
    let mut out = Vec::with_capacity(mask.batch());
    for (b, &len) in mask.lens().iter().enumerate() {
        let row = finalize_one(&p_z[b * n..b * n + len], &seconds[b * n..b * n + len], frame_rate);
        if row.iter().all(|&f| f == 0) {
            return Err(Error::DegenerateDurations(b));
        }
        out.push(row);
    }
    Ok(out)
}
