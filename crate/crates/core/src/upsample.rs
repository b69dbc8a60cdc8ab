//! Duration-driven expansion of token features to frames, the three
//! positional features and their per-channel learned blend.

use crate::error::{Error, Result};
use crate::nn::{sinusoid, Init, Linear, SeqMask};
use crate::tensor::{Ctx, ParamId, Var};

/// Per-utterance frame-to-token index, and the resulting frame mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameIndex {
    pub tokens: Vec<Vec<usize>>,
    pub mask: SeqMask,
}

impl FrameIndex {
    /// `frames[b][n]` is the duration of token n in utterance b. Every
    /// utterance must produce at least one frame.
    pub fn new(frames: &[Vec<usize>]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(frames.len());
        for (b, f) in frames.iter().enumerate() {
            let map: Vec<usize> = f.iter().enumerate().flat_map(|(n, &k)| std::iter::repeat_n(n, k)).collect();
            if map.is_empty() {
                return Err(Error::DegenerateDurations(b));
            }
            tokens.push(map);
        }
        let lens: Vec<usize> = tokens.iter().map(Vec::len).collect();
        let t = lens.iter().copied().max().unwrap_or(0);
        Ok(FrameIndex {
            tokens,
            mask: SeqMask::new(lens, t)?,
        })
    }

    /// Same as [`FrameIndex::new`] but from signed durations, rejecting
    /// negative values.
    pub fn from_signed(frames: &[Vec<i64>]) -> Result<Self> {
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let mut row = Vec::with_capacity(f.len());
            for (n, &k) in f.iter().enumerate() {
                if k < 0 {
                    return Err(Error::invalid(format!("negative duration {k} at token {n}")));
                }
                row.push(k as usize);
            }
            out.push(row);
        }
        Self::new(&out)
    }
}

/// Repeats each token of `hidden` [B, N, d] for its duration, giving
/// [B, T, d] with padded frames zero.
pub fn upsample(cx: &mut Ctx<'_>, hidden: Var, index: &FrameIndex) -> Result<Var> {
    let shape = cx.g.shape(hidden).to_vec();
    if shape.len() != 3 || shape[0] != index.tokens.len() {
        return Err(Error::shape("upsample", &shape, &[index.tokens.len(), 0, 0]));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let t = index.mask.max_len();
    let mut rows = Vec::with_capacity(b * t);
    for (bi, map) in index.tokens.iter().enumerate() {
        if let Some(&bad) = map.iter().find(|&&k| k >= n) {
            return Err(Error::invalid(format!("frame index refers to token {bad} of {n}")));
        }
        rows.extend(map.iter().map(|&k| Some(bi * n + k)));
        rows.extend(std::iter::repeat_n(None, t - map.len()));
    }
    let flat = cx.g.reshape(hidden, &[b * n, d])?;
    let out = cx.g.gather_rows(flat, &rows)?;
    cx.g.reshape(out, &[b, t, d])
}

/// Raw positional values, [B, T, d] / [B, T, d] / [B, T] row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalValues {
    pub within: Vec<f64>,
    pub duration: Vec<f64>,
    pub progress: Vec<f64>,
}

/// For frame j of a token lasting f frames: sinusoid(j), sinusoid(f), j/f.
pub fn positional_values(frames: &[Vec<usize>], d: usize, t_max: usize) -> Result<PositionalValues> {
    let b = frames.len();
    let mut within = vec![0.0; b * t_max * d];
    let mut duration = vec![0.0; b * t_max * d];
    let mut progress = vec![0.0; b * t_max];
    for (bi, f) in frames.iter().enumerate() {
        let mut t = 0;
        for &k in f {
            let dur = sinusoid(k as f64, d)?;
            for j in 0..k {
                if t >= t_max {
                    return Err(Error::invalid(format!("utterance {bi} exceeds {t_max} frames")));
                }
                let row = (bi * t_max + t) * d;
                within[row..row + d].copy_from_slice(&sinusoid(j as f64, d)?);
                duration[row..row + d].copy_from_slice(&dur);
                progress[bi * t_max + t] = j as f64 / k as f64;
                t += 1;
            }
        }
    }
    Ok(PositionalValues {
        within,
        duration,
        progress,
    })
}

/// Positional features as graph constants.
#[derive(Clone, Copy, Debug)]
pub struct PositionalFeatures {
    /// [B, T, d]
    pub within: Var,
    /// [B, T, d]
    pub duration: Var,
    /// [B, T, 1]
    pub progress: Var,
}

pub fn positional_features(cx: &mut Ctx<'_>, frames: &[Vec<usize>], d: usize, t_max: usize) -> Result<PositionalFeatures> {
    let v = positional_values(frames, d, t_max)?;
    let b = frames.len();
    Ok(PositionalFeatures {
        within: cx.g.constant(&[b, t_max, d], v.within)?,
        duration: cx.g.constant(&[b, t_max, d], v.duration)?,
        progress: cx.g.constant(&[b, t_max, 1], v.progress)?,
    })
}

/// Learned per-channel blend of the three positional features, added to
/// the upsampled activation.
#[derive(Clone, Debug)]
pub struct Upsampler {
    /// [3, d]; softmax over the first axis gives the per-channel weights.
    pub logits: ParamId,
    /// Lifts the fractional progression to d channels.
    pub progress: Linear,
    pub d: usize,
}

impl Upsampler {
    pub fn new(init: &mut Init<'_>, d: usize) -> Result<Self> {
        Ok(Upsampler {
            logits: init.zeros("logits", &[3, d])?,
            progress: Linear::new(&mut init.sub("progress"), 1, d, true)?,
            d,
        })
    }

    /// [3, d] blend weights.
    pub fn weights(&self, cx: &mut Ctx<'_>) -> Result<Var> {
        let l = cx.param(self.logits);
        cx.g.softmax(l, 0)
    }

    pub fn combine(&self, cx: &mut Ctx<'_>, upsampled: Var, feats: &PositionalFeatures, mask: &SeqMask) -> Result<Var> {
        let w = self.weights(cx)?;
        let lifted = self.progress.forward(cx, feats.progress)?;
        let mut out = upsampled;
        for (s, f) in [feats.within, feats.duration, lifted].into_iter().enumerate() {
            let ws = cx.g.narrow(w, 0, s, 1)?;
            let term = cx.g.mul(ws, f)?;
            out = cx.g.add(out, term)?;
        }
        mask.apply(cx, out)
    }
}
