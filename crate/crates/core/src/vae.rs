//! Residual encoders: the utterance-level VAE with per-speaker prior means
//! and the phoneme-level VAE with its autoregressive LSTM prior.

use crate::config::ModelConfig;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Init, LConvBlock, LayerNorm, Linear, SeqMask};
use crate::tensor::{Ctx, ParamId, Var};
use crate::upsample::PositionalFeatures;

/// Diagonal Gaussian; leading shape [B] or [B, N], last axis the latent.
#[derive(Clone, Copy, Debug)]
pub struct LatentPosterior {
    pub mean: Var,
    pub log_var: Var,
}

/// mean + exp(log_var / 2) * eps.
pub fn reparameterize(cx: &mut Ctx<'_>, post: &LatentPosterior, eps: Var) -> Result<Var> {
    let half = cx.g.scale(post.log_var, 0.5);
    let std = cx.g.exp(half);
    let noise = cx.g.mul(std, eps)?;
    cx.g.add(post.mean, noise)
}

/// Reparameterized draw in training mode, the mean otherwise.
pub fn sample_latent(cx: &mut Ctx<'_>, post: &LatentPosterior) -> Result<Var> {
    if !cx.is_training() {
        return Ok(post.mean);
    }
    let shape = cx.g.shape(post.mean).to_vec();
    let eps = cx.normal(&shape)?;
    reparameterize(cx, post, eps)
}

/// KL(q || N(prior_mean, I)) summed over the last axis. `prior_mean` must
/// broadcast against the posterior; `None` means a zero mean.
pub fn kl_divergence(cx: &mut Ctx<'_>, post: &LatentPosterior, prior_mean: Option<Var>) -> Result<Var> {
    let var = cx.g.exp(post.log_var);
    let diff = match prior_mean {
        Some(m) => cx.g.sub(post.mean, m)?,
        None => post.mean,
    };
    let sq = cx.g.square(diff);
    let t = cx.g.add(var, sq)?;
    let t = cx.g.sub(t, post.log_var)?;
    let t = cx.g.add_scalar(t, -1.0);
    let rank = cx.g.shape(t).len();
    let s = cx.g.sum_axis(t, rank - 1)?;
    Ok(cx.g.scale(s, 0.5))
}

/// Mean over valid frames of [B, T, C], giving [B, C].
pub fn masked_mean_pool(cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
    if let Some(b) = mask.lens().iter().position(|&l| l == 0) {
        return Err(Error::invalid(format!("cannot pool empty sequence at batch index {b}")));
    }
    let x = mask.apply(cx, x)?;
    let s = cx.g.sum_axis(x, 1)?;
    let inv: Vec<f64> = mask.lens().iter().map(|&l| 1.0 / l as f64).collect();
    let inv = cx.g.constant(&[mask.batch(), 1], inv)?;
    cx.g.mul(s, inv)
}

#[derive(Clone, Debug)]
pub struct GlobalVae {
    pub input: Linear,
    pub plain: Vec<LConvBlock>,
    pub strided: Vec<(Conv1d, LConvBlock)>,
    pub out_norm: LayerNorm,
    pub mean: Linear,
    pub log_var: Linear,
    /// Per-speaker prior means [speakers, latent].
    pub prior: ParamId,
    pub project: Linear,
    pub mel_bins: usize,
}

impl GlobalVae {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let dv = cfg.vae_dim;
        let plain = (0..cfg.global_plain_blocks)
            .map(|i| LConvBlock::new(&mut init.sub(&format!("plain{i}")), dv, cfg.vae_heads, cfg.vae_width, cfg.dropout))
            .collect::<Result<_>>()?;
        let strided = (0..cfg.global_strided_blocks)
            .map(|i| {
                let mut s = init.sub(&format!("strided{i}"));
                Ok((
                    Conv1d::new(&mut s.sub("down"), dv, dv, 3, 2)?,
                    LConvBlock::new(&mut s.sub("block"), dv, cfg.vae_heads, cfg.vae_width, cfg.dropout)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(GlobalVae {
            input: Linear::new(&mut init.sub("input"), cfg.mel_bins, dv, true)?,
            plain,
            strided,
            out_norm: LayerNorm::new(&mut init.sub("out_norm"), dv)?,
            mean: Linear::new(&mut init.sub("mean"), dv, cfg.latent_dim, true)?,
            log_var: Linear::new(&mut init.sub("log_var"), dv, cfg.latent_dim, true)?,
            prior: init.zeros("prior", &[cfg.num_speakers, cfg.latent_dim])?,
            project: Linear::new(&mut init.sub("project"), cfg.latent_dim, cfg.latent_proj_dim, true)?,
            mel_bins: cfg.mel_bins,
        })
    }

    /// Frames left after the strided stack.
    pub fn pooled_len(&self, frames: usize) -> usize {
        self.strided.iter().fold(frames, |t, (c, _)| c.out_len(t))
    }

    /// Posterior [B, latent] from target frames [B, T, bins].
    pub fn posterior(&self, cx: &mut Ctx<'_>, mel: Var, mask: &SeqMask) -> Result<LatentPosterior> {
        if let Some(b) = mask.lens().iter().position(|&l| l == 0) {
            return Err(Error::invalid(format!("empty utterance at batch index {b}")));
        }
        let h = self.input.forward(cx, mel)?;
        let mut h = mask.apply(cx, h)?;
        for block in &self.plain {
            h = block.forward(cx, h, mask)?;
        }
        let mut m = mask.clone();
        for (down, block) in &self.strided {
            let (y, m2) = down.forward(cx, h, &m)?;
            h = block.forward(cx, y, &m2)?;
            m = m2;
        }
        let h = self.out_norm.forward(cx, h)?;
        let pooled = masked_mean_pool(cx, h, &m)?;
        Ok(LatentPosterior {
            mean: self.mean.forward(cx, pooled)?,
            log_var: self.log_var.forward(cx, pooled)?,
        })
    }

    /// Prior means [B, latent] of the given speakers.
    pub fn prior_mean(&self, cx: &mut Ctx<'_>, speakers: &[usize]) -> Result<Var> {
        let table = cx.param(self.prior);
        let count = cx.g.shape(table)[0];
        if let Some(&s) = speakers.iter().find(|&&s| s >= count) {
            return Err(Error::SpeakerOutOfRange { id: s, count });
        }
        let idx: Vec<Option<usize>> = speakers.iter().map(|&s| Some(s)).collect();
        cx.g.gather_rows(table, &idx)
    }

    /// [B, latent] -> [B, latent_proj].
    pub fn project(&self, cx: &mut Ctx<'_>, latent: Var) -> Result<Var> {
        self.project.forward(cx, latent)
    }
}

pub struct FinePosteriorOutput {
    pub posterior: LatentPosterior,
    /// [B, N, T] attention of phonemes over frames.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct FineVae {
    pub input: Linear,
    pub blocks: Vec<LConvBlock>,
    pub out_norm: LayerNorm,
    pub query_norm: LayerNorm,
    pub query: Linear,
    pub mean: Linear,
    pub log_var: Linear,
    pub project: Linear,
    pub pos_dim: usize,
    pub vae_dim: usize,
}

impl FineVae {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let dv = cfg.vae_dim;
        let d_in = cfg.mel_bins + 2 * cfg.fine_pos_dim + 1 + cfg.speaker_dim;
        let blocks = (0..cfg.fine_blocks)
            .map(|i| LConvBlock::new(&mut init.sub(&format!("block{i}")), dv, cfg.vae_heads, cfg.vae_width, cfg.dropout))
            .collect::<Result<_>>()?;
        Ok(FineVae {
            input: Linear::new(&mut init.sub("input"), d_in, dv, true)?,
            blocks,
            out_norm: LayerNorm::new(&mut init.sub("out_norm"), dv)?,
            query_norm: LayerNorm::new(&mut init.sub("query_norm"), cfg.d_model)?,
            query: Linear::new(&mut init.sub("query"), cfg.d_model, dv, false)?,
            mean: Linear::new(&mut init.sub("mean"), dv, cfg.latent_dim, true)?,
            log_var: Linear::new(&mut init.sub("log_var"), dv, cfg.latent_dim, true)?,
            project: Linear::new(
                &mut init.sub("project"),
                cfg.latent_dim + cfg.speaker_dim + cfg.d_model,
                cfg.latent_proj_dim,
                true,
            )?,
            pos_dim: cfg.fine_pos_dim,
            vae_dim: dv,
        })
    }

    /// Per-phoneme posterior [B, N, latent] from target frames, positional
    /// features computed from the true durations, and speaker rows [B, S].
    pub fn posterior(
        &self,
        cx: &mut Ctx<'_>,
        mel: Var,
        frame_mask: &SeqMask,
        pos: &PositionalFeatures,
        speaker: Var,
        enc: &EncoderOutput,
    ) -> Result<FinePosteriorOutput> {
        let mshape = cx.g.shape(mel).to_vec();
        let pshape = cx.g.shape(pos.within).to_vec();
        if mshape[..2] != pshape[..2] || mshape[1] != frame_mask.max_len() {
            return Err(Error::shape("fine_posterior frames", &mshape, &pshape));
        }
        let (b, t) = (mshape[0], mshape[1]);
        let spk = crate::encoder::tile_tokens(cx, speaker, t)?;
        let x = cx.g.concat(&[mel, pos.within, pos.duration, pos.progress, spk], 2)?;
        let h = self.input.forward(cx, x)?;
        let mut h = frame_mask.apply(cx, h)?;
        for block in &self.blocks {
            h = block.forward(cx, h, frame_mask)?;
        }
        let h = self.out_norm.forward(cx, h)?;
        let h = frame_mask.apply(cx, h)?;
        let q = self.query_norm.forward(cx, enc.hidden)?;
        let q = self.query.forward(cx, q)?;
        let kt = cx.g.transpose(h)?;
        let scores = cx.g.matmul(q, kt)?;
        let scores = cx.g.scale(scores, 1.0 / (self.vae_dim as f64).sqrt());
        let bias: Vec<f64> = frame_mask.values().into_iter().map(|m| if m > 0.0 { 0.0 } else { -1e9 }).collect();
        let bias = cx.g.constant(&[b, 1, t], bias)?;
        let scores = cx.g.add(scores, bias)?;
        let weights = cx.g.softmax(scores, 2)?;
        let context = cx.g.matmul(weights, h)?;
        let mean = self.mean.forward(cx, context)?;
        let log_var = self.log_var.forward(cx, context)?;
        Ok(FinePosteriorOutput {
            posterior: LatentPosterior {
                mean: enc.mask.apply(cx, mean)?,
                log_var: enc.mask.apply(cx, log_var)?,
            },
            weights,
        })
    }

    /// concat(latent [B,N,L], speaker [B,S] tiled, encoder [B,N,d]) -> [B,N,latent_proj].
    pub fn project(&self, cx: &mut Ctx<'_>, latent: Var, speaker: Var, enc: &EncoderOutput) -> Result<Var> {
        let n = enc.mask.max_len();
        let spk = crate::encoder::tile_tokens(cx, speaker, n)?;
        let x = cx.g.concat(&[latent, spk, enc.hidden], 2)?;
        let y = self.project.forward(cx, x)?;
        enc.mask.apply(cx, y)
    }
}

/// Single-layer LSTM over phonemes predicting each latent from the
/// encoder state, the speaker and the previous latent.
#[derive(Clone, Debug)]
pub struct PriorLstm {
    pub input: Linear,
    pub recurrent: Linear,
    pub out: Linear,
    pub hidden: usize,
    pub latent: usize,
}

impl PriorLstm {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.prior_hidden;
        let d_in = cfg.speaker_dim + cfg.d_model + cfg.latent_dim;
        Ok(PriorLstm {
            input: Linear::new(&mut init.sub("input"), d_in, 4 * h, true)?,
            recurrent: Linear::new(&mut init.sub("recurrent"), h, 4 * h, false)?,
            out: Linear::new(&mut init.sub("out"), h, cfg.latent_dim, true)?,
            hidden: h,
            latent: cfg.latent_dim,
        })
    }

    /// Predicted latents [B, N, latent]. With `teacher` ([B, N, latent]) the
    /// previous true latent feeds each step; without it the cell consumes its
    /// own predictions. Training mode requires a teacher. Gradients never
    /// flow into `teacher`, `enc` or `speaker`.
    pub fn predict(
        &self,
        cx: &mut Ctx<'_>,
        enc: &EncoderOutput,
        speaker: Var,
        teacher: Option<Var>,
    ) -> Result<Var> {
        if cx.is_training() && teacher.is_none() {
            return Err(Error::invalid("prior LSTM in training mode needs teacher latents"));
        }
        let (b, n) = (enc.mask.batch(), enc.mask.max_len());
        let hidden = cx.g.detach(enc.hidden);
        let speaker = cx.g.detach(speaker);
        let teacher = teacher.map(|t| cx.g.detach(t));
        let h_dim = self.hidden;
        let mut h = cx.g.zeros(&[b, h_dim]);
        let mut c = cx.g.zeros(&[b, h_dim]);
        let mut prev = cx.g.zeros(&[b, self.latent]);
        let mut outs = Vec::with_capacity(n);
        for step in 0..n {
            let e = cx.g.narrow(hidden, 1, step, 1)?;
            let d = cx.g.shape(e)[2];
            let e = cx.g.reshape(e, &[b, d])?;
            let x = cx.g.concat(&[e, speaker, prev], 1)?;
            let gi = self.input.forward(cx, x)?;
            let gh = self.recurrent.forward(cx, h)?;
            let gates = cx.g.add(gi, gh)?;
            let i = cx.g.narrow(gates, 1, 0, h_dim)?;
            let f = cx.g.narrow(gates, 1, h_dim, h_dim)?;
            let g = cx.g.narrow(gates, 1, 2 * h_dim, h_dim)?;
            let o = cx.g.narrow(gates, 1, 3 * h_dim, h_dim)?;
            let (i, f, o) = (cx.g.sigmoid(i), cx.g.sigmoid(f), cx.g.sigmoid(o));
            let g = cx.g.tanh(g);
            let fc = cx.g.mul(f, c)?;
            let ig = cx.g.mul(i, g)?;
            c = cx.g.add(fc, ig)?;
            let tc = cx.g.tanh(c);
            h = cx.g.mul(o, tc)?;
            let y = self.out.forward(cx, h)?;
            prev = match teacher {
                Some(t) => {
                    let t = cx.g.narrow(t, 1, step, 1)?;
                    cx.g.reshape(t, &[b, self.latent])?
                }
                None => y,
            };
            outs.push(cx.g.reshape(y, &[b, 1, self.latent])?);
        }
        if outs.is_empty() {
            return Ok(cx.g.zeros(&[b, 0, self.latent]));
        }
        let y = cx.g.concat(&outs, 1)?;
        enc.mask.apply(cx, y)
    }
}

/// Sum over valid tokens of the per-token mean squared error between
/// predicted latents and the (detached) posterior means.
pub fn prior_loss(cx: &mut Ctx<'_>, predicted: Var, posterior_mean: Var, mask: &SeqMask) -> Result<Var> {
    let target = cx.g.detach(posterior_mean);
    let diff = cx.g.sub(predicted, target)?;
    let sq = cx.g.square(diff);
    let sq = mask.apply(cx, sq)?;
    let dims = *cx.g.shape(sq).last().unwrap_or(&1);
    let s = cx.g.sum(sq);
    Ok(cx.g.scale(s, 1.0 / dims as f64))
}
