//! The assembled acoustic model and its forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::decoder::{DecoderOutput, SpecDecoder};
use crate::duration::{finalize_durations, DurationPrediction, DurationPredictor};
use crate::encoder::{TextEncoder, TokenBatch};
use crate::error::{Error, Result};
use crate::nn::{Init, SeqMask};
use crate::tensor::{Ctx, ParamStore, Var};
use crate::upsample::{positional_features, upsample, FrameIndex, Upsampler};
use crate::vae::{kl_divergence, prior_loss, sample_latent, FineVae, GlobalVae, LatentPosterior, PriorLstm};

#[derive(Clone, Debug)]
pub enum ResidualEncoder {
    None,
    Global(GlobalVae),
    Fine { posterior: FineVae, prior: PriorLstm },
}

/// Text and speakers of a batch.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub tokens: TokenBatch,
    pub speakers: Vec<usize>,
}

impl ModelInput {
    pub fn new(tokens: &[Vec<usize>], speakers: &[usize]) -> Result<Self> {
        if tokens.len() != speakers.len() {
            return Err(Error::invalid(format!("{} utterances but {} speakers", tokens.len(), speakers.len())));
        }
        Ok(ModelInput {
            tokens: TokenBatch::from_sequences(tokens)?,
            speakers: speakers.to_vec(),
        })
    }

    pub fn batch(&self) -> usize {
        self.speakers.len()
    }
}

/// True durations and padded target frames.
#[derive(Clone, Debug)]
pub struct Targets {
    pub frames: Vec<Vec<usize>>,
    /// [B, T, bins], zero at padding.
    pub mel: Vec<f64>,
    pub frame_mask: SeqMask,
    pub bins: usize,
}

impl Targets {
    /// `mels[b]` holds `sum(frames[b])` rows of `bins` values.
    pub fn new(frames: &[Vec<usize>], mels: &[&[f32]], bins: usize) -> Result<Self> {
        let index = FrameIndex::new(frames)?;
        let t = index.mask.max_len();
        let mut mel = vec![0.0; frames.len() * t * bins];
        for (b, m) in mels.iter().enumerate() {
            let len = index.mask.lens()[b];
            if m.len() != len * bins {
                return Err(Error::invalid(format!(
                    "utterance {b}: {} mel values for {len} frames of {bins} bins",
                    m.len()
                )));
            }
            for (dst, &src) in mel[b * t * bins..].iter_mut().zip(m.iter()) {
                *dst = src as f64;
            }
        }
        Ok(Targets {
            frames: frames.to_vec(),
            mel,
            frame_mask: index.mask,
            bins,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub input: ModelInput,
    pub targets: Targets,
}

/// Where upsampling durations come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DurationSource {
    Teacher,
    Predicted,
}

/// Where the residual latent comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    /// Posterior over the target frames (sampled in training mode).
    Posterior,
    /// Speaker prior mean, or the LSTM rollout for the fine variant.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub durations: DurationSource,
    pub latent: LatentSource,
}

impl RunOptions {
    pub const TRAIN: RunOptions = RunOptions {
        durations: DurationSource::Teacher,
        latent: LatentSource::Posterior,
    };
    /// True durations with the inference latent.
    pub const TEACHER_EVAL: RunOptions = RunOptions {
        durations: DurationSource::Teacher,
        latent: LatentSource::Prior,
    };
    pub const SYNTH: RunOptions = RunOptions {
        durations: DurationSource::Predicted,
        latent: LatentSource::Prior,
    };
}

pub struct ForwardOutput {
    pub decoder: DecoderOutput,
    pub duration: DurationPrediction,
    /// Durations that drove upsampling.
    pub frames: Vec<Vec<usize>>,
    pub frame_mask: SeqMask,
    pub token_mask: SeqMask,
    pub posterior: Option<LatentPosterior>,
    /// Per-utterance ([B]) or per-token ([B, N]) KL, posterior runs only.
    pub kl: Option<Var>,
    /// Fine variant with posterior: summed prior MSE.
    pub prior_loss: Option<Var>,
    /// Projected latent fed to conditioning.
    pub latent: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: TextEncoder,
    pub residual: ResidualEncoder,
    pub duration: DurationPredictor,
    pub upsampler: Upsampler,
    pub decoder: SpecDecoder,
}

impl Model {
    /// Registers every parameter in `store`, drawing initial values from `seed`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let encoder = TextEncoder::new(&mut init.sub("encoder"), cfg)?;
        let residual = match cfg.variant {
            Variant::NoVae => ResidualEncoder::None,
            Variant::Global => ResidualEncoder::Global(GlobalVae::new(&mut init.sub("global_vae"), cfg)?),
            Variant::Fine => ResidualEncoder::Fine {
                posterior: FineVae::new(&mut init.sub("fine_vae"), cfg)?,
                prior: PriorLstm::new(&mut init.sub("fine_prior"), cfg)?,
            },
        };
        let duration = DurationPredictor::new(&mut init.sub("duration"), cfg)?;
        let upsampler = Upsampler::new(&mut init.sub("upsampler"), cfg.cond_dim())?;
        let decoder = SpecDecoder::new(&mut init.sub("decoder"), cfg)?;
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            residual,
            duration,
            upsampler,
            decoder,
        })
    }

    /// A fresh model with its own parameter store.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn forward(
        &self,
        cx: &mut Ctx<'_>,
        input: &ModelInput,
        targets: Option<&Targets>,
        opts: RunOptions,
    ) -> Result<ForwardOutput> {
        let b = input.batch();
        let need_targets = opts.durations == DurationSource::Teacher
            || (opts.latent == LatentSource::Posterior && !matches!(self.residual, ResidualEncoder::None));
        let targets = match targets {
            Some(t) => {
                if t.frames.len() != b {
                    return Err(Error::invalid(format!("{} target rows for batch of {b}", t.frames.len())));
                }
                Some(t)
            }
            None if need_targets => return Err(Error::invalid("this run mode needs target durations and frames")),
            None => None,
        };
        let enc = self.encoder.encode(cx, &input.tokens)?;
        let speaker = self.encoder.speaker_embedding(cx, &input.speakers)?;
        let target_mel = |cx: &mut Ctx<'_>, t: &Targets| {
            cx.g.constant(&[b, t.frame_mask.max_len(), t.bins], t.mel.clone())
        };

        let mut posterior = None;
        let mut kl = None;
        let mut prior_term = None;
        let latent = match (&self.residual, opts.latent) {
            (ResidualEncoder::None, _) => cx.g.zeros(&[b, self.cfg.latent_proj_dim]),
            (ResidualEncoder::Global(vae), LatentSource::Posterior) => {
                let t = targets.expect("checked above");
                let mel = target_mel(cx, t)?;
                let post = vae.posterior(cx, mel, &t.frame_mask)?;
                let z = sample_latent(cx, &post)?;
                let pm = vae.prior_mean(cx, &input.speakers)?;
                kl = Some(kl_divergence(cx, &post, Some(pm))?);
                posterior = Some(post);
                vae.project(cx, z)?
            }
            (ResidualEncoder::Global(vae), LatentSource::Prior) => {
                let pm = vae.prior_mean(cx, &input.speakers)?;
                vae.project(cx, pm)?
            }
            (ResidualEncoder::Fine { posterior: fvae, prior }, LatentSource::Posterior) => {
                let t = targets.expect("checked above");
                let mel = target_mel(cx, t)?;
                let pos = positional_features(cx, &t.frames, fvae.pos_dim, t.frame_mask.max_len())?;
                let out = fvae.posterior(cx, mel, &t.frame_mask, &pos, speaker, &enc)?;
                let post = out.posterior;
                let z = sample_latent(cx, &post)?;
                let z = enc.mask.apply(cx, z)?;
                kl = Some(kl_divergence(cx, &post, None)?);
                let predicted = prior.predict(cx, &enc, speaker, Some(post.mean))?;
                prior_term = Some(prior_loss(cx, predicted, post.mean, &enc.mask)?);
                posterior = Some(post);
                fvae.project(cx, z, speaker, &enc)?
            }
            (ResidualEncoder::Fine { posterior: fvae, prior }, LatentSource::Prior) => {
                let z = prior.predict(cx, &enc, speaker, None)?;
                fvae.project(cx, z, speaker, &enc)?
            }
        };

        let cond = self.encoder.attach_conditioning(cx, &enc, &input.speakers, latent)?;
        let duration = self.duration.predict(cx, cond, &enc.mask)?;
        let frames = match opts.durations {
            DurationSource::Teacher => targets.expect("checked above").frames.clone(),
            DurationSource::Predicted => {
                let p = cx.g.value(duration.p_z).to_vec();
                let s = cx.g.value(duration.seconds).to_vec();
                finalize_durations(&p, &s, &enc.mask, self.cfg.frame_rate)?
            }
        };
        let index = FrameIndex::new(&frames)?;
        let up = upsample(cx, duration.hidden, &index)?;
        let pos = positional_features(cx, &frames, self.cfg.cond_dim(), index.mask.max_len())?;
        let x = self.upsampler.combine(cx, up, &pos, &index.mask)?;
        let decoder = self.decoder.decode(cx, x, &index.mask)?;
        Ok(ForwardOutput {
            decoder,
            duration,
            frames,
            frame_mask: index.mask,
            token_mask: enc.mask,
            posterior,
            kl,
            prior_loss: prior_term,
            latent,
        })
    }
}
