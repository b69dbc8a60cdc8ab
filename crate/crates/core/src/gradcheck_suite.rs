//! Named finite-difference gradient checks over every block and module at
//! tiny shapes (B <= 2, N <= 5, T <= 12, d <= 16).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderKind, ModelConfig, Variant};
use crate::corpus::{make_batch, Utterance};
use crate::decoder::{iterative_spec_loss, SpecDecoder};
use crate::duration::{duration_loss, DurationPredictor, DurationTarget};
use crate::encoder::{EncoderOutput, TextEncoder, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{Model, RunOptions};
use crate::nn::{ConvBlock, Init, LConvBlock, SeqMask, TransformerBlock};
use crate::tensor::{grad_check, Ctx, GradCheckOptions, GradCheckReport, ParamId, ParamStore, Var};
use crate::train::{build_terms, total_loss, TermOptions};
use crate::upsample::{positional_features, upsample, FrameIndex, Upsampler};
use crate::vae::{kl_divergence, prior_loss, sample_latent, FineVae, GlobalVae, PriorLstm};

pub const SUITES: [&str; 16] = [
    "lconv_block",
    "transformer_block",
    "conv_block",
    "encoder",
    "global_vae",
    "fine_vae",
    "fine_prior",
    "latent_project",
    "duration",
    "upsampler",
    "decoder_lconv",
    "decoder_transformer",
    "loss_novae",
    "loss_global",
    "loss_fine",
    "loss_fine_transformer",
];

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Entries checked per parameter; `None` checks all of them.
    pub max_entries: Option<usize>,
    /// Fault injection: scale the first parameter's analytic gradient.
    pub corrupt: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 11,
            max_entries: Some(8),
            corrupt: None,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// sum(x * w) for a fixed random w, so every output entry matters.
fn probe(cx: &mut Ctx<'_>, x: Var, seed: u64) -> Result<Var> {
    let shape = cx.g.shape(x).to_vec();
    let n = shape.iter().product();
    let w = cx.g.constant(&shape, uniform(&mut rng(seed ^ 0x9e0b), n))?;
    let y = cx.g.mul(x, w)?;
    Ok(cx.g.sum(y))
}

fn check(store: &mut ParamStore, opts: &SuiteOptions, sampling: bool, f: impl Fn(&mut Ctx<'_>) -> Result<Var>) -> Result<GradCheckReport> {
    let first = store.ids().find(|&id| store.get(id).trainable);
    let go = GradCheckOptions {
        max_entries: opts.max_entries,
        seed: opts.seed,
        corrupt: opts.corrupt.and_then(|c| first.map(|id| (id, c))),
        sampling,
        step: 1e-5,
        ..GradCheckOptions::default()
    };
    grad_check(store, &go, f)
}

fn tiny(variant: Variant, decoder: DecoderKind) -> ModelConfig {
    ModelConfig::tiny(variant, decoder)
}

fn tiny_corpus(cfg: &ModelConfig, seed: u64) -> Vec<Utterance> {
    let mut r = rng(seed);
    let shapes: [&[usize]; 2] = [&[2, 0, 3, 1, 2], &[3, 2, 1]];
    shapes
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let frames: usize = d.iter().sum();
            Utterance {
                tokens: (0..d.len()).map(|_| r.random_range(0..cfg.vocab_size)).collect(),
                speaker: i % cfg.num_speakers,
                durations: d.to_vec(),
                mel: (0..frames * cfg.mel_bins).map(|_| r.random_range(0.0..1.0) as f32).collect(),
                bins: cfg.mel_bins,
            }
        })
        .collect()
}

fn input_leaf(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> Result<ParamId> {
    let n = shape.iter().product();
    store.add(name, shape, uniform(&mut rng(seed), n), true)
}

pub fn run_suite(name: &str, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let seed = opts.seed;
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    macro_rules! init {
        () => {
            Init::new(&mut store, &mut r)
        };
    }
    match name {
        "lconv_block" => {
            let block = LConvBlock::new(&mut init!(), 8, 2, 3, 0.0)?;
            let x = input_leaf(&mut store, "x", &[2, 6, 8], seed)?;
            let mask = SeqMask::new(vec![6, 4], 6)?;
            check(&mut store, opts, false, |cx| {
                let x = cx.param(x);
                let y = block.forward(cx, x, &mask)?;
                probe(cx, y, seed)
            })
        }
        "transformer_block" => {
            let block = TransformerBlock::new(&mut init!(), 8, 2, 0.0)?;
            let x = input_leaf(&mut store, "x", &[2, 5, 8], seed)?;
            let mask = SeqMask::new(vec![5, 3], 5)?;
            check(&mut store, opts, false, |cx| {
                let x = cx.param(x);
                let y = block.forward(cx, x, &mask)?;
                probe(cx, y, seed)
            })
        }
        "conv_block" => {
            let block = ConvBlock::new(&mut init!(), 6, 8, 5, 0.0)?;
            let x = input_leaf(&mut store, "x", &[2, 7, 6], seed)?;
            let mask = SeqMask::new(vec![7, 5], 7)?;
            check(&mut store, opts, false, |cx| {
                let x = cx.param(x);
                let y = block.forward(cx, x, &mask)?;
                probe(cx, y, seed)
            })
        }
        "encoder" => {
            let cfg = ModelConfig {
                d_model: 16,
                ..tiny(Variant::NoVae, DecoderKind::LConv)
            };
            let enc = TextEncoder::new(&mut init!(), &cfg)?;
            let tokens = TokenBatch::from_sequences(&[vec![1, 4, 2, 5], vec![3, 0]])?;
            check(&mut store, opts, false, |cx| {
                let out = enc.encode(cx, &tokens)?;
                let spk = cx.g.zeros(&[2, cfg.latent_proj_dim]);
                let cond = enc.attach_conditioning(cx, &out, &[1, 0], spk)?;
                probe(cx, cond, seed)
            })
        }
        "global_vae" => {
            let cfg = tiny(Variant::Global, DecoderKind::LConv);
            let vae = GlobalVae::new(&mut init!(), &cfg)?;
            let mel = input_leaf(&mut store, "mel", &[2, 9, cfg.mel_bins], seed)?;
            let mask = SeqMask::new(vec![9, 5], 9)?;
            check(&mut store, opts, true, |cx| {
                let mel = cx.param(mel);
                let post = vae.posterior(cx, mel, &mask)?;
                let z = sample_latent(cx, &post)?;
                let pm = vae.prior_mean(cx, &[1, 0])?;
                let kl = kl_divergence(cx, &post, Some(pm))?;
                let kl = cx.g.sum(kl);
                let proj = vae.project(cx, z)?;
                let p = probe(cx, proj, seed)?;
                cx.g.add(p, kl)
            })
        }
        "fine_vae" | "fine_prior" | "latent_project" => {
            let cfg = tiny(Variant::Fine, DecoderKind::LConv);
            let enc = TextEncoder::new(&mut init!().sub("encoder"), &cfg)?;
            let vae = FineVae::new(&mut init!().sub("vae"), &cfg)?;
            let prior = PriorLstm::new(&mut init!().sub("prior"), &cfg)?;
            let frames = vec![vec![3, 1, 0, 5]];
            let tokens = TokenBatch::from_sequences(&[vec![1, 2, 3, 4]])?;
            let index = FrameIndex::new(&frames)?;
            let t = index.mask.max_len();
            let mel = input_leaf(&mut store, "mel", &[1, t, cfg.mel_bins], seed)?;
            let which = name.to_string();
            check(&mut store, opts, true, |cx| {
                let out: EncoderOutput = enc.encode(cx, &tokens)?;
                let spk = enc.speaker_embedding(cx, &[1])?;
                let mel = cx.param(mel);
                let pos = positional_features(cx, &frames, cfg.fine_pos_dim, t)?;
                let post = vae.posterior(cx, mel, &index.mask, &pos, spk, &out)?.posterior;
                match which.as_str() {
                    "fine_vae" => {
                        let kl = kl_divergence(cx, &post, None)?;
                        let kl = cx.g.sum(kl);
                        let m = probe(cx, post.mean, seed)?;
                        let v = probe(cx, post.log_var, seed + 1)?;
                        let s = cx.g.add(m, v)?;
                        cx.g.add(s, kl)
                    }
                    "fine_prior" => {
                        let teacher = cx.g.add_scalar(post.mean, 0.3);
                        let pred = prior.predict(cx, &out, spk, Some(teacher))?;
                        let l = prior_loss(cx, pred, post.mean, &out.mask)?;
                        let p = probe(cx, pred, seed)?;
                        cx.g.add(l, p)
                    }
                    _ => {
                        let z = sample_latent(cx, &post)?;
                        let proj = vae.project(cx, z, spk, &out)?;
                        probe(cx, proj, seed)
                    }
                }
            })
        }
        "duration" => {
            let cfg = tiny(Variant::NoVae, DecoderKind::LConv);
            let dur = DurationPredictor::new(&mut init!(), &cfg)?;
            let x = input_leaf(&mut store, "x", &[2, 5, cfg.cond_dim()], seed)?;
            let mask = SeqMask::new(vec![5, 3], 5)?;
            let target = DurationTarget::new(&[vec![2, 0, 3, 1, 0], vec![1, 4, 0]], &mask, cfg.frame_rate)?;
            check(&mut store, opts, false, |cx| {
                let x = cx.param(x);
                let pred = dur.predict(cx, x, &mask)?;
                let l = duration_loss(cx, &pred, &target, &mask)?;
                let total = cx.g.add(l.ce, l.l1)?;
                let h = probe(cx, pred.hidden, seed)?;
                cx.g.add(total, h)
            })
        }
        "upsampler" => {
            let d = 8;
            let up = Upsampler::new(&mut init!(), d)?;
            let logits = up.logits;
            let v: Vec<f64> = uniform(&mut rng(seed + 5), 3 * d);
            store.get_mut(logits).value.copy_from_slice(&v);
            let hidden = input_leaf(&mut store, "hidden", &[2, 4, d], seed)?;
            let frames = vec![vec![2, 0, 3, 1], vec![1, 4, 2, 0]];
            let index = FrameIndex::new(&frames)?;
            check(&mut store, opts, false, |cx| {
                let h = cx.param(hidden);
                let u = upsample(cx, h, &index)?;
                let pos = positional_features(cx, &frames, d, index.mask.max_len())?;
                let y = up.combine(cx, u, &pos, &index.mask)?;
                probe(cx, y, seed)
            })
        }
        "decoder_lconv" | "decoder_transformer" => {
            let kind = if name == "decoder_lconv" { DecoderKind::LConv } else { DecoderKind::Transformer };
            let cfg = tiny(Variant::NoVae, kind);
            let dec = SpecDecoder::with_width(&mut init!(), &cfg, 8)?;
            let x = input_leaf(&mut store, "x", &[2, 12, 8], seed)?;
            let mask = SeqMask::new(vec![12, 7], 12)?;
            let target: Vec<f64> = uniform(&mut rng(seed + 9), 2 * 12 * cfg.mel_bins);
            check(&mut store, opts, false, |cx| {
                let x = cx.param(x);
                let out = dec.decode(cx, x, &mask)?;
                let t = cx.g.constant(&[2, 12, cfg.mel_bins], target.clone())?;
                iterative_spec_loss(cx, &out, t, &mask)
            })
        }
        "loss_novae" | "loss_global" | "loss_fine" | "loss_fine_transformer" => {
            let (variant, kind) = match name {
                "loss_novae" => (Variant::NoVae, DecoderKind::LConv),
                "loss_global" => (Variant::Global, DecoderKind::LConv),
                "loss_fine" => (Variant::Fine, DecoderKind::LConv),
                _ => (Variant::Fine, DecoderKind::Transformer),
            };
            let cfg = tiny(variant, kind);
            let model = Model::new(&cfg, &mut store, seed)?;
            let data = tiny_corpus(&cfg, seed);
            let batch = make_batch(&data.iter().collect::<Vec<_>>())?;
            let topts = TermOptions {
                iterative: true,
                lambda_dur: 1.3,
                beta: 0.7,
                frame_rate: cfg.frame_rate,
            };
            check(&mut store, opts, true, |cx| {
                let out = model.forward(cx, &batch.input, Some(&batch.targets), RunOptions::TRAIN)?;
                let built = build_terms(cx, &out, &batch, topts)?;
                total_loss(&mut cx.g, variant, &built.terms)
            })
        }
        _ => Err(Error::invalid(format!("unknown gradcheck module '{name}' (known: {})", SUITES.join(", ")))),
    }
}
