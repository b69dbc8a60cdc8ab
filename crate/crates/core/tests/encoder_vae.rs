use nartts::config::{DecoderKind, ModelConfig, Variant};
use nartts::encoder::{TextEncoder, TokenBatch};
use nartts::nn::{Init, SeqMask};
use nartts::tensor::{Ctx, ParamStore, Precision, Var};
use nartts::upsample::{positional_features, FrameIndex};
use nartts::vae::{kl_divergence, masked_mean_pool, prior_loss, reparameterize, FineVae, GlobalVae, LatentPosterior, PriorLstm};
use nartts::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        speaker_dim: 6,
        enc_heads: 2,
        enc_blocks: 2,
        enc_conv_blocks: 1,
        vae_dim: 8,
        vae_heads: 2,
        vae_width: 5,
        global_plain_blocks: 1,
        fine_blocks: 1,
        fine_pos_dim: 4,
        prior_hidden: 8,
        latent_dim: 3,
        latent_proj_dim: 5,
        mel_bins: 4,
        dropout: 0.0,
        ..ModelConfig::tiny(variant, DecoderKind::LConv)
    }
}

fn encoder(cfg: &ModelConfig, seed: u64) -> (ParamStore, TextEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = TextEncoder::new(&mut Init::new(&mut store, &mut rng).sub("encoder"), cfg).unwrap();
    (store, enc)
}

// ---- text encoder ------------------------------------------------------

#[test]
fn out_of_range_token_names_its_position() {
    let cfg = small(Variant::NoVae);
    let (store, enc) = encoder(&cfg, 1);
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let tokens = TokenBatch::from_sequences(&[vec![1, 2], vec![0, 3, cfg.vocab_size]]).unwrap();
    match enc.encode(&mut cx, &tokens) {
        Err(Error::TokenOutOfRange { id, index, vocab }) => {
            assert_eq!((id, index, vocab), (cfg.vocab_size, 2, cfg.vocab_size));
        }
        other => panic!("expected out-of-range error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn conditioning_width_tiling_and_speaker_locality() {
    let cfg = ModelConfig {
        speaker_dim: 64,
        latent_proj_dim: 32,
        ..small(Variant::Global)
    };
    let (store, enc) = encoder(&cfg, 2);
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let tokens = TokenBatch::from_sequences(&[vec![1, 4, 2], vec![1, 4, 2]]).unwrap();
    let out = enc.encode(&mut cx, &tokens).unwrap();
    let latent = cx.g.constant(&[2, 32], random(3, 32).repeat(2)).unwrap();
    let cond = enc.attach_conditioning(&mut cx, &out, &[0, 1], latent).unwrap();
    let c = cfg.d_model + 96;
    assert_eq!(cx.g.shape(cond), &[2, 3, c]);
    let v = cx.g.value(cond);
    let row = |b: usize, n: usize| &v[(b * 3 + n) * c..(b * 3 + n + 1) * c];
    for n in 0..3 {
        assert_eq!(row(0, n)[cfg.d_model + 64..], row(0, 0)[cfg.d_model + 64..], "latent tiled");
        let (a, b) = (row(0, n), row(1, n));
        assert_eq!(a[..cfg.d_model], b[..cfg.d_model]);
        assert_eq!(a[cfg.d_model + 64..], b[cfg.d_model + 64..]);
        assert_ne!(a[cfg.d_model..cfg.d_model + 64], b[cfg.d_model..cfg.d_model + 64]);
    }
    let bad = cx.g.constant(&[2, 32], vec![0.0; 64]).unwrap();
    assert!(matches!(
        enc.attach_conditioning(&mut cx, &out, &[0, cfg.num_speakers], bad),
        Err(Error::SpeakerOutOfRange { .. })
    ));
}

#[test]
fn masked_tokens_are_zero_and_batch_order_is_respected() {
    let cfg = small(Variant::Fine);
    let (store, enc) = encoder(&cfg, 4);
    let seqs = [vec![1, 4, 2, 5], vec![3, 0]];
    let run = |seqs: &[Vec<usize>], speakers: &[usize]| {
        let mut cx = Ctx::new(&store, Precision::High, 0);
        let tokens = TokenBatch::from_sequences(seqs).unwrap();
        let out = enc.encode(&mut cx, &tokens).unwrap();
        let latent = cx.g.constant(&[2, 4, cfg.latent_proj_dim], vec![0.5; 8 * cfg.latent_proj_dim]).unwrap();
        let cond = enc.attach_conditioning(&mut cx, &out, speakers, latent).unwrap();
        cx.g.value(cond).to_vec()
    };
    let c = cfg.cond_dim();
    let a = run(&seqs, &[0, 1]);
    assert!(a[(4 + 2) * c..].iter().all(|&v| v == 0.0));
    let b = run(&[seqs[1].clone(), seqs[0].clone()], &[1, 0]);
    assert_eq!(a[..4 * c], b[4 * c..]);
    assert_eq!(a[4 * c..], b[..4 * c]);
    assert_eq!(a, run(&seqs, &[0, 1]));
}

#[test]
fn single_token_output_depends_only_on_its_embedding() {
    let cfg = small(Variant::NoVae);
    let (mut store, enc) = encoder(&cfg, 5);
    let run = |store: &ParamStore| {
        let mut cx = Ctx::new(store, Precision::High, 0);
        let out = enc.encode(&mut cx, &TokenBatch::from_sequences(&[vec![2]]).unwrap()).unwrap();
        cx.g.value(out.hidden).to_vec()
    };
    let before = run(&store);
    let table = store.id("encoder/phonemes/table").unwrap();
    let d = cfg.d_model;
    for (i, v) in store.get_mut(table).value.iter_mut().enumerate() {
        if i / d != 2 {
            *v += 3.0;
        }
    }
    assert_eq!(before, run(&store));
    store.get_mut(table).value[2 * d] += 0.5;
    assert_ne!(before, run(&store));
}

// ---- KL and sampling ---------------------------------------------------

fn posterior(cx: &mut Ctx<'_>, shape: &[usize], mean: Vec<f64>, log_var: Vec<f64>) -> LatentPosterior {
    LatentPosterior {
        mean: cx.g.leaf(shape, mean).unwrap(),
        log_var: cx.g.leaf(shape, log_var).unwrap(),
    }
}

#[test]
fn kl_examples() {
    let store = ParamStore::new();
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let p = posterior(&mut cx, &[1, 8], vec![0.3; 8], vec![0.0; 8]);
    let pm = cx.g.constant(&[1, 8], vec![0.3; 8]).unwrap();
    let kl = kl_divergence(&mut cx, &p, Some(pm)).unwrap();
    assert_eq!(cx.g.value(kl), &[0.0]);
    let p = posterior(&mut cx, &[1, 8], vec![1.0; 8], vec![0.0; 8]);
    let kl = kl_divergence(&mut cx, &p, None).unwrap();
    assert!((cx.g.item(kl) - 4.0).abs() < 1e-15);
}

/// log N(z; m, s2) summed over dims.
fn log_normal(z: &[f64], m: &[f64], s2: &[f64]) -> f64 {
    z.iter()
        .zip(m)
        .zip(s2)
        .map(|((z, m), s2)| -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (z - m).powi(2) / s2))
        .sum()
}

#[test]
fn kl_matches_monte_carlo() {
    let mq = [0.4, -1.2, 0.0, 2.0, 0.7, -0.3, 1.1, 0.2];
    let lv = [0.5, -0.8, 0.2, -1.5, 0.0, 1.0, -0.2, 0.3];
    let mp = [0.1, 0.0, -0.5, 1.0, 0.3, 0.0, 0.9, -0.4];
    let store = ParamStore::new();
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let p = posterior(&mut cx, &[1, 8], mq.to_vec(), lv.to_vec());
    let pm = cx.g.constant(&[1, 8], mp.to_vec()).unwrap();
    let kl = kl_divergence(&mut cx, &p, Some(pm)).unwrap();
    let analytic = cx.g.item(kl);

    let s2: Vec<f64> = lv.iter().map(|v: &f64| v.exp()).collect();
    let ones = [1.0; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z: Vec<f64> = (0..8).map(|i| mq[i] + s2[i].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        total += log_normal(&z, &mq, &s2) - log_normal(&z, &mp, &ones);
    }
    let mc = total / n as f64;
    assert!((mc - analytic).abs() <= 0.02 * analytic, "mc {mc} analytic {analytic}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn kl_is_never_negative(m in prop::collection::vec(-5.0..5.0f64, 8), lv in prop::collection::vec(-6.0..6.0f64, 8), p in prop::collection::vec(-5.0..5.0f64, 8)) {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store, Precision::High, 0);
        let q = posterior(&mut cx, &[1, 8], m, lv);
        let pm = cx.g.constant(&[1, 8], p).unwrap();
        let kl = kl_divergence(&mut cx, &q, Some(pm)).unwrap();
        prop_assert!(cx.g.item(kl) >= 0.0);
    }
}

#[test]
fn sample_moves_one_for_one_with_the_mean() {
    let store = ParamStore::new();
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let p = posterior(&mut cx, &[2, 3, 4], random(1, 24), random(2, 24));
    let eps = cx.g.constant(&[2, 3, 4], random(3, 24)).unwrap();
    let z = reparameterize(&mut cx, &p, eps).unwrap();
    let s = cx.g.sum(z);
    cx.g.backward(s).unwrap();
    assert!(cx.g.grad(p.mean).unwrap().iter().all(|&g| g == 1.0));
}

// ---- global VAE --------------------------------------------------------

#[test]
fn pooling_a_single_frame_returns_it() {
    let store = ParamStore::new();
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let x = random(5, 2 * 3 * 4);
    let xv = cx.g.constant(&[2, 3, 4], x.clone()).unwrap();
    let p = masked_mean_pool(&mut cx, xv, &SeqMask::new(vec![1, 1], 3).unwrap()).unwrap();
    assert_eq!(cx.g.value(p)[..4], x[..4]);
    assert_eq!(cx.g.value(p)[4..], x[12..16]);
    assert!(masked_mean_pool(&mut cx, xv, &SeqMask::new(vec![1, 0], 3).unwrap()).is_err());
}

fn global_vae(seed: u64) -> (ModelConfig, ParamStore, GlobalVae) {
    let cfg = ModelConfig {
        global_strided_blocks: 5,
        ..small(Variant::Global)
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vae = GlobalVae::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
    (cfg, store, vae)
}

#[test]
fn five_strided_stages_take_64_frames_to_2() {
    let (_, _, vae) = global_vae(1);
    assert_eq!(vae.pooled_len(64), 2);
    assert_eq!(vae.pooled_len(65), 3);
    assert_eq!(vae.pooled_len(1), 1);
}

#[test]
fn global_posterior_ignores_padding_and_rejects_empty() {
    let (cfg, store, vae) = global_vae(6);
    let bins = cfg.mel_bins;
    let mel = random(7, 11 * bins);
    let run = |frames: &[f64], t: usize, len: usize| {
        let mut cx = Ctx::new(&store, Precision::Standard, 0);
        let m = cx.g.constant(&[1, t, bins], frames.to_vec()).unwrap();
        let p = vae.posterior(&mut cx, m, &SeqMask::new(vec![len], t).unwrap()).unwrap();
        (cx.g.value(p.mean).to_vec(), cx.g.value(p.log_var).to_vec())
    };
    let (m0, v0) = run(&mel, 11, 11);
    let mut padded = mel.clone();
    padded.extend(random(8, 6 * bins).iter().map(|v| v * 40.0));
    let (m1, v1) = run(&padded, 17, 11);
    for (a, b) in m0.iter().chain(&v0).zip(m1.iter().chain(&v1)) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let m = cx.g.constant(&[1, 2, bins], vec![0.0; 2 * bins]).unwrap();
    assert!(vae.posterior(&mut cx, m, &SeqMask::new(vec![0], 2).unwrap()).is_err());
}

#[test]
fn global_projection_is_affine() {
    let (cfg, store, vae) = global_vae(9);
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let l = cfg.latent_dim;
    let z = random(10, l);
    let f = |cx: &mut Ctx<'_>, z: Vec<f64>| {
        let v = cx.g.constant(&[1, l], z).unwrap();
        let y = vae.project(cx, v).unwrap();
        cx.g.value(y).to_vec()
    };
    let f0 = f(&mut cx, vec![0.0; l]);
    let f1 = f(&mut cx, z.clone());
    let f2 = f(&mut cx, z.iter().map(|v| 2.0 * v).collect());
    assert_eq!(f1.len(), cfg.latent_proj_dim);
    for i in 0..f0.len() {
        assert!(((f2[i] - f0[i]) - 2.0 * (f1[i] - f0[i])).abs() < 1e-12);
    }
}

// ---- fine VAE and its prior ---------------------------------------------

struct Fine {
    cfg: ModelConfig,
    store: ParamStore,
    enc: TextEncoder,
    vae: FineVae,
    prior: PriorLstm,
}

fn fine(seed: u64) -> Fine {
    let cfg = small(Variant::Fine);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut store, &mut rng);
    let enc = TextEncoder::new(&mut init.sub("encoder"), &cfg).unwrap();
    let vae = FineVae::new(&mut init.sub("fine_vae"), &cfg).unwrap();
    let prior = PriorLstm::new(&mut init.sub("fine_prior"), &cfg).unwrap();
    Fine { cfg, store, enc, vae, prior }
}

struct FineRun {
    mean: Vec<f64>,
    weights: Vec<f64>,
}

fn fine_posterior(f: &Fine, cx: &mut Ctx<'_>, tokens: &[Vec<usize>], frames: &[Vec<usize>], seed: u64) -> (FineRun, nartts::encoder::EncoderOutput, Var, LatentPosterior) {
    let bins = f.cfg.mel_bins;
    let index = FrameIndex::new(frames).unwrap();
    let t = index.mask.max_len();
    let b = frames.len();
    let out = f.enc.encode(cx, &TokenBatch::from_sequences(tokens).unwrap()).unwrap();
    let spk = f.enc.speaker_embedding(cx, &vec![1; b]).unwrap();
    let mel = cx.g.constant(&[b, t, bins], random(seed, b * t * bins)).unwrap();
    let pos = positional_features(cx, frames, f.cfg.fine_pos_dim, t).unwrap();
    let r = f.vae.posterior(cx, mel, &index.mask, &pos, spk, &out).unwrap();
    let run = FineRun {
        mean: cx.g.value(r.posterior.mean).to_vec(),
        weights: cx.g.value(r.weights).to_vec(),
    };
    (run, out, spk, r.posterior)
}

#[test]
fn single_phoneme_attends_over_every_frame() {
    let f = fine(11);
    let mut cx = Ctx::new(&f.store, Precision::High, 0);
    let (r, ..) = fine_posterior(&f, &mut cx, &[vec![3]], &[vec![7]], 12);
    assert_eq!(r.weights.len(), 7);
    assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(r.weights.iter().all(|&w| w > 0.0));
}

#[test]
fn fine_attention_rows_cover_valid_frames_and_masked_rows_are_zero() {
    let f = fine(13);
    let mut cx = Ctx::new(&f.store, Precision::High, 0);
    let frames = [vec![2, 0, 3], vec![4]];
    let (r, ..) = fine_posterior(&f, &mut cx, &[vec![1, 2, 3], vec![4]], &frames, 14);
    let t = 5;
    for (row, w) in r.weights.chunks(t).enumerate() {
        let b = row / 3;
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let valid = frames[b].iter().sum::<usize>();
        assert!(w[valid..].iter().all(|&v| v == 0.0));
    }
    let l = f.cfg.latent_dim;
    assert!(r.mean[(3 + 1) * l..].iter().all(|&v| v == 0.0));
}

#[test]
fn fine_posterior_rejects_mismatched_lengths() {
    let f = fine(15);
    let mut cx = Ctx::new(&f.store, Precision::High, 0);
    let frames = vec![vec![2, 3]];
    let out = f.enc.encode(&mut cx, &TokenBatch::from_sequences(&[vec![1, 2]]).unwrap()).unwrap();
    let spk = f.enc.speaker_embedding(&mut cx, &[0]).unwrap();
    let mel = cx.g.constant(&[1, 6, f.cfg.mel_bins], vec![0.0; 6 * f.cfg.mel_bins]).unwrap();
    let pos = positional_features(&mut cx, &frames, f.cfg.fine_pos_dim, 5).unwrap();
    let mask = SeqMask::new(vec![5], 6).unwrap();
    assert!(f.vae.posterior(&mut cx, mel, &mask, &pos, spk, &out).is_err());
}

#[test]
fn prior_loss_does_not_reach_the_posterior() {
    let f = fine(16);
    let mut cx = Ctx::new(&f.store, Precision::High, 3).training(true);
    let (_, out, spk, post) = fine_posterior(&f, &mut cx, &[vec![1, 2, 3], vec![4, 5]], &[vec![2, 1, 3], vec![1, 2]], 17);
    let pred = f.prior.predict(&mut cx, &out, spk, Some(post.mean)).unwrap();
    let loss = prior_loss(&mut cx, pred, post.mean, &out.mask).unwrap();
    assert!(cx.g.item(loss) > 0.0);
    cx.g.backward(loss).unwrap();
    let mut prior_grads = 0;
    for (id, grad) in cx.param_grads() {
        let name = &f.store.get(id).name;
        if name.starts_with("fine_prior/") {
            prior_grads += grad.iter().filter(|g| **g != 0.0).count();
        } else {
            assert!(grad.iter().all(|&g| g == 0.0), "{name} received gradient");
        }
    }
    assert!(prior_grads > 0);
}

#[test]
fn zero_teacher_and_zero_output_give_zero_loss() {
    let mut f = fine(18);
    for name in ["fine_prior/out/w", "fine_prior/out/b"] {
        let id = f.store.id(name).unwrap();
        f.store.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut cx = Ctx::new(&f.store, Precision::High, 0).training(true);
    let out = f.enc.encode(&mut cx, &TokenBatch::from_sequences(&[vec![1, 2, 3]]).unwrap()).unwrap();
    let spk = f.enc.speaker_embedding(&mut cx, &[0]).unwrap();
    let zeros = cx.g.zeros(&[1, 3, f.cfg.latent_dim]);
    let pred = f.prior.predict(&mut cx, &out, spk, Some(zeros)).unwrap();
    let loss = prior_loss(&mut cx, pred, zeros, &out.mask).unwrap();
    assert_eq!(cx.g.item(loss), 0.0);
}

#[test]
fn prior_needs_a_teacher_in_training_and_rolls_out_deterministically() {
    let f = fine(19);
    let tokens = TokenBatch::from_sequences(&[vec![1, 2, 3, 4], vec![5, 0]]).unwrap();
    let mut cx = Ctx::new(&f.store, Precision::High, 0).training(true);
    let out = f.enc.encode(&mut cx, &tokens).unwrap();
    let spk = f.enc.speaker_embedding(&mut cx, &[0, 1]).unwrap();
    assert!(f.prior.predict(&mut cx, &out, spk, None).is_err());

    let rollout = |seed: u64| {
        let mut cx = Ctx::new(&f.store, Precision::High, seed);
        let out = f.enc.encode(&mut cx, &tokens).unwrap();
        let spk = f.enc.speaker_embedding(&mut cx, &[0, 1]).unwrap();
        let y = f.prior.predict(&mut cx, &out, spk, None).unwrap();
        cx.g.value(y).to_vec()
    };
    let a = rollout(1);
    assert_eq!(a, rollout(2));
    let l = f.cfg.latent_dim;
    assert!(a[(4 + 2) * l..].iter().all(|&v| v == 0.0));
}

#[test]
fn prior_is_causal_over_phonemes() {
    let f = fine(20);
    let l = f.cfg.latent_dim;
    // Fixed encoder states, so only the recurrence links positions.
    let run = |teacher: &[f64]| {
        let mut cx = Ctx::new(&f.store, Precision::High, 0);
        let mut out = f.enc.encode(&mut cx, &TokenBatch::from_sequences(&[vec![1, 2, 3, 4]]).unwrap()).unwrap();
        out.hidden = cx.g.constant(&[1, 4, f.cfg.d_model], random(21, 4 * f.cfg.d_model)).unwrap();
        let spk = f.enc.speaker_embedding(&mut cx, &[0]).unwrap();
        let t = cx.g.constant(&[1, 4, l], teacher.to_vec()).unwrap();
        let y = f.prior.predict(&mut cx, &out, spk, Some(t)).unwrap();
        cx.g.value(y).to_vec()
    };
    let mut teacher = random(22, 4 * l);
    let base = run(&teacher);
    // Step n consumes teacher n - 1, so the last teacher latent is unused.
    teacher[3 * l..].iter_mut().for_each(|v| *v += 10.0);
    assert_eq!(run(&teacher), base);
    teacher[l..2 * l].iter_mut().for_each(|v| *v += 1.0);
    let moved = run(&teacher);
    assert_eq!(moved[..2 * l], base[..2 * l]);
    assert_ne!(moved[2 * l..3 * l], base[2 * l..3 * l]);
}

#[test]
fn fine_projection_width() {
    let f = fine(23);
    let mut cx = Ctx::new(&f.store, Precision::High, 0);
    let (_, out, spk, post) = fine_posterior(&f, &mut cx, &[vec![1, 2]], &[vec![2, 3]], 24);
    let y = f.vae.project(&mut cx, post.mean, spk, &out).unwrap();
    assert_eq!(cx.g.shape(y), &[1, 2, f.cfg.latent_proj_dim]);
}
