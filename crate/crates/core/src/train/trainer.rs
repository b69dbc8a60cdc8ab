use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{total_loss, LossTerms, LossValues};
use super::optim::{clip_global_norm, Nesterov};
use super::schedule::{kl_weight, learning_rate};
use crate::config::RunConfig;
use crate::corpus::{make_batch, Utterance};
use crate::decoder::spec_l1;
use crate::duration::{duration_loss, DurationTarget};
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOutput, Model, RunOptions};
use crate::tensor::{read_checkpoint, write_checkpoint, Ctx, ParamStore, Record, Var};

const STEP_RECORD: &str = "trainer/step";

/// Mixes a run seed and a step into one generator seed.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How forward outputs turn into loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermOptions {
    pub iterative: bool,
    pub lambda_dur: f64,
    pub beta: f64,
    pub frame_rate: f64,
}

/// Loss terms plus the pieces logged separately.
pub struct BuiltTerms {
    pub terms: LossTerms,
    pub dur_ce: Var,
    pub dur_l1: Var,
    /// Unnormalized L1 of every block, in order.
    pub per_block: Vec<Var>,
}

/// Builds the decomposed objective for a forward pass over `batch`.
pub fn build_terms(cx: &mut Ctx<'_>, out: &ForwardOutput, batch: &Batch, opts: TermOptions) -> Result<BuiltTerms> {
    let t = &batch.targets;
    let b = batch.input.batch();
    let target = cx.g.constant(&[b, t.frame_mask.max_len(), t.bins], t.mel.clone())?;
    let mut per_block = Vec::with_capacity(out.decoder.predictions.len());
    for &p in &out.decoder.predictions {
        per_block.push(spec_l1(cx, p, target, &out.frame_mask)?);
    }
    let spec = if opts.iterative {
        per_block.clone()
    } else {
        vec![*per_block.last().expect("decoder has blocks")]
    };
    let dt = DurationTarget::new(&t.frames, &out.token_mask, opts.frame_rate)?;
    let dl = duration_loss(cx, &out.duration, &dt, &out.token_mask)?;
    let dur = cx.g.add(dl.ce, dl.l1)?;
    let kl = match out.kl {
        Some(k) => {
            let s = cx.g.sum(k);
            Some(cx.g.scale(s, 1.0 / b as f64))
        }
        None => None,
    };
    let terms = LossTerms {
        spec,
        dur,
        kl,
        prior: out.prior_loss,
        lambda_dur: opts.lambda_dur,
        beta: opts.beta,
        frames: out.frame_mask.total(),
        bins: t.bins,
        tokens: out.token_mask.total(),
    };
    Ok(BuiltTerms {
        terms,
        dur_ce: dl.ce,
        dur_l1: dl.l1,
        per_block,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub beta: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: LossValues,
}

pub const METRICS_HEADER: &str = "step,lr,beta,grad_norm,total,spec,spec_last,dur_ce,dur_l1,kl,prior";

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.beta, self.grad_norm, l.total, l.spec, l.spec_last, l.dur_ce, l.dur_l1, l.kl, l.prior
        )
    }
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub optim: Nesterov,
    pub cfg: RunConfig,
    /// Steps completed.
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.model.validate()?;
        cfg.train.validate()?;
        let (model, store) = Model::init(&cfg.model, cfg.train.seed)?;
        let optim = Nesterov::new(&store, cfg.train.momentum);
        Ok(Trainer {
            model,
            store,
            optim,
            cfg,
            step: 0,
        })
    }

    /// Utterance indices for the current step.
    pub fn batch_indices(&self, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.cfg.train.seed ^ 0xba7c4, self.step));
        idx.shuffle(&mut rng);
        idx.truncate(self.cfg.train.batch_size.min(count));
        idx.sort_unstable();
        idx
    }

    /// One optimization step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::invalid("training data is empty"));
        }
        let picked: Vec<&Utterance> = self.batch_indices(data.len()).into_iter().map(|i| &data[i]).collect();
        let batch = make_batch(&picked)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &Batch) -> Result<StepReport> {
        let tc = &self.cfg.train;
        let variant = self.cfg.model.variant;
        let step = self.step;
        let lr = learning_rate(tc, step);
        let beta = kl_weight(tc, variant, step);
        let (values, grads) = {
            let mut cx = Ctx::new(&self.store, tc.precision, step_seed(tc.seed, step)).training(true);
            let out = self.model.forward(&mut cx, &batch.input, Some(&batch.targets), RunOptions::TRAIN)?;
            let opts = TermOptions {
                iterative: tc.iterative_loss,
                lambda_dur: tc.lambda_dur,
                beta,
                frame_rate: self.cfg.model.frame_rate,
            };
            let built = build_terms(&mut cx, &out, batch, opts)?;
            let total = total_loss(&mut cx.g, variant, &built.terms)?;
            let values = loss_values(&cx, &built, total);
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("{values:?}"),
                });
            }
            cx.g.backward(total)?;
            (values, cx.param_grads())
        };
        self.store.zero_grad();
        self.store.add_grads(&grads);
        let grad_norm = clip_global_norm(&mut self.store, tc.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        self.optim.step(&mut self.store, lr);
        self.step += 1;
        Ok(StepReport {
            step,
            lr,
            beta,
            grad_norm,
            loss: values,
        })
    }

    /// Runs until `cfg.train.steps` steps are done, appending one CSV row
    /// per logged step to `metrics` and calling `on_checkpoint` every
    /// `checkpoint_every` steps.
    pub fn run<W: Write>(
        &mut self,
        data: &[Utterance],
        mut metrics: Option<&mut W>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.step < self.cfg.train.steps {
            let r = self.train_step(data)?;
            let every = self.cfg.train.log_every.max(1);
            if r.step % every == 0 {
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", r.csv_row())?;
                }
            }
            reports.push(r);
            let ce = self.cfg.train.checkpoint_every;
            if ce > 0 && self.step % ce == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(reports)
    }

    pub fn checkpoint_records(&self) -> Vec<Record> {
        let mut recs = self.store.to_records();
        recs.extend(self.optim.to_records(&self.store));
        recs.push(Record {
            name: STEP_RECORD.into(),
            shape: vec![1],
            values: vec![self.step as f64],
        });
        recs
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_checkpoint(std::io::BufWriter::new(f), &self.checkpoint_records())
    }

    /// Rebuilds a trainer from `cfg` and restores parameters, optimizer
    /// state and step count from a checkpoint.
    pub fn resume(cfg: RunConfig, path: &Path) -> Result<Self> {
        let recs = read_checkpoint(std::fs::File::open(path)?)?;
        Self::from_records(cfg, &recs)
    }

    pub fn from_records(cfg: RunConfig, recs: &[Record]) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        t.store.load_records(recs)?;
        if recs.iter().any(|r| r.name.starts_with("velocity/")) {
            t.optim.load_records(&t.store, recs)?;
        }
        if let Some(r) = recs.iter().find(|r| r.name == STEP_RECORD) {
            t.step = r.values.first().copied().unwrap_or(0.0) as usize;
        }
        Ok(t)
    }
}

pub fn loss_values(cx: &Ctx<'_>, built: &BuiltTerms, total: Var) -> LossValues {
    let terms = &built.terms;
    let kt = (terms.bins * terms.frames) as f64;
    let spec: f64 = terms.spec.iter().map(|&v| cx.g.item(v)).sum::<f64>() / kt;
    LossValues {
        total: cx.g.item(total),
        spec,
        spec_last: cx.g.item(*built.per_block.last().expect("decoder has blocks")) / kt,
        dur_ce: cx.g.item(built.dur_ce) / terms.tokens as f64,
        dur_l1: cx.g.item(built.dur_l1) / terms.tokens as f64,
        kl: terms.kl.map(|v| cx.g.item(v)).unwrap_or(0.0),
        prior: terms.prior.map(|v| cx.g.item(v) / terms.tokens as f64).unwrap_or(0.0),
    }
}
