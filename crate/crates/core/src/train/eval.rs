use crate::corpus::{make_batch, Utterance};
use crate::duration::{finalize_one, NONZERO_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{Model, RunOptions};
use crate::tensor::{Ctx, ParamStore, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// True durations drive upsampling.
    TeacherDuration,
    /// Predicted, finalized durations drive upsampling.
    FreeRunning,
}

/// What the model produced for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePrediction {
    pub p_z: Vec<f64>,
    pub seconds: Vec<f64>,
    /// Finalized frames per token.
    pub frames: Vec<usize>,
    /// Final-block mel, frames x bins; empty when free-running synthesis
    /// produced no frames.
    pub mel: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Mean per-bin L1 of the final block over compared frames; NaN when
    /// nothing was compared.
    pub spec_l1: f64,
    /// Mean |predicted - true| frames per token.
    pub dur_frame_error: f64,
    /// Fraction of tokens whose zero/non-zero decision is right.
    pub zero_accuracy: f64,
    pub utterances: usize,
    /// Utterances whose synthesized length equals the target length.
    pub length_matches: usize,
}

/// Scores the model on `data`, one utterance at a time, using the
/// inference latent.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[Utterance], mode: EvalMode) -> Result<(Metrics, Vec<UtterancePrediction>)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation data is empty"));
    }
    let rate = model.cfg.frame_rate;
    let mut preds = Vec::with_capacity(data.len());
    for u in data {
        let batch = make_batch(&[u])?;
        let mut cx = Ctx::new(store, Precision::High, 0);
        let out = model.forward(&mut cx, &batch.input, Some(&batch.targets), RunOptions::TEACHER_EVAL)?;
        let p_z = cx.g.value(out.duration.p_z).to_vec();
        let seconds = cx.g.value(out.duration.seconds).to_vec();
        let frames = finalize_one(&p_z, &seconds, rate);
        let mel = match mode {
            EvalMode::TeacherDuration => cx.g.value(out.decoder.last()).iter().map(|&v| v as f32).collect(),
            EvalMode::FreeRunning if frames.iter().any(|&f| f > 0) => {
                let mut cx = Ctx::new(store, Precision::High, 0);
                let out = model.forward(&mut cx, &batch.input, None, RunOptions::SYNTH)?;
                cx.g.value(out.decoder.last()).iter().map(|&v| v as f32).collect()
            }
            EvalMode::FreeRunning => Vec::new(),
        };
        preds.push(UtterancePrediction { p_z, seconds, frames, mel });
    }
    Ok((score(data, &preds), preds))
}

/// Metrics of predictions against their utterances.
pub fn score(data: &[Utterance], preds: &[UtterancePrediction]) -> Metrics {
    let mut l1 = 0.0;
    let mut compared = 0usize;
    let mut frame_err = 0.0;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut matches = 0usize;
    for (u, p) in data.iter().zip(preds) {
        for (n, &f) in u.durations.iter().enumerate() {
            frame_err += (p.frames[n] as f64 - f as f64).abs();
            if (p.p_z[n] >= NONZERO_THRESHOLD) == (f > 0) {
                correct += 1;
            }
            tokens += 1;
        }
        if p.mel.len() == u.mel.len() {
            matches += 1;
            l1 += p.mel.iter().zip(&u.mel).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>();
            compared += u.mel.len();
        }
    }
    Metrics {
        spec_l1: if compared == 0 { f64::NAN } else { l1 / compared as f64 },
        dur_frame_error: frame_err / tokens.max(1) as f64,
        zero_accuracy: correct as f64 / tokens.max(1) as f64,
        utterances: data.len(),
        length_matches: matches,
    }
}
