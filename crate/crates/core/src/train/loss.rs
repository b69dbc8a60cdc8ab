//! The training objective assembled from its decomposed terms.

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Scalar graph nodes for every objective component plus the weights and
/// normalizers that combine them.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Unnormalized L1 of each decoder block that enters the loss.
    pub spec: Vec<Var>,
    /// Gate cross-entropy plus seconds L1, summed over tokens.
    pub dur: Var,
    /// Batch-mean KL.
    pub kl: Option<Var>,
    /// Summed prior MSE (fine variant).
    pub prior: Option<Var>,
    pub lambda_dur: f64,
    pub beta: f64,
    /// Valid frames in the batch.
    pub frames: usize,
    /// Mel bins.
    pub bins: usize,
    /// Valid tokens in the batch.
    pub tokens: usize,
}

/// Reconstruction, duration and VAE terms combined into the minimized
/// objective: spec / (K T) + lambda_dur dur / N + beta kl (+ prior / N).
pub fn total_loss(g: &mut Graph, variant: Variant, terms: &LossTerms) -> Result<Var> {
    match (variant, terms.kl.is_some(), terms.prior.is_some()) {
        (Variant::NoVae, false, false) | (Variant::Global, true, false) | (Variant::Fine, true, true) => {}
        (v, kl, prior) => {
            return Err(Error::invalid(format!(
                "variant {v} does not match terms (kl present: {kl}, prior present: {prior})"
            )))
        }
    }
    if terms.spec.is_empty() {
        return Err(Error::invalid("no spectrogram terms"));
    }
    if terms.frames == 0 || terms.bins == 0 || terms.tokens == 0 {
        return Err(Error::invalid("loss normalizers must be positive"));
    }
    if !(terms.beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {}", terms.beta)));
    }
    let mut spec = terms.spec[0];
    for &s in &terms.spec[1..] {
        spec = g.add(spec, s)?;
    }
    let spec = g.scale(spec, 1.0 / (terms.bins * terms.frames) as f64);
    let dur = g.scale(terms.dur, terms.lambda_dur / terms.tokens as f64);
    let mut total = g.add(spec, dur)?;
    if let Some(kl) = terms.kl {
        let kl = g.scale(kl, terms.beta);
        total = g.add(total, kl)?;
    }
    if let Some(prior) = terms.prior {
        let prior = g.scale(prior, 1.0 / terms.tokens as f64);
        total = g.add(total, prior)?;
    }
    Ok(total)
}

/// Plain values of one step's loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    /// Normalized spectrogram part (sum over blocks / K T).
    pub spec: f64,
    /// Final block only, per bin and frame.
    pub spec_last: f64,
    pub dur_ce: f64,
    pub dur_l1: f64,
    pub kl: f64,
    pub prior: f64,
}
