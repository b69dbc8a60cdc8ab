//! Learning-rate and KL-weight schedules.

use crate::config::{TrainConfig, Variant};

const WARMUP_START: f64 = 0.1;

/// Multiplier on the base learning rate: linear 0.1 -> 1 over warmup,
/// flat until decay start, exponential down to the floor at decay end,
/// then flat.
pub fn lr_multiplier(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return WARMUP_START + (1.0 - WARMUP_START) * step as f64 / cfg.warmup_steps as f64;
    }
    if step <= cfg.decay_start {
        return 1.0;
    }
    if step >= cfg.decay_end {
        return cfg.lr_floor;
    }
    let frac = (step - cfg.decay_start) as f64 / (cfg.decay_end - cfg.decay_start) as f64;
    cfg.lr_floor.powf(frac)
}

pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.base_lr * lr_multiplier(cfg, step)
}

/// KL weight: constant for the utterance-level VAE, a linear ramp from
/// zero to `kl_final` between `kl_start` and `kl_end` for the phoneme-level
/// VAE, zero without a VAE.
pub fn kl_weight(cfg: &TrainConfig, variant: Variant, step: usize) -> f64 {
    match variant {
        Variant::NoVae => 0.0,
        Variant::Global => cfg.global_beta,
        Variant::Fine => {
            if step <= cfg.kl_start {
                0.0
            } else if step >= cfg.kl_end {
                cfg.kl_final
            } else {
                cfg.kl_final * (step - cfg.kl_start) as f64 / (cfg.kl_end - cfg.kl_start) as f64
            }
        }
    }
}
