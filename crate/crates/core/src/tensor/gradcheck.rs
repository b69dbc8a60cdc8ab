//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Ctx, ParamId, ParamStore, Precision, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    /// Seed handed to every [`Ctx`] the checked function receives.
    pub seed: u64,
    /// Test hook: multiply the analytic gradient of one parameter.
    pub corrupt: Option<(ParamId, f64)>,
    /// Retries at step/10, step/100, ... when an entry disagrees.
    pub refinements: usize,
    /// Run contexts in training mode with dropout off, so seeded latent
    /// sampling takes part.
    pub sampling: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            max_entries: None,
            seed: 0,
            corrupt: None,
            refinements: 2,
            sampling: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Re-measurements at a smaller step.
    pub refined: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_error <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Below this magnitude gradients are compared absolutely; round-off in a
/// central difference sits around 1e-10 for O(1) losses.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// |a - n| / max(|a|, |n|, RELATIVE_FLOOR)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn context<'p>(store: &'p ParamStore, opts: &GradCheckOptions) -> Ctx<'p> {
    Ctx::new(store, Precision::High, opts.seed)
        .training(opts.sampling)
        .with_dropout(false)
}

fn eval<F>(store: &ParamStore, opts: &GradCheckOptions, frozen: &[Vec<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let mut cx = context(store, opts);
    cx.g.replay_detached(frozen.to_vec());
    let loss = f(&mut cx)?;
    let shape = cx.g.shape(loss);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss(shape.to_vec()));
    }
    Ok(cx.g.item(loss))
}

fn central_difference<F>(
    store: &mut ParamStore,
    id: ParamId,
    i: usize,
    step: f64,
    opts: &GradCheckOptions,
    frozen: &[Vec<f64>],
    f: &F,
) -> Result<f64>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let orig = store.get(id).value[i];
    store.get_mut(id).value[i] = orig + step;
    let plus = eval(store, opts, frozen, f);
    store.get_mut(id).value[i] = orig - step;
    let minus = eval(store, opts, frozen, f);
    store.get_mut(id).value[i] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences for every trainable parameter in `store`. `f` must be
/// deterministic for a fixed context seed; this is verified by evaluating
/// it twice. Values that pass through `detach` are frozen at the
/// unperturbed run, matching what backward treats as constant.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let (base, mut analytic, frozen) = {
        let mut cx = context(store, opts);
        let loss = f(&mut cx)?;
        cx.g.backward(loss)?;
        let base = cx.g.item(loss);
        let mut grads: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (id, var) in cx.bindings() {
            if let Some(g) = cx.g.grad(var) {
                grads[id.0].copy_from_slice(g);
            }
        }
        (base, grads, cx.g.detached_values().to_vec())
    };
    let again = eval(store, opts, &frozen, &f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }
    if let Some((id, factor)) = opts.corrupt {
        analytic[id.0].iter_mut().for_each(|g| *g *= factor);
    }

    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => sample(&mut pick, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            refined: 0,
        };
        for i in entries {
            let a = analytic[id.0][i];
            let mut step = opts.step;
            let mut numeric = central_difference(store, id, i, step, opts, &frozen, &f)?;
            let mut err = relative_error(a, numeric);
            // A kink (relu, abs) inside [x - h, x + h] spoils the estimate;
            // shrinking the step moves the interval off it, while a wrong
            // analytic gradient keeps disagreeing.
            for _ in 0..opts.refinements {
                if err <= opts.tolerance {
                    break;
                }
                step /= 10.0;
                numeric = central_difference(store, id, i, step, opts, &frozen, &f)?;
                err = relative_error(a, numeric);
                check.refined += 1;
            }
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
