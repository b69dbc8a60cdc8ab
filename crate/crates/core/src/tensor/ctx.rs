use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, ParamId, ParamStore, Precision, Var};
use crate::error::Result;

/// One forward evaluation: a fresh graph, read access to the parameters,
/// and the single seeded noise source used by dropout and latent sampling.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: HashMap<ParamId, Var>,
    order: Vec<(ParamId, Var)>,
    rng: ChaCha8Rng,
    train: bool,
    dropout: bool,
}

impl<'p> Ctx<'p> {
    /// Evaluation mode: no dropout, no sampling.
    pub fn new(params: &'p ParamStore, precision: Precision, seed: u64) -> Self {
        Ctx {
            g: Graph::new(precision),
            params,
            bound: HashMap::new(),
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train: false,
            dropout: false,
        }
    }

    /// Training mode turns on latent sampling and dropout.
    pub fn training(mut self, on: bool) -> Self {
        self.train = on;
        self.dropout = on;
        self
    }

    pub fn with_dropout(mut self, on: bool) -> Self {
        self.dropout = on;
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Binds a parameter as a graph leaf (once per context).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let v = if p.trainable {
            self.g.leaf(&p.shape, p.value.clone())
        } else {
            self.g.constant(&p.shape, p.value.clone())
        }
        .expect("parameter shape is validated at registration");
        self.bound.insert(id, v);
        self.order.push((id, v));
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.order.iter().copied()
    }

    /// Gradients of every bound trainable parameter after `g.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.order
            .iter()
            .filter_map(|&(id, v)| self.g.grad(v).map(|g| (id, g.to_vec())))
            .collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Constant tensor of standard-normal draws.
    pub fn normal(&mut self, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        self.g.constant(shape, v)
    }

    /// Inverted dropout; identity unless dropout is enabled.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.dropout || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.g.constant(&shape, mask)?;
        self.g.mul(x, m)
    }
}
