//! Nesterov momentum and global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Record};

/// v <- momentum * v + g;  theta <- theta - lr * (g + momentum * v).
#[derive(Clone, Debug, PartialEq)]
pub struct Nesterov {
    pub momentum: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Nesterov {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Nesterov {
            momentum,
            velocity: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let a = self.momentum;
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((theta, &g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = a * *vi + g;
                *theta -= lr * (g + a * *vi);
            }
        }
    }

    /// Velocity records named `velocity/<parameter>`.
    pub fn to_records(&self, store: &ParamStore) -> Vec<Record> {
        store
            .iter()
            .zip(&self.velocity)
            .map(|(p, v)| Record {
                name: format!("velocity/{}", p.name),
                shape: p.shape.clone(),
                values: v.clone(),
            })
            .collect()
    }

    pub fn load_records(&mut self, store: &ParamStore, records: &[Record]) -> Result<()> {
        for (p, v) in store.iter().zip(&mut self.velocity) {
            let name = format!("velocity/{}", p.name);
            let r = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))?;
            if r.shape != p.shape {
                return Err(Error::invalid(format!("{name}: shape {:?}, expected {:?}", r.shape, p.shape)));
            }
            v.clone_from(&r.values);
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
