//! Reusable layers and blocks.

mod conv;
mod lconv;
mod sinusoid;
mod transformer;

pub use conv::{Conv1d, ConvBlock};
pub use lconv::{lightweight_conv, LConvBlock};
pub use sinusoid::{sinusoid, sinusoid_table};
pub use transformer::{MultiHeadAttention, TransformerBlock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, ParamStore, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Hands out named, seeded parameters under a hierarchical prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}/{}", self.prefix, leaf)
        }
    }

    pub fn values(&mut self, leaf: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.add(&name, shape, values, true)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        self.values(leaf, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        self.values(leaf, shape, vec![1.0; n])
    }

    /// Glorot-uniform.
    pub fn glorot(&mut self, leaf: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.values(leaf, shape, v)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.values(leaf, shape, v)
    }
}

/// Valid prefix lengths of a padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    lens: Vec<usize>,
    max_len: usize,
}

impl SeqMask {
    pub fn new(lens: Vec<usize>, max_len: usize) -> Result<Self> {
        if let Some(&l) = lens.iter().find(|&&l| l > max_len) {
            return Err(Error::invalid(format!("sequence length {l} exceeds padded length {max_len}")));
        }
        Ok(SeqMask { lens, max_len })
    }

    pub fn full(batch: usize, len: usize) -> Self {
        SeqMask {
            lens: vec![len; batch],
            max_len: len,
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lens[b]
    }

    /// 0/1 values in [B, T] order.
    pub fn values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.lens.len() * self.max_len);
        for &l in &self.lens {
            v.extend((0..self.max_len).map(|t| if t < l { 1.0 } else { 0.0 }));
        }
        v
    }

    /// Constant [B, T, 1] mask tensor.
    pub fn tensor(&self, cx: &mut Ctx<'_>) -> Result<Var> {
        cx.g.constant(&[self.batch(), self.max_len, 1], self.values())
    }

    /// Additive attention bias [B, 1, 1, T]: 0 at valid keys, -1e9 at padding.
    pub fn key_bias(&self, cx: &mut Ctx<'_>) -> Result<Var> {
        let v = self.values().into_iter().map(|m| if m > 0.0 { 0.0 } else { -1e9 }).collect();
        cx.g.constant(&[self.batch(), 1, 1, self.max_len], v)
    }

    /// Zeroes padded positions of a [B, T, ...] tensor.
    pub fn apply(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let rank = cx.g.shape(x).len();
        let mut shape = vec![self.batch(), self.max_len];
        shape.resize(rank, 1);
        let m = cx.g.constant(&shape, self.values())?;
        cx.g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = init.glorot("w", &[d_in, d_out], d_in, d_out)?;
        let b = if bias { Some(init.zeros("b", &[d_out])?) } else { None };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                cx.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: init.ones("gain", &[d])?,
            bias: init.zeros("bias", &[d])?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gain), cx.param(self.bias));
        cx.g.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Lookup table with checked ids.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(init: &mut Init<'_>, count: usize, dim: usize) -> Result<Self> {
        let table = init.normal("table", &[count, dim], (1.0 / dim as f64).sqrt())?;
        Ok(Embedding { table, count, dim })
    }

    /// Rows for `ids`; `None` entries produce zero rows. Output [len, dim].
    pub fn lookup(&self, cx: &mut Ctx<'_>, ids: &[Option<usize>]) -> Result<Var> {
        let t = cx.param(self.table);
        cx.g.gather_rows(t, ids)
    }
}
