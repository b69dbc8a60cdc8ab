use super::{Init, LayerNorm, Linear, SeqMask};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Intermediate results kept for inspection.
pub struct AttentionOutput {
    pub out: Var,
    /// [B, H, T, T] softmax weights.
    pub weights: Var,
    /// [B, T, d] concatenated per-head context before the output projection.
    pub context: Var,
    /// [B, T, d] value projection.
    pub values: Var,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&mut init.sub("q"), d, d, true)?,
            k: Linear::new(&mut init.sub("k"), d, d, true)?,
            v: Linear::new(&mut init.sub("v"), d, d, true)?,
            o: Linear::new(&mut init.sub("o"), d, d, true)?,
            heads,
            d,
        })
    }

    fn split_heads(&self, cx: &mut Ctx<'_>, x: Var, b: usize, t: usize) -> Result<Var> {
        let x = cx.g.reshape(x, &[b, t, self.heads, self.d / self.heads])?;
        cx.g.permute(x, &[0, 2, 1, 3])
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<AttentionOutput> {
        let shape = cx.g.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let dh = self.d / self.heads;
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let values = self.v.forward(cx, x)?;
        let q = self.split_heads(cx, q, b, t)?;
        let k = self.split_heads(cx, k, b, t)?;
        let v = self.split_heads(cx, values, b, t)?;
        let kt = cx.g.transpose(k)?;
        let scores = cx.g.matmul(q, kt)?;
        let scores = cx.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let bias = mask.key_bias(cx)?;
        let scores = cx.g.add(scores, bias)?;
        let weights = cx.g.softmax(scores, 3)?;
        let ctxv = cx.g.matmul(weights, v)?;
        let ctxv = cx.g.permute(ctxv, &[0, 2, 1, 3])?;
        let context = cx.g.reshape(ctxv, &[b, t, self.d])?;
        let out = self.o.forward(cx, context)?;
        Ok(AttentionOutput {
            out,
            weights,
            context,
            values,
        })
    }
}

/// Pre-norm self-attention block followed by a pre-norm FF sublayer.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub d: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, dropout: f64) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&mut init.sub("norm1"), d)?,
            attn: MultiHeadAttention::new(&mut init.sub("attn"), d, heads)?,
            norm2: LayerNorm::new(&mut init.sub("norm2"), d)?,
            ff1: Linear::new(&mut init.sub("ff1"), d, 4 * d, true)?,
            ff2: Linear::new(&mut init.sub("ff2"), 4 * d, d, true)?,
            d,
            dropout,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::shape("transformer_block", &shape, &[0, 0, self.d]));
        }
        let h = self.norm1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, mask)?;
        let a = cx.dropout(a.out, self.dropout)?;
        let x = cx.g.add(x, a)?;
        let h = self.norm2.forward(cx, x)?;
        let f = self.ff1.forward(cx, h)?;
        let f = cx.g.relu(f);
        let f = cx.dropout(f, self.dropout)?;
        let f = self.ff2.forward(cx, f)?;
        let x = cx.g.add(x, f)?;
        mask.apply(cx, x)
    }
}
