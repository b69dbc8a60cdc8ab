use super::{Init, LayerNorm, Linear, SeqMask};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, Var};

/// Lightweight convolution: kernel logits [H, k] are softmax-normalized over
/// the k taps, then applied depth-wise with channel group h using row h.
/// Padded frames are zeroed on the way in and on the way out.
pub fn lightweight_conv(
    cx: &mut Ctx<'_>,
    x: Var,
    kernel_logits: Var,
    mask: &SeqMask,
    causal: bool,
) -> Result<Var> {
    let w = cx.g.softmax(kernel_logits, 1)?;
    let x = mask.apply(cx, x)?;
    let y = cx.g.light_conv(x, w, causal)?;
    mask.apply(cx, y)
}

/// Pre-norm residual block: x + conv(GLU(norm(x))), then y + FF(norm(y)).
#[derive(Clone, Debug)]
pub struct LConvBlock {
    pub glu: Linear,
    pub kernel: ParamId,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub d: usize,
    pub heads: usize,
    pub width: usize,
    pub dropout: f64,
    pub causal: bool,
}

impl LConvBlock {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, width: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        if width % 2 == 0 {
            return Err(Error::invalid(format!("lightweight conv width must be odd, got {width}")));
        }
        Ok(LConvBlock {
            glu: Linear::new(&mut init.sub("glu"), d, 2 * d, true)?,
            kernel: init.normal("kernel", &[heads, width], 0.1)?,
            norm1: LayerNorm::new(&mut init.sub("norm1"), d)?,
            ff1: Linear::new(&mut init.sub("ff1"), d, 4 * d, true)?,
            ff2: Linear::new(&mut init.sub("ff2"), 4 * d, d, true)?,
            norm2: LayerNorm::new(&mut init.sub("norm2"), d)?,
            d,
            heads,
            width,
            dropout,
            causal: false,
        })
    }

    /// Kernel scalars only (H * k).
    pub fn kernel_params(&self) -> usize {
        self.heads * self.width
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::shape("lconv_block", &shape, &[0, 0, self.d]));
        }
        let h = self.norm1.forward(cx, x)?;
        let proj = self.glu.forward(cx, h)?;
        let value = cx.g.narrow(proj, 2, 0, self.d)?;
        let gate = cx.g.narrow(proj, 2, self.d, self.d)?;
        let gate = cx.g.sigmoid(gate);
        let h = cx.g.mul(value, gate)?;
        let logits = cx.param(self.kernel);
        let h = lightweight_conv(cx, h, logits, mask, self.causal)?;
        let h = cx.dropout(h, self.dropout)?;
        let y = cx.g.add(x, h)?;

        let f = self.norm2.forward(cx, y)?;
        let f = self.ff1.forward(cx, f)?;
        let f = cx.g.relu(f);
        let f = cx.dropout(f, self.dropout)?;
        let f = self.ff2.forward(cx, f)?;
        let y = cx.g.add(y, f)?;
        mask.apply(cx, y)
    }
}
