use super::{Init, LayerNorm, SeqMask};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, Var};

/// 1-D convolution over time, "same" zero padding. Output length is
/// ceil(T / stride).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
    pub stride: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Conv1d {
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize, width: usize, stride: usize) -> Result<Self> {
        if width % 2 == 0 || stride == 0 {
            return Err(Error::invalid(format!("conv width {width} must be odd and stride {stride} positive")));
        }
        Ok(Conv1d {
            w: init.glorot("w", &[width, d_in, d_out], width * d_in, d_out)?,
            b: init.zeros("b", &[d_out])?,
            width,
            stride,
            d_in,
            d_out,
        })
    }

    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    /// Mask after this layer (valid lengths shrink by the stride).
    pub fn out_mask(&self, mask: &SeqMask) -> SeqMask {
        let lens = mask.lens().iter().map(|&l| self.out_len(l)).collect();
        SeqMask::new(lens, self.out_len(mask.max_len())).expect("ceil division keeps lengths in range")
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<(Var, SeqMask)> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_in {
            return Err(Error::shape("conv1d", &shape, &[0, 0, self.d_in]));
        }
        let x = mask.apply(cx, x)?;
        let t_out = self.out_len(shape[1]);
        let cols = cx.g.unfold(x, self.width, self.stride, (self.width - 1) / 2, t_out)?;
        let w = cx.param(self.w);
        let w = cx.g.reshape(w, &[self.width * self.d_in, self.d_out])?;
        let y = cx.g.matmul(cols, w)?;
        let b = cx.param(self.b);
        let y = cx.g.add(y, b)?;
        let out_mask = self.out_mask(mask);
        let y = out_mask.apply(cx, y)?;
        Ok((y, out_mask))
    }
}

/// conv -> layer norm -> ReLU -> dropout.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl ConvBlock {
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize, width: usize, dropout: f64) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv1d::new(&mut init.sub("conv"), d_in, d_out, width, 1)?,
            norm: LayerNorm::new(&mut init.sub("norm"), d_out)?,
            dropout,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, mask: &SeqMask) -> Result<Var> {
        let (y, _) = self.conv.forward(cx, x, mask)?;
        let y = self.norm.forward(cx, y)?;
        let y = cx.g.relu(y);
        let y = cx.dropout(y, self.dropout)?;
        mask.apply(cx, y)
    }
}
