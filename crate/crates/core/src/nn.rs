//! Small parameterized building blocks shared across the network.

use crate::error::{shape_err, Result};
use crate::params::{linear_bound, Ctx, ParamBuilder, ParamId};
use crate::tensor::Var;

pub const LN_EPS: f64 = 1e-5;

/// Dense map over the last axis: `[.., in] → [.., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = b.uniform(format!("{name}.weight"), &[d_in, d_out], linear_bound(d_in));
        let bias = bias.then(|| b.zeros(format!("{name}.bias"), &[d_out]));
        Linear {
            d_in,
            d_out,
            weight,
            bias,
        }
    }

    /// Zero-initialized weight and bias.
    pub fn zeroed(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = b.zeros(format!("{name}.weight"), &[d_in, d_out]);
        let bias = bias.then(|| b.zeros(format!("{name}.bias"), &[d_out]));
        Linear {
            d_in,
            d_out,
            weight,
            bias,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let d = *shape.last().unwrap();
        if d != self.d_in {
            return shape_err("linear", &shape, &[self.d_in, self.d_out]);
        }
        let rows = x.numel() / d;
        let y = x.reshape(&[rows, d])?.matmul(ctx.p(self.weight))?;
        let y = match self.bias {
            Some(b) => y.add_bcast(ctx.p(b).reshape(&[1, self.d_out])?)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        y.reshape(&out_shape)
    }
}

/// Learnable gain and bias for layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNorm {
            dim,
            gain: b.fill(format!("{name}.gain"), &[dim], 1.0),
            bias: b.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(ctx.p(self.gain), ctx.p(self.bias), LN_EPS)
    }
}

/// Plain convolution with bias on `[C×H×W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bound: f64,
    ) -> Self {
        Conv2d {
            c_in,
            c_out,
            k,
            stride,
            padding,
            weight: b.uniform(format!("{name}.weight"), &[c_out, c_in, k, k], bound),
            bias: b.zeros(format!("{name}.bias"), &[c_out]),
        }
    }

    /// 1×1 convolution with variance-preserving init.
    pub fn pointwise(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(b, name, c_in, c_out, 1, 1, 0, linear_bound(c_in))
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        k * k * c_in * c_out + c_out
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            ctx.p(self.weight),
            Some(ctx.p(self.bias)),
            self.stride,
            self.padding,
        )
    }
}

/// `[N×C]` token matrix to a `[C×h×w]` map.
pub fn tokens_to_map<'t>(x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != h * w {
        return shape_err("tokens_to_map", &s, &[h, w]);
    }
    x.permute(&[1, 0])?.reshape(&[s[1], h, w])
}

/// `[C×h×w]` map to an `[N×C]` token matrix.
pub fn map_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return shape_err("map_to_tokens", &s, &[3]);
    }
    x.reshape(&[s[0], s[1] * s[2]])?.permute(&[1, 0])
}
