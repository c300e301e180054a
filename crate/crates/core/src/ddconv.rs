//! Dynamic deformable convolution.
//!
//! Each output position samples the input at the `k×k` grid of taps displaced
//! by learned per-position offsets. The kernel applied there is a convex
//! combination of `n` candidate kernels, mixed by coefficients that attend
//! over the pooled input.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{relu_bound, Ctx, ParamBuilder, ParamId};
use crate::tensor::Var;

#[derive(Debug, Clone)]
pub struct DDConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub n: usize,
    pub tau: f64,
    /// `[n × C_out × C_in × k × k]`.
    pub kernels: ParamId,
    pub bias: ParamId,
    /// `C_in → 2k²` offset predictor, zero-initialized.
    pub offset: Conv2d,
    /// Pooled input to kernel logits.
    pub coeff: Linear,
}

impl DDConvLayer {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        n: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) || n == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!(
                "ddconv needs odd k and positive widths, got k={k} n={n} c_in={c_in} c_out={c_out}"
            )));
        }
        // Uniform mixing averages n independent kernels, so widen the draw to
        // keep the mixed kernel's variance at the single-kernel level.
        let bound = relu_bound(c_in * k * k) * (n as f64).sqrt();
        let kernels = b.uniform(format!("{name}.kernels"), &[n, c_out, c_in, k, k], bound);
        let bias = b.zeros(format!("{name}.bias"), &[c_out]);
        let offset = Conv2d::new(
            b,
            &format!("{name}.offset"),
            c_in,
            2 * k * k,
            k,
            1,
            k / 2,
            0.0,
        );
        let coeff = Linear::new(b, &format!("{name}.coeff"), c_in, n, true);
        Ok(DDConvLayer {
            c_in,
            c_out,
            k,
            n,
            tau: 1.0,
            kernels,
            bias,
            offset,
            coeff,
        })
    }

    pub fn with_temperature(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize, n: usize) -> usize {
        n * c_out * c_in * k * k
            + Conv2d::param_count(c_in, 2 * k * k, k)
            + Linear::param_count(c_in, n, true)
            + c_out
    }

    fn check_input(&self, x: Var<'_>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.c_in {
            return Err(Error::Config(format!(
                "ddconv expects {} input channels, got shape {s:?}",
                self.c_in
            )));
        }
        Ok(())
    }

    /// Per-position `(Δy, Δx)` for every tap: `[2k² × H × W]`.
    pub fn predict_offsets<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(x)?;
        self.offset.forward(ctx, x)
    }

    /// Mixing coefficients `α = softmax(linear(GAP(x)) / τ)`, shape `[n]`.
    pub fn kernel_attention<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(x)?;
        let s = x.shape();
        let pooled = x
            .reshape(&[s[0], s[1] * s[2]])?
            .mean_last()
            .reshape(&[1, s[0]])?;
        let logits = self.coeff.forward(ctx, pooled)?.scale(1.0 / self.tau);
        logits.softmax(1)?.reshape(&[self.n])
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let offsets = self.predict_offsets(ctx, x)?;
        let alpha = self.kernel_attention(ctx, x)?;
        ddconv_apply(
            x,
            offsets,
            alpha,
            ctx.p(self.kernels),
            ctx.p(self.bias),
            self.k,
        )
    }
}

/// Deformable convolution with a mixed kernel, same padding, stride 1.
///
/// `x` is `[C×H×W]`, `offsets` `[2k²×H×W]`, `alpha` `[n]`, `kernels`
/// `[n×O×C×k×k]` and `bias` `[O]`. Returns `[O×H×W]`.
pub fn ddconv_apply<'t>(
    x: Var<'t>,
    offsets: Var<'t>,
    alpha: Var<'t>,
    kernels: Var<'t>,
    bias: Var<'t>,
    k: usize,
) -> Result<Var<'t>> {
    let xs = x.shape();
    let ks = kernels.shape();
    if xs.len() != 3 || ks.len() != 5 || ks[2] != xs[0] || ks[3] != k || ks[4] != k {
        return shape_err("ddconv kernels", &ks, &xs);
    }
    let (n, o) = (ks[0], ks[1]);
    if alpha.shape() != [n] || bias.shape() != [o] {
        return shape_err("ddconv alpha/bias", &alpha.shape(), &[n, o]);
    }
    let ckk = xs[0] * k * k;
    let mixed = alpha
        .reshape(&[1, n])?
        .matmul(kernels.reshape(&[n, o * ckk])?)?
        .reshape(&[o, ckk])?;
    let cols = x.deform_im2col(offsets, k, k, k / 2)?;
    mixed
        .matmul(cols)?
        .add_bcast(bias.reshape(&[o, 1])?)?
        .reshape(&[o, xs[1], xs[2]])
}
