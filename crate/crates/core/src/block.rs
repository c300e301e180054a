//! Transformer blocks: pre-norm residual attention followed by a pre-norm
//! residual feed-forward sublayer, on `[N×C]` tokens laid out on an `h×w`
//! grid.

use crate::attention::{AcamLayer, WindowAttention, WindowMsa};
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, LayerNorm, Linear};
use crate::params::{relu_bound, Ctx, ParamBuilder, ParamId};
use crate::tensor::Var;

/// Ghost-style feed-forward: half the hidden features come from a dense map,
/// the other half from a depthwise 3×3 pass over those on the token grid.
#[derive(Debug, Clone)]
pub struct Lpm {
    pub d: usize,
    pub primary: Linear,
    /// `[2d×1×3×3]`.
    pub ghost_weight: ParamId,
    pub ghost_bias: ParamId,
    /// `4d → d`, zero-initialized.
    pub out: Linear,
}

impl Lpm {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        let half = 2 * d;
        Lpm {
            d,
            primary: Linear::new(b, &format!("{name}.primary"), d, half, true),
            ghost_weight: b.uniform(
                format!("{name}.ghost.weight"),
                &[half, 1, 3, 3],
                relu_bound(9),
            ),
            ghost_bias: b.zeros(format!("{name}.ghost.bias"), &[half]),
            out: Linear::zeroed(b, &format!("{name}.out"), 2 * half, d, true),
        }
    }

    /// `6d² + 23d`.
    pub fn param_count(d: usize) -> usize {
        6 * d * d + 23 * d
    }

    /// Weights of the expansion stage alone: dense `d×2d` plus depthwise
    /// `2d×9`.
    pub fn expansion_weights(d: usize) -> usize {
        d * 2 * d + 2 * d * 9
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        tokens: Var<'t>,
        grid: (usize, usize),
    ) -> Result<Var<'t>> {
        let n = tokens.shape()[0];
        if n != grid.0 * grid.1 {
            return Err(Error::Usage(format!(
                "{n} tokens do not fill a {}×{} grid",
                grid.0, grid.1
            )));
        }
        let primary = self.primary.forward(ctx, tokens)?.gelu();
        let map = tokens_to_map(primary, grid.0, grid.1)?;
        let ghost = map
            .depthwise_conv2d(ctx.p(self.ghost_weight), ctx.p(self.ghost_bias))?
            .gelu();
        let hidden = Var::concat(&[primary, map_to_tokens(ghost)?], 1)?;
        self.out.forward(ctx, hidden)
    }
}

/// Standard two-layer feed-forward with 4× expansion.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub d: usize,
    pub fc1: Linear,
    /// Zero-initialized.
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        Mlp {
            d,
            fc1: Linear::new(b, &format!("{name}.fc1"), d, 4 * d, true),
            fc2: Linear::zeroed(b, &format!("{name}.fc2"), 4 * d, d, true),
        }
    }

    /// `8d² + 5d`.
    pub fn param_count(d: usize) -> usize {
        8 * d * d + 5 * d
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, tokens)?.gelu();
        self.fc2.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    Lpm(Lpm),
    Mlp(Mlp),
}

impl FeedForward {
    pub fn param_count(&self) -> usize {
        match self {
            FeedForward::Lpm(l) => Lpm::param_count(l.d),
            FeedForward::Mlp(m) => Mlp::param_count(m.d),
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        tokens: Var<'t>,
        grid: (usize, usize),
    ) -> Result<Var<'t>> {
        match self {
            FeedForward::Lpm(l) => l.forward(ctx, tokens, grid),
            FeedForward::Mlp(m) => m.forward(ctx, tokens),
        }
    }

    /// Multiply-accumulates on `n` tokens.
    pub fn macs(&self, n: usize) -> u64 {
        let n = n as u64;
        match self {
            FeedForward::Lpm(l) => {
                let d = l.d as u64;
                n * (d * 2 * d + 2 * d * 9 + 4 * d * d)
            }
            FeedForward::Mlp(m) => {
                let d = m.d as u64;
                n * 8 * d * d
            }
        }
    }
}

/// Attention and feed-forward choices shared by every block in a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    pub window: usize,
    pub heads: usize,
    pub use_acam: bool,
    pub use_lpm: bool,
    pub shared_kv: bool,
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub c: usize,
    pub grid: (usize, usize),
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c: usize,
        grid: (usize, usize),
        shifted: bool,
        opt: BlockOptions,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(b, &format!("{name}.norm1"), c);
        let attn = if opt.use_acam {
            WindowAttention::Acam(AcamLayer::new(
                b,
                &format!("{name}.attn"),
                c,
                grid,
                opt.window,
                opt.heads,
                shifted,
                opt.shared_kv,
            )?)
        } else {
            WindowAttention::Msa(WindowMsa::new(
                b,
                &format!("{name}.attn"),
                c,
                grid,
                opt.window,
                opt.heads,
                shifted,
            )?)
        };
        let norm2 = LayerNorm::new(b, &format!("{name}.norm2"), c);
        let ffn = if opt.use_lpm {
            FeedForward::Lpm(Lpm::new(b, &format!("{name}.lpm"), c))
        } else {
            FeedForward::Mlp(Mlp::new(b, &format!("{name}.mlp"), c))
        };
        Ok(TransformerBlock {
            c,
            grid,
            norm1,
            attn,
            norm2,
            ffn,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * LayerNorm::param_count(self.c) + self.attn.param_count() + self.ffn.param_count()
    }

    /// Attention sublayer output on normalized tokens, before the residual.
    pub fn attention<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let normed = self.norm1.forward(ctx, tokens)?;
        let map = tokens_to_map(normed, self.grid.0, self.grid.1)?;
        map_to_tokens(self.attn.forward(ctx, map)?)
    }

    /// `T̂ = Attn(LN(T)) + T`, then `T' = FFN(LN(T̂)) + T̂`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let mid = self.attention(ctx, tokens)?.add(tokens)?;
        let normed = self.norm2.forward(ctx, mid)?;
        self.ffn.forward(ctx, normed, self.grid)?.add(mid)
    }
}

/// A regular-window block followed by a shifted-window block.
#[derive(Debug, Clone)]
pub struct BlockPair {
    pub regular: TransformerBlock,
    pub shifted: TransformerBlock,
}

impl BlockPair {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c: usize,
        grid: (usize, usize),
        opt: BlockOptions,
    ) -> Result<Self> {
        Ok(BlockPair {
            regular: TransformerBlock::new(b, &format!("{name}.0"), c, grid, false, opt)?,
            shifted: TransformerBlock::new(b, &format!("{name}.1"), c, grid, true, opt)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let t = self.regular.forward(ctx, tokens)?;
        self.shifted.forward(ctx, t)
    }
}

/// `count` blocks on one grid; odd-indexed blocks use shifted windows.
pub fn build_stage(
    b: &mut ParamBuilder,
    name: &str,
    c: usize,
    grid: (usize, usize),
    count: usize,
    opt: BlockOptions,
) -> Result<Vec<TransformerBlock>> {
    (0..count)
        .map(|j| TransformerBlock::new(b, &format!("{name}.{j}"), c, grid, j % 2 == 1, opt))
        .collect()
}
