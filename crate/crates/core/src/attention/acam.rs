//! Four-branch adaptive complementary window attention.
//!
//! Inside every window `X ∈ C×M×M` four attentions run in parallel, each over
//! a different token/feature split of the same block:
//!
//! | branch          | tokens | features |
//! |-----------------|--------|----------|
//! | spatial         | M²     | C        |
//! | channel         | C      | M²       |
//! | channel–height  | C·M    | M (width)  |
//! | channel–width   | C·M    | M (height) |
//!
//! Their outputs are mixed by four learnable scalars and projected back to
//! `C` channels.

use std::rc::Rc;

use crate::attention::window::{relative_position_index, WindowGeometry};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Spatial,
    Channel,
    ChannelHeight,
    ChannelWidth,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::Spatial,
        Branch::Channel,
        Branch::ChannelHeight,
        Branch::ChannelWidth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Spatial => "spatial",
            Branch::Channel => "channel",
            Branch::ChannelHeight => "channel-height",
            Branch::ChannelWidth => "channel-width",
        }
    }

    /// `[nw×C×M×M]` window block to this branch's `[nw×tokens×features]`.
    pub fn to_tokens(self, x: Var<'_>) -> Result<Var<'_>> {
        let s = x.shape();
        let (nw, c, m) = (s[0], s[1], s[2]);
        match self {
            Branch::Spatial => x.reshape(&[nw, c, m * m])?.permute(&[0, 2, 1]),
            Branch::Channel => x.reshape(&[nw, c, m * m]),
            Branch::ChannelHeight => x.reshape(&[nw, c * m, m]),
            Branch::ChannelWidth => x.permute(&[0, 1, 3, 2])?.reshape(&[nw, c * m, m]),
        }
    }

    /// Inverse of [`Branch::to_tokens`].
    pub fn from_tokens(self, t: Var<'_>, c: usize, m: usize) -> Result<Var<'_>> {
        let nw = t.shape()[0];
        match self {
            Branch::Spatial => t.permute(&[0, 2, 1])?.reshape(&[nw, c, m, m]),
            Branch::Channel | Branch::ChannelHeight => t.reshape(&[nw, c, m, m]),
            Branch::ChannelWidth => t.reshape(&[nw, c, m, m])?.permute(&[0, 1, 3, 2]),
        }
    }

    /// `(tokens, features)` per window for a `c`-channel block of side `m`.
    pub fn layout(self, c: usize, m: usize) -> (usize, usize) {
        match self {
            Branch::Spatial => (m * m, c),
            Branch::Channel => (c, m * m),
            Branch::ChannelHeight | Branch::ChannelWidth => (c * m, m),
        }
    }
}

/// Feature width after the ×8 compact projection.
pub fn reduced(d: usize) -> usize {
    (d / 8).max(1)
}

/// Head count for a non-spatial branch with projected width `dp`.
pub fn branch_heads(dp: usize, heads: usize) -> usize {
    if dp >= 2 * heads && dp.is_multiple_of(heads) {
        heads
    } else {
        1
    }
}

/// Multi-head attention probabilities `[nw×H×T×T]` for `q, k` of shape
/// `[nw×T×dp]`. `bias` broadcasts from `[1|nw × 1|H × T × T]`, as does `mask`.
pub fn attention_probs<'t>(
    q: Var<'t>,
    k: Var<'t>,
    heads: usize,
    scale: f64,
    bias: Option<Var<'t>>,
    mask: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let s = q.shape();
    let (nw, t, dp) = (s[0], s[1], s[2]);
    if heads == 0 || dp % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide projected width {dp}"
        )));
    }
    let qh = split_heads(q, heads)?;
    let kt = split_heads(k, heads)?.permute(&[0, 2, 1])?;
    let mut logits = qh.bmm(kt)?.scale(scale).reshape(&[nw, heads, t, t])?;
    if let Some(b) = bias {
        logits = logits.add_bcast(b)?;
    }
    if let Some(m) = mask {
        logits = logits.add_bcast(m)?;
    }
    logits.softmax(3)
}

fn split_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    let s = x.shape();
    let (nw, t, dp) = (s[0], s[1], s[2]);
    x.reshape(&[nw, t, heads, dp / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * heads, t, dp / heads])
}

/// `softmax(QKᵀ·scale + B + mask)·V` per head, heads concatenated back to
/// `[nw×T×dp]`.
pub fn attend<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    scale: f64,
    bias: Option<Var<'t>>,
    mask: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let s = q.shape();
    let (nw, t, dp) = (s[0], s[1], s[2]);
    let p = attention_probs(q, k, heads, scale, bias, mask)?.reshape(&[nw * heads, t, t])?;
    p.bmm(split_heads(v, heads)?)?
        .reshape(&[nw, heads, t, dp / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw, t, dp])
}

/// Gathers a `[(2M−1)² × H]` relative-offset table into `[1×H×T×T]`.
pub(crate) fn gather_bias<'t>(table: Var<'t>, m: usize, heads: usize) -> Result<Var<'t>> {
    let rel = relative_position_index(m, m);
    let t = m * m;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        idx.extend(rel.iter().map(|&r| r * heads + h));
    }
    table.gather(Rc::new(idx), &[1, heads, t, t])
}

/// Parameter count of an [`AcamLayer`] of width `c` with effective window
/// side `m`.
pub fn acam_param_count(c: usize, m: usize, heads: usize, shared_kv: bool) -> usize {
    let cw = if shared_kv { reduced(c) } else { c };
    let proj = if shared_kv {
        2 * Linear::param_count(c, cw, true)
    } else {
        Branch::ALL
            .iter()
            .map(|br| {
                let d = br.layout(c, m).1;
                let dp = reduced(d);
                3 * Linear::param_count(d, dp, true) + Linear::param_count(dp, d, true)
            })
            .sum()
    };
    proj + (2 * m - 1) * (2 * m - 1) * heads + cw * cw + 4 + Conv2d::param_count(cw, c, 1)
}

/// Per-branch Q/K/V and output maps.
#[derive(Debug, Clone)]
pub struct BranchProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub enum Projections {
    /// Independent Q/K/V per branch, each reducing the branch's feature axis.
    PerBranch(Vec<BranchProj>),
    /// One K and one V map `C → C/8`; every branch attends in the reduced
    /// block with `Q = K`.
    SharedKv { k: Linear, v: Linear },
}

#[derive(Debug, Clone)]
pub struct AcamLayer {
    pub c: usize,
    pub heads: usize,
    pub geom: WindowGeometry,
    pub proj: Projections,
    /// `[(2m−1)² × H]`.
    pub bias_spatial: ParamId,
    /// `[C'×C']` over the channel tokens, where `C'` is the attended width.
    pub bias_channel: ParamId,
    pub lambda: ParamId,
    /// `C' → C` output map, zero-initialized.
    pub out: Conv2d,
    /// Branches that contribute to the output.
    pub active: [bool; 4],
}

impl AcamLayer {
    /// Builds a layer for a fixed `h×w` token grid.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c: usize,
        grid: (usize, usize),
        window: usize,
        heads: usize,
        shifted: bool,
        shared_kv: bool,
    ) -> Result<Self> {
        let geom = WindowGeometry::new(grid.0, grid.1, window, shifted);
        let m = geom.m;
        let cr = reduced(c);
        if heads == 0 || !cr.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads must divide the reduced width {cr} of {c} channels"
            )));
        }
        let proj = if shared_kv {
            Projections::SharedKv {
                k: Linear::new(b, &format!("{name}.k"), c, cr, true),
                v: Linear::new(b, &format!("{name}.v"), c, cr, true),
            }
        } else {
            let per = Branch::ALL
                .iter()
                .map(|br| {
                    let (_, d) = br.layout(c, m);
                    let dp = reduced(d);
                    let n = format!("{name}.{}", br.name());
                    BranchProj {
                        q: Linear::new(b, &format!("{n}.q"), d, dp, true),
                        k: Linear::new(b, &format!("{n}.k"), d, dp, true),
                        v: Linear::new(b, &format!("{n}.v"), d, dp, true),
                        out: Linear::new(b, &format!("{n}.out"), dp, d, true),
                    }
                })
                .collect();
            Projections::PerBranch(per)
        };
        let cw = if shared_kv { cr } else { c };
        let side = 2 * m - 1;
        Ok(AcamLayer {
            c,
            heads,
            geom,
            proj,
            bias_spatial: b.zeros(format!("{name}.bias_spatial"), &[side * side, heads]),
            bias_channel: b.zeros(format!("{name}.bias_channel"), &[cw, cw]),
            lambda: b.fill(format!("{name}.lambda"), &[4], 0.25),
            out: Conv2d::new(b, &format!("{name}.out"), cw, c, 1, 1, 0, 0.0),
            active: [true; 4],
        })
    }

    pub fn shared_kv(&self) -> bool {
        matches!(self.proj, Projections::SharedKv { .. })
    }

    /// Channel width the branches attend over.
    pub fn attended_width(&self) -> usize {
        if self.shared_kv() {
            reduced(self.c)
        } else {
            self.c
        }
    }

    /// `(tokens, projected width, heads)` of one branch.
    pub fn branch_dims(&self, br: Branch) -> (usize, usize, usize) {
        let (t, d) = br.layout(self.attended_width(), self.geom.m);
        let dp = if self.shared_kv() { d } else { reduced(d) };
        let heads = match br {
            Branch::Spatial => self.heads,
            _ => branch_heads(dp, self.heads),
        };
        (t, dp, heads)
    }

    pub fn param_count(&self) -> usize {
        acam_param_count(self.c, self.geom.m, self.heads, self.shared_kv())
    }

    fn check_grid(&self, x: Var<'_>) -> Result<()> {
        let s = x.shape();
        if s != [self.c, self.geom.h, self.geom.w] {
            return Err(Error::Shape {
                op: "acam",
                lhs: s,
                rhs: vec![self.c, self.geom.h, self.geom.w],
            });
        }
        Ok(())
    }

    fn branch_windows<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Vec<Option<Var<'t>>>> {
        self.check_grid(x)?;
        let m = self.geom.m;
        let win = self.geom.split(x)?;
        let mask = self.geom.mask()?.map(|t| {
            let s = t.shape().to_vec();
            ctx.constant(t).reshape(&[s[0], 1, s[1], s[2]])
        });
        let mask = mask.transpose()?;
        let cw = self.attended_width();
        let (kmap, vmap) = match &self.proj {
            Projections::SharedKv { k, v } => {
                let tok = Branch::Spatial.to_tokens(win)?;
                let km = Branch::Spatial.from_tokens(k.forward(ctx, tok)?, cw, m)?;
                let vm = Branch::Spatial.from_tokens(v.forward(ctx, tok)?, cw, m)?;
                (Some(km), Some(vm))
            }
            Projections::PerBranch(_) => (None, None),
        };
        let mut outs = Vec::with_capacity(4);
        for (i, br) in Branch::ALL.into_iter().enumerate() {
            if !self.active[i] {
                outs.push(None);
                continue;
            }
            let (_, dp, heads) = self.branch_dims(br);
            let scale = 1.0 / (dp as f64).sqrt();
            let (bias, mask) = match br {
                Branch::Spatial => (
                    Some(gather_bias(ctx.p(self.bias_spatial), m, self.heads)?),
                    mask,
                ),
                Branch::Channel => (
                    Some(ctx.p(self.bias_channel).reshape(&[1, 1, cw, cw])?),
                    None,
                ),
                _ => (None, None),
            };
            let out = match &self.proj {
                Projections::PerBranch(per) => {
                    let p = &per[i];
                    let tok = br.to_tokens(win)?;
                    let (q, k, v) = (
                        p.q.forward(ctx, tok)?,
                        p.k.forward(ctx, tok)?,
                        p.v.forward(ctx, tok)?,
                    );
                    let o = attend(q, k, v, heads, scale, bias, mask)?;
                    br.from_tokens(p.out.forward(ctx, o)?, cw, m)?
                }
                Projections::SharedKv { .. } => {
                    let k = br.to_tokens(kmap.unwrap())?;
                    let v = br.to_tokens(vmap.unwrap())?;
                    br.from_tokens(attend(k, k, v, heads, scale, bias, mask)?, cw, m)?
                }
            };
            outs.push(Some(out));
        }
        Ok(outs)
    }

    /// One branch's output before mixing, as a `[C'×h×w]` map.
    pub fn branch_output<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, br: Branch) -> Result<Var<'t>> {
        let i = Branch::ALL.iter().position(|&b| b == br).unwrap();
        let outs = self.branch_windows(ctx, x)?;
        let o = outs[i].ok_or_else(|| Error::Usage(format!("branch {} is disabled", br.name())))?;
        self.geom.merge(o)
    }

    /// `Σ λᵢ·Outᵢ` over active branches, as a `[C'×h×w]` map.
    pub fn fused<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let outs = self.branch_windows(ctx, x)?;
        let lambda = ctx.p(self.lambda);
        let mut acc: Option<Var<'t>> = None;
        for (i, o) in outs.into_iter().enumerate() {
            let Some(o) = o else { continue };
            let li = lambda.slice(0, i, 1)?.reshape(&[1, 1, 1, 1])?;
            let term = o.mul_bcast(li)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        let acc = acc.ok_or_else(|| Error::Config("all attention branches disabled".into()))?;
        self.geom.merge(acc)
    }

    /// `[C×h×w] → [C×h×w]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.fused(ctx, x)?;
        self.out.forward(ctx, f)
    }
}
