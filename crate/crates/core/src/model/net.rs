//! The dual-branch network.
//!
//! Both branches run seven stages on matching grids: three encoder stages
//! that halve the grid and double the width, a bottleneck, and three decoder
//! stages that mirror them. At each decoder stage every branch merges its
//! own skip connection, then mixes in the other branch's merged feature.

use crate::block::{build_stage, BlockOptions, TransformerBlock};
use crate::ddconv::DDConvLayer;
use crate::error::{Error, Result};
use crate::model::config::{TecNetConfig, STAGES};
use crate::nn::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear};
use crate::params::{linear_bound, relu_bound, Ctx, ParamBuilder, ParamStore};
use crate::tensor::Var;

/// 3×3 convolution of the CNN branch: dynamic deformable or plain.
#[derive(Debug, Clone)]
pub enum ConvUnit {
    Deform(DDConvLayer),
    Plain(Conv2d),
}

impl ConvUnit {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &TecNetConfig,
    ) -> Result<Self> {
        Ok(if cfg.toggles.use_ddconv {
            ConvUnit::Deform(DDConvLayer::new(b, name, c_in, c_out, 3, cfg.n_kernels)?)
        } else {
            ConvUnit::Plain(Conv2d::new(
                b,
                name,
                c_in,
                c_out,
                3,
                1,
                1,
                relu_bound(9 * c_in),
            ))
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, cfg: &TecNetConfig) -> usize {
        if cfg.toggles.use_ddconv {
            DDConvLayer::param_count(c_in, c_out, 3, cfg.n_kernels)
        } else {
            Conv2d::param_count(c_in, c_out, 3)
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            ConvUnit::Deform(l) => l.forward(ctx, x),
            ConvUnit::Plain(c) => c.forward(ctx, x),
        }
    }
}

/// Halves the grid and doubles the width of `[N×C]` tokens.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(b, &format!("{name}.norm"), 4 * c),
            reduce: Linear::new(b, &format!("{name}.reduce"), 4 * c, 2 * c, false),
        }
    }

    pub fn param_count(c: usize) -> usize {
        LayerNorm::param_count(4 * c) + Linear::param_count(4 * c, 2 * c, false)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>, grid: usize) -> Result<Var<'t>> {
        let c = tokens.shape()[1];
        let g2 = grid / 2;
        // token (y, x) of the coarse grid gathers its 2×2 block, offsets
        // ordered (dx, dy)
        let merged = tokens
            .reshape(&[g2, 2, g2, 2, c])?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[g2 * g2, 4 * c])?;
        let normed = self.norm.forward(ctx, merged)?;
        self.reduce.forward(ctx, normed)
    }
}

/// Doubles the grid and halves the width of `[N×C]` tokens.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
}

impl PatchExpand {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        PatchExpand {
            expand: Linear::new(b, &format!("{name}.expand"), c, 2 * c, false),
            norm: LayerNorm::new(b, &format!("{name}.norm"), c / 2),
        }
    }

    pub fn param_count(c: usize) -> usize {
        Linear::param_count(c, 2 * c, false) + LayerNorm::param_count(c / 2)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>, grid: usize) -> Result<Var<'t>> {
        let c = tokens.shape()[1];
        let half = c / 2;
        let wide = self.expand.forward(ctx, tokens)?;
        let fine = wide
            .reshape(&[grid, grid, 2, 2, half])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[4 * grid * grid, half])?;
        self.norm.forward(ctx, fine)
    }
}

#[derive(Debug, Clone)]
pub struct CnnBranch {
    pub stem: Conv2d,
    /// One unit per stage.
    pub body: Vec<ConvUnit>,
    /// Transition into stage `i + 1`: pooled down for the encoder, upsampled
    /// for the decoder.
    pub transition: Vec<ConvUnit>,
    /// Decoder skip merges, stages 4..=6.
    pub skip: Vec<Conv2d>,
    /// Cross-branch fusion, stages 4..=6.
    pub fuse: Vec<Conv2d>,
    pub head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct TransformerBranch {
    pub embed: Conv2d,
    pub stages: Vec<Vec<TransformerBlock>>,
    pub merge: Vec<PatchMerge>,
    pub expand: Vec<PatchExpand>,
    pub skip: Vec<Conv2d>,
    pub fuse: Vec<Conv2d>,
    pub norm: LayerNorm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct TecNet {
    pub cfg: TecNetConfig,
    pub cnn: CnnBranch,
    pub trans: TransformerBranch,
    /// Fuses both final features into the combined prediction.
    pub tec_head: Conv2d,
}

/// Logit maps `[classes×H×W]` and per-stage `[C_i×h_i×w_i]` features.
#[derive(Debug, Clone)]
pub struct Outputs<'t> {
    pub y_cnn: Var<'t>,
    pub y_trans: Var<'t>,
    pub y_tec: Var<'t>,
    pub cnn_stages: Vec<Var<'t>>,
    pub trans_stages: Vec<Var<'t>>,
}

impl TecNet {
    /// Validates `cfg` and builds the network with seeded parameters.
    pub fn build(cfg: &TecNetConfig, seed: u64) -> Result<(TecNet, ParamStore)> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        let net = TecNet::new(&mut b, cfg)?;
        Ok((net, b.finish()))
    }

    pub fn new(b: &mut ParamBuilder, cfg: &TecNetConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let w = |i| cfg.stage_width(i);
        let g = |i| cfg.stage_grid(i);

        let stem = Conv2d::new(b, "cnn.stem", 1, d, p, p, 0, relu_bound(p * p));
        let mut body = Vec::with_capacity(STAGES);
        let mut transition = Vec::with_capacity(STAGES - 1);
        let (mut cskip, mut cfuse) = (Vec::new(), Vec::new());
        for i in 0..STAGES {
            if i > 0 {
                transition.push(ConvUnit::new(
                    b,
                    &format!("cnn.trans{i}"),
                    w(i - 1),
                    w(i),
                    cfg,
                )?);
            }
            if i > 3 {
                let c = w(i);
                cskip.push(Conv2d::new(
                    b,
                    &format!("cnn.skip{i}"),
                    2 * c,
                    c,
                    1,
                    1,
                    0,
                    relu_bound(2 * c),
                ));
                cfuse.push(Conv2d::pointwise(b, &format!("cnn.fuse{i}"), 2 * c, c));
            }
            body.push(ConvUnit::new(b, &format!("cnn.stage{i}"), w(i), w(i), cfg)?);
        }
        let chead = Conv2d::pointwise(b, "cnn.head", d, cfg.num_classes);
        let cnn = CnnBranch {
            stem,
            body,
            transition,
            skip: cskip,
            fuse: cfuse,
            head: chead,
        };

        let embed = Conv2d::new(b, "trans.embed", 1, d, p, p, 0, linear_bound(p * p));
        let mut stages = Vec::with_capacity(STAGES);
        let (mut merge, mut expand, mut tskip, mut tfuse) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..STAGES {
            let c = w(i);
            if (1..=3).contains(&i) {
                merge.push(PatchMerge::new(b, &format!("trans.merge{i}"), w(i - 1)));
            }
            if i > 3 {
                expand.push(PatchExpand::new(b, &format!("trans.expand{i}"), w(i - 1)));
                tskip.push(Conv2d::pointwise(b, &format!("trans.skip{i}"), 2 * c, c));
                tfuse.push(Conv2d::pointwise(b, &format!("trans.fuse{i}"), 2 * c, c));
            }
            let opt = BlockOptions {
                window: cfg.window_size,
                heads: cfg.heads[i],
                use_acam: cfg.toggles.use_acam,
                use_lpm: cfg.toggles.use_lpm,
                shared_kv: cfg.toggles.shared_kv,
            };
            stages.push(build_stage(
                b,
                &format!("trans.stage{i}"),
                c,
                (g(i), g(i)),
                cfg.layer_numbers[i],
                opt,
            )?);
        }
        let norm = LayerNorm::new(b, "trans.norm", d);
        let thead = Linear::new(b, "trans.head", d, cfg.num_classes, true);
        let trans = TransformerBranch {
            embed,
            stages,
            merge,
            expand,
            skip: tskip,
            fuse: tfuse,
            norm,
            head: thead,
        };
        let tec_head = Conv2d::pointwise(b, "tec.head", 2 * d, cfg.num_classes);
        Ok(TecNet {
            cfg: cfg.clone(),
            cnn,
            trans,
            tec_head,
        })
    }

    fn run_blocks<'t>(
        ctx: &Ctx<'t>,
        blocks: &[TransformerBlock],
        mut t: Var<'t>,
    ) -> Result<Var<'t>> {
        for blk in blocks {
            t = blk.forward(ctx, t)?;
        }
        Ok(t)
    }

    /// `image` is `[1×H×W]` with `H = W = input_size`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: Var<'t>) -> Result<Outputs<'t>> {
        let cfg = &self.cfg;
        let n = cfg.input_size;
        if image.shape() != [1, n, n] {
            return Err(Error::Shape {
                op: "tecnet input",
                lhs: image.shape(),
                rhs: vec![1, n, n],
            });
        }
        let g = |i| cfg.stage_grid(i);
        let (cnn, tr) = (&self.cnn, &self.trans);
        let mut cnn_stages = Vec::with_capacity(STAGES);
        let mut trans_stages = Vec::with_capacity(STAGES);

        let mut c = cnn.stem.forward(ctx, image)?.relu();
        c = cnn.body[0].forward(ctx, c)?.relu();
        let mut t = map_to_tokens(tr.embed.forward(ctx, image)?)?;
        t = Self::run_blocks(ctx, &tr.stages[0], t)?;
        cnn_stages.push(c);
        trans_stages.push(tokens_to_map(t, g(0), g(0))?);

        for i in 1..=3 {
            c = cnn.transition[i - 1].forward(ctx, c.avg_pool2()?)?.relu();
            c = cnn.body[i].forward(ctx, c)?.relu();
            t = tr.merge[i - 1].forward(ctx, t, g(i - 1))?;
            t = Self::run_blocks(ctx, &tr.stages[i], t)?;
            cnn_stages.push(c);
            trans_stages.push(tokens_to_map(t, g(i), g(i))?);
        }

        for i in 4..STAGES {
            let j = i - 4;
            let mirror = STAGES - 1 - i;
            let cu = cnn.transition[i - 1]
                .forward(ctx, c.upsample_nearest2()?)?
                .relu();
            let cs = cnn.skip[j]
                .forward(ctx, Var::concat(&[cu, cnn_stages[mirror]], 0)?)?
                .relu();
            let tu = tokens_to_map(tr.expand[j].forward(ctx, t, g(i - 1))?, g(i), g(i))?;
            let ts = tr.skip[j].forward(ctx, Var::concat(&[tu, trans_stages[mirror]], 0)?)?;
            let cf = cnn.fuse[j].forward(ctx, Var::concat(&[cs, ts], 0)?)?;
            let tf = tr.fuse[j].forward(ctx, Var::concat(&[ts, cs], 0)?)?;
            c = cnn.body[i].forward(ctx, cf)?.relu();
            t = Self::run_blocks(ctx, &tr.stages[i], map_to_tokens(tf)?)?;
            cnn_stages.push(c);
            trans_stages.push(tokens_to_map(t, g(i), g(i))?);
        }

        let gl = g(STAGES - 1);
        let tn = tokens_to_map(tr.norm.forward(ctx, t)?, gl, gl)?;
        let y_cnn = cnn.head.forward(ctx, c)?.resize_bilinear(n, n)?;
        let y_trans = tokens_to_map(tr.head.forward(ctx, map_to_tokens(tn)?)?, gl, gl)?
            .resize_bilinear(n, n)?;
        let y_tec = self
            .tec_head
            .forward(ctx, Var::concat(&[c, tn], 0)?)?
            .resize_bilinear(n, n)?;
        Ok(Outputs {
            y_cnn,
            y_trans,
            y_tec,
            cnn_stages,
            trans_stages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![1, n, n],
            (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn nano_outputs_and_stage_alignment() {
        let cfg = TecNetConfig::nano();
        let (net, store) = TecNet::build(&cfg, 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let out = net.forward(&ctx, ctx.constant(image(64, 2))).unwrap();
        for y in [out.y_cnn, out.y_trans, out.y_tec] {
            assert_eq!(y.shape(), vec![1, 64, 64]);
            assert!(y.value().is_finite());
        }
        for i in 0..STAGES {
            let s = out.cnn_stages[i].shape();
            assert_eq!(s, out.trans_stages[i].shape());
            assert_eq!(
                s,
                vec![cfg.stage_width(i), cfg.stage_grid(i), cfg.stage_grid(i)]
            );
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = TecNetConfig::nano();
        let run = || {
            let (net, store) = TecNet::build(&cfg, 5).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::inference(&tape, &store);
            let y = net
                .forward(&ctx, ctx.constant(image(64, 3)))
                .unwrap()
                .y_tec
                .value();
            y.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_toggle_combination_runs() {
        for bits in 0..8u8 {
            let mut cfg = TecNetConfig::nano();
            cfg.toggles.use_ddconv = bits & 1 != 0;
            cfg.toggles.use_acam = bits & 2 != 0;
            cfg.toggles.use_lpm = bits & 4 != 0;
            let (net, store) = TecNet::build(&cfg, 0).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::inference(&tape, &store);
            let out = net.forward(&ctx, ctx.constant(image(64, 4))).unwrap();
            assert!(out.y_tec.value().is_finite());
        }
    }

    #[test]
    fn patch_embedding_examples() {
        let cfg = TecNetConfig::nano();
        let (net, mut store) = TecNet::build(&cfg, 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let e = net
            .trans
            .embed
            .forward(&ctx, ctx.constant(Tensor::full(&[1, 64, 64], 0.3)))
            .unwrap();
        assert_eq!(e.shape(), vec![16, 16, 16]);
        for ch in e.value().data().chunks(256) {
            assert!(ch.iter().all(|&v| v == ch[0]));
        }
        let bias = net.trans.embed.bias;
        store.get_mut(bias).value = Tensor::zeros(&[16]);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let z = net
            .trans
            .embed
            .forward(&ctx, ctx.constant(Tensor::zeros(&[1, 64, 64])))
            .unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_expand_shapes() {
        let mut b = ParamBuilder::new(0);
        let m = PatchMerge::new(&mut b, "m", 16);
        let e = PatchExpand::new(&mut b, "e", 32);
        let store = b.finish();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = ctx.constant(
            Tensor::new(vec![256, 16], (0..4096).map(|i| (i as f64).sin()).collect()).unwrap(),
        );
        let down = m.forward(&ctx, x, 16).unwrap();
        assert_eq!(down.shape(), vec![64, 32]);
        assert_eq!(e.forward(&ctx, down, 8).unwrap().shape(), vec![256, 16]);
    }

    #[test]
    fn fusion_with_half_identity_returns_input() {
        let mut b = ParamBuilder::new(0);
        let f = Conv2d::pointwise(&mut b, "f", 8, 4);
        let mut store = b.finish();
        let mut w = vec![0.0; 4 * 8];
        for o in 0..4 {
            w[o * 8 + o] = 0.5;
            w[o * 8 + 4 + o] = 0.5;
        }
        store.get_mut(f.weight).value = Tensor::new(vec![4, 8, 1, 1], w).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = ctx.constant(image(6, 9).reshaped(&[4, 3, 3]).unwrap());
        let y = f.forward(&ctx, Var::concat(&[x, x], 0).unwrap()).unwrap();
        assert!(y.value().max_abs_diff(&x.value()) < 1e-15);
    }
}
