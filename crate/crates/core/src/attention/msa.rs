//! Plain (shifted-)window multi-head self-attention over full-width tokens.

use crate::attention::acam::{attend, gather_bias};
use crate::attention::window::WindowGeometry;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Var;

/// Parameter count of a [`WindowMsa`] of width `c` with effective window
/// side `m`.
pub fn msa_param_count(c: usize, m: usize, heads: usize) -> usize {
    let side = 2 * m - 1;
    3 * Linear::param_count(c, c, true) + side * side * heads + Conv2d::param_count(c, c, 1)
}

#[derive(Debug, Clone)]
pub struct WindowMsa {
    pub c: usize,
    pub heads: usize,
    pub geom: WindowGeometry,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub bias: ParamId,
    /// Zero-initialized output map.
    pub out: Conv2d,
}

impl WindowMsa {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c: usize,
        grid: (usize, usize),
        window: usize,
        heads: usize,
        shifted: bool,
    ) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {c}"
            )));
        }
        let geom = WindowGeometry::new(grid.0, grid.1, window, shifted);
        let side = 2 * geom.m - 1;
        Ok(WindowMsa {
            c,
            heads,
            geom,
            q: Linear::new(b, &format!("{name}.q"), c, c, true),
            k: Linear::new(b, &format!("{name}.k"), c, c, true),
            v: Linear::new(b, &format!("{name}.v"), c, c, true),
            bias: b.zeros(format!("{name}.bias_spatial"), &[side * side, heads]),
            out: Conv2d::new(b, &format!("{name}.out"), c, c, 1, 1, 0, 0.0),
        })
    }

    pub fn param_count(&self) -> usize {
        msa_param_count(self.c, self.geom.m, self.heads)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s != [self.c, self.geom.h, self.geom.w] {
            return Err(Error::Shape {
                op: "window msa",
                lhs: s,
                rhs: vec![self.c, self.geom.h, self.geom.w],
            });
        }
        let m = self.geom.m;
        let nw = self.geom.num_windows();
        let win = self.geom.split(x)?;
        let tok = win.reshape(&[nw, self.c, m * m])?.permute(&[0, 2, 1])?;
        let (q, k, v) = (
            self.q.forward(ctx, tok)?,
            self.k.forward(ctx, tok)?,
            self.v.forward(ctx, tok)?,
        );
        let mask = match self.geom.mask()? {
            Some(t) => Some(ctx.constant(t).reshape(&[nw, 1, m * m, m * m])?),
            None => None,
        };
        let bias = gather_bias(ctx.p(self.bias), m, self.heads)?;
        let scale = 1.0 / ((self.c / self.heads) as f64).sqrt();
        let o = attend(q, k, v, self.heads, scale, Some(bias), mask)?;
        let o = o.permute(&[0, 2, 1])?.reshape(&[nw, self.c, m, m])?;
        self.out.forward(ctx, self.geom.merge(o)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_grad_check;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_count_and_gradients() {
        let mut b = ParamBuilder::new(1);
        let l = WindowMsa::new(&mut b, "w", 8, (8, 8), 4, 2, true).unwrap();
        let mut store = b.finish();
        assert_eq!(store.numel(), l.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in store.iter_mut() {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = Tensor::new(
            vec![8, 8, 8],
            (0..512).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        assert_eq!(
            l.forward(&ctx, ctx.constant(x.clone())).unwrap().shape(),
            vec![8, 8, 8]
        );
        for id in store.ids() {
            let n = store.get(id).value.numel();
            let coords: Vec<usize> = (0..n).step_by(1 + n / 10).collect();
            let rep = param_grad_check(&store, id, 1e-4, 1e-4, &coords, |ctx| {
                Ok(l.forward(ctx, ctx.constant(x.clone()))?.square().sum())
            })
            .unwrap();
            assert!(rep.passed(), "{}: {rep:?}", store.get(id).name);
        }
        assert!(WindowMsa::new(&mut ParamBuilder::new(0), "w", 8, (8, 8), 4, 3, false).is_err());
    }
}
