//! Named parameter storage shared by every layer, plus the per-forward
//! context that binds parameters onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradReport, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters, by enumerating every tensor.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of the parameters whose names start with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Per-parameter gradients recorded on `tape`, in store order. Parameters
    /// not touched by the sweep come back as `None`.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        (0..self.params.len())
            .map(|i| grads.param(tape, i).map(<[f64]>::to_vec))
            .collect()
    }

    /// Adds `scale · g` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>], scale: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            let buf = p.value.grad_mut();
            if let Some(g) = g {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Creates parameters with deterministic initial values.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(
            self.store.find(&name).is_none(),
            "duplicate parameter {name}"
        );
        self.store.params.push(Param { name, value });
        ParamId(self.store.params.len() - 1)
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("param shape");
        self.add(name.into(), t)
    }

    pub fn fill(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name.into(), Tensor::full(shape, v))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.fill(name, shape, 0.0)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Variance-preserving bound for a linear map with `fan_in` inputs.
pub fn linear_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// He bound for maps followed by a ReLU.
pub fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Binds a parameter store onto one tape for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
    /// When false, parameters enter the tape as constants and no backward
    /// closures are recorded for them.
    pub train: bool,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx {
            tape,
            store,
            train: true,
        }
    }

    pub fn inference(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx {
            tape,
            store,
            train: false,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let fresh = || {
            let v = &self.store.get(id).value;
            Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("param")
        };
        if self.train {
            self.tape.param_leaf(id.0, fresh)
        } else {
            self.tape.param_const(id.0, fresh)
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// Compares tape gradients of a scalar loss with respect to parameter `id`
/// against central differences, probing the listed flat coordinates. The error
/// measure matches [`crate::tensor::grad_check`].
pub fn param_grad_check<F>(
    store: &ParamStore,
    id: ParamId,
    h: f64,
    tol: f64,
    coords: &[usize],
    f: F,
) -> Result<GradReport>
where
    F: for<'a> Fn(&Ctx<'a>) -> Result<Var<'a>>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Usage(format!(
            "finite-difference step {h} outside [1e-6, 1e-2]"
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&Ctx::inference(&tape, s))?;
        Ok(out.item())
    };
    let analytic = {
        let tape = Tape::new();
        let out = f(&Ctx::new(&tape, store))?;
        let g = tape.backward(out)?;
        g.param(&tape, id.0)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()])
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tol,
        checked: coords.len(),
    };
    let mut probe = store.clone();
    for &i in coords {
        let orig = probe.get(id).value.data()[i];
        probe.get_mut(id).value.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ad = analytic[i];
        let err = (ad - num).abs() / 1f64.max(ad.abs()).max(num.abs());
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
            report.analytic = ad;
            report.numeric = num;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic() {
        let mk = || {
            let mut b = ParamBuilder::new(3);
            b.uniform("a", &[4, 4], 0.5);
            b.zeros("b", &[4]);
            b.finish()
        };
        assert_eq!(mk(), mk());
        let s = mk();
        assert_eq!(s.numel(), 20);
        assert_eq!(s.numel_with_prefix("a"), 16);
        assert!(s
            .get(ParamId(0))
            .value
            .data()
            .iter()
            .all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn grads_flow_back_into_store() {
        let mut b = ParamBuilder::new(0);
        let w = b.fill("w", &[2], 3.0);
        let unused = b.fill("u", &[1], 1.0);
        let mut store = b.finish();
        let grads = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let loss = ctx.p(w).square().sum();
            let g = tape.backward(loss).unwrap();
            store.collect_grads(&tape, &g)
        };
        assert!(grads[unused.index()].is_none());
        store.accumulate(&grads, 0.5);
        assert_eq!(store.get(w).value.grad().unwrap(), &[3.0, 3.0]);
        assert_eq!(store.get(unused).value.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn param_check_on_cubic() {
        let mut b = ParamBuilder::new(0);
        let w = b.uniform("w", &[5], 1.0);
        let store = b.finish();
        let rep = param_grad_check(&store, w, 1e-4, 1e-7, &[0, 2, 4], |ctx| {
            let p = ctx.p(w);
            Ok(p.square().mul(p)?.sum())
        })
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.checked, 3);
    }
}
