use std::rc::Rc;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{strides, Tensor, Var};
use crate::error::{shape_err, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn mk(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        shape,
        data,
        grad: None,
    }
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `src_shape` (same rank, extents equal or 1) it broadcasts from.
fn broadcast_map(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let src_strides = strides(src_shape);
    let eff: Vec<usize> = src_shape
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Source flat index for each output element of a permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_shape_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_shape_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_shape_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let data: Vec<f64> = x.data.iter().map(|&v| f(v)).collect();
        let y = Rc::new(data.clone());
        let out = mk(x.shape.clone(), data);
        self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data.iter().zip(y.iter()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        if a.shape != b.shape {
            return shape_err(op, &a.shape, &b.shape);
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Ok(self.tape.push(
            mk(a.shape.clone(), data),
            &[self, other],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        Ok(self.tape.push(
            mk(a.shape.clone(), data),
            &[self, other],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        Ok(self.tape.push(
            mk(a.shape.clone(), data),
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(&b.data).map(|(g, y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(&a.data).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "div")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x / y).collect();
        Ok(self.tape.push(
            mk(a.shape.clone(), data),
            &[self, other],
            Box::new(move |g, _| {
                let ga = g.iter().zip(&b.data).map(|(g, y)| g / y).collect();
                let gb = g
                    .iter()
                    .zip(a.data.iter().zip(&b.data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    fn check_broadcast(self, b: &[usize], op: &'static str) -> Result<Vec<usize>> {
        let a = self.shape();
        if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
            return shape_err(op, &a, b);
        }
        Ok(a)
    }

    /// `self + other` where `other` has the same rank and every extent either
    /// matches or is 1.
    pub fn add_bcast(self, other: Var<'t>) -> Result<Var<'t>> {
        let b = other.value();
        let shape = self.check_broadcast(&b.shape, "add_bcast")?;
        let a = self.value();
        let map = broadcast_map(&shape, &b.shape);
        let data = a
            .data
            .iter()
            .zip(&map)
            .map(|(x, &j)| x + b.data[j])
            .collect();
        let nb = b.numel();
        Ok(self.tape.push(
            mk(shape, data),
            &[self, other],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; nb];
                    for (gi, &j) in g.iter().zip(&map) {
                        gb[j] += gi;
                    }
                    gb
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    /// Broadcast multiply, same rules as [`Var::add_bcast`].
    pub fn mul_bcast(self, other: Var<'t>) -> Result<Var<'t>> {
        let b = other.value();
        let shape = self.check_broadcast(&b.shape, "mul_bcast")?;
        let a = self.value();
        let map = broadcast_map(&shape, &b.shape);
        let data = a
            .data
            .iter()
            .zip(&map)
            .map(|(x, &j)| x * b.data[j])
            .collect();
        Ok(self.tape.push(
            mk(shape, data),
            &[self, other],
            Box::new(move |g, needs| {
                let ga =
                    needs[0].then(|| g.iter().zip(&map).map(|(gi, &j)| gi * b.data[j]).collect());
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    for ((gi, &j), x) in g.iter().zip(&map).zip(&a.data) {
                        gb[j] += gi * x;
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let s = x.data.iter().sum();
        self.tape.push(
            Tensor::scalar(s),
            &[self],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over the last axis. A rank-1 input yields shape `[1]`.
    pub fn mean_last(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape.last().unwrap();
        let rows = x.numel() / d;
        let mut shape = x.shape[..x.shape.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = x
            .data
            .chunks(d)
            .map(|r| r.iter().sum::<f64>() / d as f64)
            .collect();
        self.tape.push(
            mk(shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(rows * d);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi / d as f64, d));
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != x.numel() || shape.contains(&0) {
            return shape_err("reshape", &x.shape, shape);
        }
        if shape == x.shape.as_slice() {
            return Ok(self);
        }
        Ok(self.tape.push(
            mk(shape.to_vec(), x.data.clone()),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return shape_err("permute", &x.shape, perm);
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self);
        }
        let (out_shape, map) = permute_map(&x.shape, perm);
        let data = map.iter().map(|&j| x.data[j]).collect();
        let n = x.numel();
        Ok(self.tape.push(
            mk(out_shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (gi, &j) in g.iter().zip(&map) {
                    gx[j] = *gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = &values[0].shape;
        if axis >= base.len() {
            return shape_err("concat", base, &[axis]);
        }
        for v in &values[1..] {
            let ok = v.shape.len() == base.len()
                && v.shape
                    .iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", base, &v.shape);
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let blocks: Vec<usize> = values.iter().map(|v| v.shape[axis] * inner).collect();
        let total: usize = blocks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &bl) in values.iter().zip(&blocks) {
                data.extend_from_slice(&v.data[o * bl..(o + 1) * bl]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape[axis]).sum();
        Ok(first.tape.push(
            mk(shape, data),
            parts,
            Box::new(move |g, needs| {
                let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(blocks.len());
                let mut start = 0;
                for (k, &bl) in blocks.iter().enumerate() {
                    if needs[k] {
                        let mut gk = Vec::with_capacity(outer * bl);
                        for o in 0..outer {
                            let s = o * total + start;
                            gk.extend_from_slice(&g[s..s + bl]);
                        }
                        out.push(Some(gk));
                    } else {
                        out.push(None);
                    }
                    start += bl;
                }
                out
            }),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape.len() || len == 0 || start + len > x.shape[axis] {
            return shape_err("slice", &x.shape, &[axis, start, len]);
        }
        let (outer, n, inner) = split_axis(&x.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&x.data[s..s + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        let numel = x.numel();
        Ok(self.tape.push(
            mk(shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; numel];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    gx[s..s + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Cyclic roll: the element at index `i` along `axes[k]` moves to
    /// `i + shifts[k]` (mod extent).
    pub fn roll(self, axes: &[usize], shifts: &[isize]) -> Result<Var<'t>> {
        let x = self.value();
        if axes.len() != shifts.len() || axes.iter().any(|&a| a >= x.shape.len()) {
            return shape_err("roll", &x.shape, axes);
        }
        if shifts.iter().all(|&s| s == 0) {
            return Ok(self);
        }
        let rank = x.shape.len();
        let mut shift = vec![0usize; rank];
        for (&a, &s) in axes.iter().zip(shifts) {
            let n = x.shape[a] as isize;
            shift[a] = (((s % n) + n) % n) as usize;
        }
        let st = strides(&x.shape);
        let n = x.numel();
        let mut map = vec![0usize; n];
        let mut idx = vec![0usize; rank];
        for m in map.iter_mut() {
            // output idx takes the input at idx - shift
            *m = (0..rank)
                .map(|ax| ((idx[ax] + x.shape[ax] - shift[ax]) % x.shape[ax]) * st[ax])
                .sum();
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < x.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let data = map.iter().map(|&j| x.data[j]).collect();
        Ok(self.tape.push(
            mk(x.shape.clone(), data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (gi, &j) in g.iter().zip(&map) {
                    gx[j] = *gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Zero-pads the last two axes at their far ends.
    pub fn pad2d(self, pad_h: usize, pad_w: usize) -> Result<Var<'t>> {
        if pad_h == 0 && pad_w == 0 {
            return Ok(self);
        }
        let x = self.value();
        let r = x.shape.len();
        if r < 2 {
            return shape_err("pad2d", &x.shape, &[pad_h, pad_w]);
        }
        let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
        let (hp, wp) = (h + pad_h, w + pad_w);
        let outer = x.numel() / (h * w);
        let mut data = vec![0.0; outer * hp * wp];
        for o in 0..outer {
            for i in 0..h {
                let src = &x.data[(o * h + i) * w..(o * h + i + 1) * w];
                data[(o * hp + i) * wp..(o * hp + i) * wp + w].copy_from_slice(src);
            }
        }
        let mut shape = x.shape.clone();
        shape[r - 2] = hp;
        shape[r - 1] = wp;
        Ok(self.tape.push(
            mk(shape, data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * h * w];
                for o in 0..outer {
                    for i in 0..h {
                        gx[(o * h + i) * w..(o * h + i + 1) * w]
                            .copy_from_slice(&g[(o * hp + i) * wp..(o * hp + i) * wp + w]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != indices.len() || indices.iter().any(|&i| i >= x.numel()) {
            return shape_err("gather", &x.shape, shape);
        }
        let data = indices.iter().map(|&i| x.data[i]).collect();
        let numel = x.numel();
        Ok(self.tape.push(
            mk(shape.to_vec(), data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; numel];
                for (gi, &j) in g.iter().zip(indices.iter()) {
                    gx[j] += gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return shape_err("matmul", &a.shape, &b.shape);
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(&a.data, &b.data, &mut c, m, k, n);
        Ok(self.tape.push(
            mk(vec![m, n], c),
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, &b.data, &mut ga, m, n, k);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&a.data, g, &mut gb, k, m, n);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched matmul `[b×m×k] · [b×k×n] → [b×m×n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape.len() != 3
            || b.shape.len() != 3
            || a.shape[0] != b.shape[0]
            || a.shape[2] != b.shape[1]
        {
            return shape_err("bmm", &a.shape, &b.shape);
        }
        let (bs, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &a.data[i * m * k..(i + 1) * m * k],
                &b.data[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.tape.push(
            mk(vec![bs, m, n], c),
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &b.data[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn(
                            &a.data[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape.len() {
            return shape_err("softmax", &x.shape, &[axis]);
        }
        let (outer, n, inner) = split_axis(&x.shape, axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n)
                    .map(|j| x.data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x.data[at(j)] - mx).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        let yr = Rc::new(y.clone());
        Ok(self.tape.push(
            mk(x.shape.clone(), y),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; yr.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * yr[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yr[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance,
    /// then applies `gain` and `bias` (both `[d]`).
    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let gm = gain.value();
        let bt = bias.value();
        let d = *x.shape.last().unwrap();
        if gm.shape != [d] || bt.shape != [d] {
            return shape_err("layernorm", &x.shape, &gm.shape);
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * gm.data[j] + bt.data[j];
            }
        }
        Ok(self.tape.push(
            mk(x.shape.clone(), y),
            &[self, gain, bias],
            Box::new(move |g, needs| {
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm.data[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gm.data[j];
                        gx[r * d + j] = rstd[r] * (dxh - m1 - xr[j] * m2);
                    }
                }
                vec![
                    needs[0].then_some(gx),
                    needs[1].then_some(gg),
                    needs[2].then_some(gb),
                ]
            }),
        ))
    }
}
