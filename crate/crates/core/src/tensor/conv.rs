use std::rc::Rc;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

fn mk(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor {
        shape,
        data,
        grad: None,
    }
}

/// Output extent of a strided, padded window sweep; errors unless the sweep
/// tiles the padded input exactly.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = n + 2 * padding;
    if stride == 0 || k == 0 || span < k || !(span - k).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "extent {n} with kernel {k}, stride {stride}, padding {padding} gives a non-integer output extent"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Bilinear interpolation weights at a fractional position.
///
/// Returns the top-left integer neighbor `(y0, x0)`, the weights of the
/// neighbors `(y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1)`, and the
/// derivatives of those weights with respect to `py` and `px`.
pub fn bilinear_weights(py: f64, px: f64) -> (i64, i64, [f64; 4], [f64; 4], [f64; 4]) {
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let hy = 1.0 - ly;
    let hx = 1.0 - lx;
    (
        y0 as i64,
        x0 as i64,
        [hy * hx, hy * lx, ly * hx, ly * lx],
        [-hx, -lx, hx, lx],
        [-hy, hy, -ly, ly],
    )
}

/// Flat in-plane indices of the four bilinear neighbors; `None` outside.
#[inline]
fn neighbor_index(y0: i64, x0: i64, h: usize, w: usize) -> [Option<usize>; 4] {
    let at = |y: i64, x: i64| {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
            .then(|| y as usize * w + x as usize)
    };
    [
        at(y0, x0),
        at(y0, x0 + 1),
        at(y0 + 1, x0),
        at(y0 + 1, x0 + 1),
    ]
}

struct Tap {
    idx: [Option<usize>; 4],
    w: [f64; 4],
    dwy: [f64; 4],
    dwx: [f64; 4],
}

impl Tap {
    fn new(py: f64, px: f64, h: usize, w: usize) -> Self {
        let (y0, x0, wt, dwy, dwx) = bilinear_weights(py, px);
        Tap {
            idx: neighbor_index(y0, x0, h, w),
            w: wt,
            dwy,
            dwx,
        }
    }

    #[inline]
    fn sample(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                v += self.w[k] * plane[i];
            }
        }
        v
    }
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    s: usize,
    p: usize,
    out: (usize, usize),
) -> Vec<f64> {
    let (kh, kw) = k;
    let (ho, wo) = out;
    let n = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * n];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    s: usize,
    p: usize,
    out: (usize, usize),
) -> Vec<f64> {
    let (kh, kw) = k;
    let (ho, wo) = out;
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// Adds a per-row bias to a `[rows × n]` buffer.
fn add_row_bias(out: &mut [f64], bias: &[f64], n: usize) {
    for (row, b) in out.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn row_sums(g: &[f64], n: usize) -> Vec<f64> {
    g.chunks(n).map(|r| r.iter().sum()).collect()
}

impl<'t> Var<'t> {
    /// Zero-padded cross-correlation of `[C×H×W]` with `[O×C×kh×kw]`.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        if x.shape.len() != 3 || wt.shape.len() != 4 || wt.shape[1] != x.shape[0] {
            return shape_err("conv2d", &x.shape, &wt.shape);
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (o, kh, kw) = (wt.shape[0], wt.shape[2], wt.shape[3]);
        let ho = conv_out_extent(h, kh, stride, padding)?;
        let wo = conv_out_extent(w, kw, stride, padding)?;
        let b = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape != [o] {
                    return shape_err("conv2d bias", &bv.shape, &[o]);
                }
                Some(bv)
            }
            None => None,
        };
        let n = ho * wo;
        let kk = c * kh * kw;
        let cols = im2col(&x.data, c, h, w, (kh, kw), stride, padding, (ho, wo));
        let mut out = vec![0.0; o * n];
        gemm_nn(&wt.data, &cols, &mut out, o, kk, n);
        if let Some(b) = &b {
            add_row_bias(&mut out, &b.data, n);
        }
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.push(
            mk(vec![o, ho, wo], out),
            &inputs,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gcols = vec![0.0; kk * n];
                    gemm_tn(&wt.data, g, &mut gcols, kk, o, n);
                    col2im(&gcols, c, h, w, (kh, kw), stride, padding, (ho, wo))
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; o * kk];
                    gemm_nt(g, &cols, &mut gw, o, n, kk);
                    gw
                });
                let mut res = vec![gx, gw];
                if needs.len() == 3 {
                    res.push(Some(row_sums(g, n)));
                }
                res
            }),
        ))
    }

    /// Per-channel `k×k` convolution with same padding: `[C×H×W]`, weight
    /// `[C×1×k×k]`, bias `[C]`.
    pub fn depthwise_conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let bv = bias.value();
        if x.shape.len() != 3
            || wt.shape.len() != 4
            || wt.shape[0] != x.shape[0]
            || wt.shape[1] != 1
            || wt.shape[2] != wt.shape[3]
            || wt.shape[2].is_multiple_of(2)
            || bv.shape != [x.shape[0]]
        {
            return shape_err("depthwise_conv2d", &x.shape, &wt.shape);
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let k = wt.shape[2];
        let p = (k / 2) as isize;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt.data[(ci * k + ky) * k + kx]
                                * x.data[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                    out[(ci * h + y) * w + xx] = acc + bv.data[ci];
                }
            }
        }
        Ok(self.tape.push(
            mk(vec![c, h, w], out),
            &[self, weight, bias],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                let mut gw = vec![0.0; c * k * k];
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let go = g[(ci * h + y) * w + xx];
                            gb[ci] += go;
                            for ky in 0..k {
                                let iy = y as isize + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = xx as isize + kx as isize - p;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = (ci * h + iy as usize) * w + ix as usize;
                                    let wi = (ci * k + ky) * k + kx;
                                    gw[wi] += go * x.data[xi];
                                    gx[xi] += go * wt.data[wi];
                                }
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    /// 2×2 average pooling with stride 2 over the last two axes of `[C×H×W]`.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape.len() != 3 || !x.shape[1].is_multiple_of(2) || !x.shape[2].is_multiple_of(2) {
            return Err(Error::Usage(format!(
                "avg_pool2 needs even extents, got {:?}",
                x.shape
            )));
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let at = |dy: usize, dx: usize| x.data[(ci * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(ci * ho + y) * wo + xx] =
                        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        Ok(self.tape.push(
            mk(vec![c, ho, wo], out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ci * h + y) * w + xx] = 0.25 * g[(ci * ho + y / 2) * wo + xx / 2];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbor ×2 upsampling of `[C×H×W]`.
    pub fn upsample_nearest2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape.len() != 3 {
            return shape_err("upsample_nearest2", &x.shape, &[3]);
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ci * ho + y) * wo + xx] = x.data[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.tape.push(
            mk(vec![c, ho, wo], out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[(ci * h + y / 2) * w + xx / 2] += g[(ci * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Bilinear resize of `[C×H×W]` to `[C×out_h×out_w]` with half-pixel
    /// centers and edge clamping.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape.len() != 3 || out_h == 0 || out_w == 0 {
            return shape_err("resize_bilinear", &x.shape, &[out_h, out_w]);
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = Rc::new(axis(h, out_h));
        let xs = Rc::new(axis(w, out_w));
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            let plane = &x.data[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    out[(ci * out_h + oy) * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        Ok(self.tape.push(
            mk(vec![c, out_h, out_w], out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let go = g[(ci * out_h + oy) * out_w + ox];
                            plane[y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                            plane[y0 * w + x1] += go * (1.0 - ly) * lx;
                            plane[y1 * w + x0] += go * ly * (1.0 - lx);
                            plane[y1 * w + x1] += go * ly * lx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Samples every channel of `[C×H×W]` at the fractional position held in
    /// `coords = [py, px]`. Neighbors outside the map read as zero.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let p = coords.value();
        if x.shape.len() != 3 || p.shape != [2] {
            return shape_err("bilinear_sample", &x.shape, &p.shape);
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let tap = Rc::new(Tap::new(p.data[0], p.data[1], h, w));
        let out: Vec<f64> = (0..c)
            .map(|ci| tap.sample(&x.data[ci * h * w..(ci + 1) * h * w]))
            .collect();
        Ok(self.tape.push(
            mk(vec![c], out),
            &[self, coords],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * h * w];
                let mut gp = vec![0.0; 2];
                for ci in 0..c {
                    for k in 0..4 {
                        if let Some(i) = tap.idx[k] {
                            let v = x.data[ci * h * w + i];
                            gx[ci * h * w + i] += g[ci] * tap.w[k];
                            gp[0] += g[ci] * tap.dwy[k] * v;
                            gp[1] += g[ci] * tap.dwx[k] * v;
                        }
                    }
                }
                vec![Some(gx), Some(gp)]
            }),
        ))
    }

    /// Deformable column expansion for a stride-1 `kh×kw` sweep with the
    /// given zero padding. `offsets` is `[2·kh·kw × Ho × Wo]` holding
    /// `(Δy, Δx)` per tap in channels `2m, 2m+1`. Returns `[C·kh·kw × Ho·Wo]`
    /// with rows ordered channel-major, then tap.
    pub fn deform_im2col(
        self,
        offsets: Var<'t>,
        kh: usize,
        kw: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let off = offsets.value();
        if x.shape.len() != 3 {
            return shape_err("deform_im2col", &x.shape, &off.shape);
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let ho = conv_out_extent(h, kh, 1, padding)?;
        let wo = conv_out_extent(w, kw, 1, padding)?;
        let taps_n = kh * kw;
        if off.shape != [2 * taps_n, ho, wo] {
            return shape_err("deform_im2col offsets", &off.shape, &[2 * taps_n, ho, wo]);
        }
        let n = ho * wo;
        let mut taps = Vec::with_capacity(taps_n * n);
        for m in 0..taps_n {
            let (ky, kx) = (m / kw, m % kw);
            for oy in 0..ho {
                for ox in 0..wo {
                    let j = oy * wo + ox;
                    let py = oy as f64 - padding as f64 + ky as f64 + off.data[2 * m * n + j];
                    let px = ox as f64 - padding as f64 + kx as f64 + off.data[(2 * m + 1) * n + j];
                    taps.push(Tap::new(py, px, h, w));
                }
            }
        }
        let mut cols = vec![0.0; c * taps_n * n];
        for ci in 0..c {
            let plane = &x.data[ci * h * w..(ci + 1) * h * w];
            for m in 0..taps_n {
                let row = &mut cols[(ci * taps_n + m) * n..(ci * taps_n + m + 1) * n];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = taps[m * n + j].sample(plane);
                }
            }
        }
        Ok(self.tape.push(
            mk(vec![c * taps_n, n], cols),
            &[self, offsets],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; c * h * w]);
                let mut goff = needs[1].then(|| vec![0.0; 2 * taps_n * n]);
                for ci in 0..c {
                    let plane = &x.data[ci * h * w..(ci + 1) * h * w];
                    for m in 0..taps_n {
                        let grow = &g[(ci * taps_n + m) * n..(ci * taps_n + m + 1) * n];
                        for (j, &go) in grow.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let tap = &taps[m * n + j];
                            for k in 0..4 {
                                let Some(i) = tap.idx[k] else { continue };
                                if let Some(gx) = gx.as_mut() {
                                    gx[ci * h * w + i] += go * tap.w[k];
                                }
                                if let Some(goff) = goff.as_mut() {
                                    let v = plane[i];
                                    goff[2 * m * n + j] += go * tap.dwy[k] * v;
                                    goff[(2 * m + 1) * n + j] += go * tap.dwx[k] * v;
                                }
                            }
                        }
                    }
                }
                vec![gx, goff]
            }),
        ))
    }
}
