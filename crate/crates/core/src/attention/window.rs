//! Window partitioning, cyclic shifts and the shifted-window mask.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

/// `[C×h×w] → [nw×C×M×M]`, windows in row-major order.
pub fn window_partition(x: Var<'_>, m: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 || m == 0 || !s[1].is_multiple_of(m) || !s[2].is_multiple_of(m) {
        return Err(Error::Usage(format!(
            "window size {m} must divide the grid {s:?}; pad the map first"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (nh, nw) = (h / m, w / m);
    x.reshape(&[c, nh, m, nw, m])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(&[nh * nw, c, m, m])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(win: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let s = win.shape();
    if s.len() != 4
        || s[2] != s[3]
        || !h.is_multiple_of(s[2])
        || !w.is_multiple_of(s[3])
        || s[0] != (h / s[2]) * (w / s[3])
    {
        return Err(Error::Usage(format!(
            "cannot reverse windows {s:?} onto a {h}×{w} grid"
        )));
    }
    let (c, m) = (s[1], s[2]);
    win.reshape(&[h / m, w / m, c, m, m])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[c, h, w])
}

/// Toroidal roll of a `[C×h×w]` map by `(−s, −s)`.
pub fn cyclic_shift(x: Var<'_>, s: usize) -> Result<Var<'_>> {
    x.roll(&[1, 2], &[-(s as isize), -(s as isize)])
}

pub fn cyclic_unshift(x: Var<'_>, s: usize) -> Result<Var<'_>> {
    x.roll(&[1, 2], &[s as isize, s as isize])
}

fn region(i: usize, n: usize, m: usize, s: usize) -> usize {
    if i < n - m {
        0
    } else if i < n - s {
        1
    } else {
        2
    }
}

/// Region label of every position on the shifted `h×w` canvas.
pub fn region_ids(h: usize, w: usize, m: usize, s: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(3 * region(y, h, m, s) + region(x, w, m, s));
        }
    }
    ids
}

/// Additive mask `[nw×M²×M²]`: 0 for same-region pairs, [`MASK_VALUE`]
/// otherwise. `s = 0` gives all zeros.
pub fn shift_mask(h: usize, w: usize, m: usize, s: usize) -> Result<Tensor> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) || s >= m {
        return Err(Error::Usage(format!(
            "invalid mask geometry h={h} w={w} M={m} s={s}"
        )));
    }
    let (nh, nw) = (h / m, w / m);
    let t = m * m;
    let mut data = vec![0.0; nh * nw * t * t];
    if s > 0 {
        let ids = region_ids(h, w, m, s);
        for wy in 0..nh {
            for wx in 0..nw {
                let win: Vec<usize> = (0..t)
                    .map(|i| ids[(wy * m + i / m) * w + wx * m + i % m])
                    .collect();
                let base = (wy * nw + wx) * t * t;
                for i in 0..t {
                    for j in 0..t {
                        if win[i] != win[j] {
                            data[base + i * t + j] = MASK_VALUE;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, t, t], data)
}

/// Flat index into a `(2·table−1)²` relative-offset table for every token
/// pair of an `m×m` window (`m ≤ table`).
pub fn relative_position_index(m: usize, table: usize) -> Vec<usize> {
    let side = 2 * table - 1;
    let t = m * m;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / m) + table - 1 - (j / m);
            let dx = (i % m) + table - 1 - (j % m);
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// How a `h×w` grid is tiled for one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    /// Effective window side, `min(M, h, w)`.
    pub m: usize,
    pub shift: usize,
    /// Padded extents, multiples of `m`.
    pub hp: usize,
    pub wp: usize,
}

impl WindowGeometry {
    /// Windows never exceed the grid, and shifting is dropped when a single
    /// window already covers it.
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Self {
        let m = window.min(h).min(w).max(1);
        let shift = if shifted && h.min(w) > window {
            m / 2
        } else {
            0
        };
        WindowGeometry {
            h,
            w,
            m,
            shift,
            hp: h.div_ceil(m) * m,
            wp: w.div_ceil(m) * m,
        }
    }

    pub fn num_windows(&self) -> usize {
        (self.hp / self.m) * (self.wp / self.m)
    }

    pub fn tokens(&self) -> usize {
        self.m * self.m
    }

    /// Pad, shift and partition a `[C×h×w]` map into `[nw×C×m×m]`.
    pub fn split<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let x = x.pad2d(self.hp - self.h, self.wp - self.w)?;
        window_partition(cyclic_shift(x, self.shift)?, self.m)
    }

    /// Inverse of [`WindowGeometry::split`], cropping the padding away.
    pub fn merge<'t>(&self, win: Var<'t>) -> Result<Var<'t>> {
        let x = cyclic_unshift(window_reverse(win, self.hp, self.wp)?, self.shift)?;
        let x = if self.hp > self.h {
            x.slice(1, 0, self.h)?
        } else {
            x
        };
        if self.wp > self.w {
            x.slice(2, 0, self.w)
        } else {
            Ok(x)
        }
    }

    /// Mask for this geometry, or `None` when unshifted.
    pub fn mask(&self) -> Result<Option<Tensor>> {
        if self.shift == 0 {
            return Ok(None);
        }
        shift_mask(self.hp, self.wp, self.m, self.shift).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn partition_shapes_and_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(ramp(&[3, 4, 4]));
        let p = window_partition(x, 2).unwrap();
        assert_eq!(p.shape(), vec![4, 3, 2, 2]);
        // second window is the top-right 2×2 block of channel 0
        assert_eq!(&p.value().data()[12..16], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(*window_reverse(p, 4, 4).unwrap().value(), *x.value());
        let whole = window_partition(x, 4).unwrap();
        assert_eq!(whole.value().data(), x.value().data());
        assert!(matches!(window_partition(x, 3), Err(Error::Usage(_))));
    }

    #[test]
    fn shift_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(cyclic_shift(x, 0).unwrap().value().data(), x.value().data());
        assert_eq!(
            cyclic_shift(x, 1).unwrap().value().data(),
            &[4.0, 3.0, 2.0, 1.0]
        );
        let y = tape.constant(ramp(&[2, 5, 6]));
        let back = cyclic_unshift(cyclic_shift(y, 2).unwrap(), 2).unwrap();
        assert_eq!(*back.value(), *y.value());
    }

    #[test]
    fn mask_examples() {
        assert!(shift_mask(8, 8, 4, 0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let m = shift_mask(4, 4, 2, 1).unwrap();
        let d = m.data();
        // window 0 lies in one region
        assert!(d[..16].iter().all(|&v| v == 0.0));
        // the bottom-right window holds one token from each of four regions
        let last = &d[3 * 16..];
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.0 } else { MASK_VALUE };
                assert_eq!(last[i * 4 + j], expect);
            }
        }
        // hand enumeration: rows {0,1}→0, {2}→1, {3}→2
        let ids = region_ids(4, 4, 2, 1);
        assert_eq!(&ids[..4], &[0, 0, 1, 2]);
        assert_eq!(ids[15], 8);
    }

    #[test]
    fn relative_index_spans_table() {
        let idx = relative_position_index(3, 3);
        assert_eq!(idx.len(), 81);
        assert_eq!(idx[0], 2 * 5 + 2);
        assert_eq!(*idx.iter().max().unwrap(), 24);
        assert_eq!(*idx.iter().min().unwrap(), 0);
        // smaller windows index the centre of a larger table
        let small = relative_position_index(2, 4);
        assert!(small.iter().all(|&i| i < 49));
        assert_eq!(small[0], 3 * 7 + 3);
    }

    #[test]
    fn geometry_split_merge_roundtrip() {
        let tape = Tape::new();
        for (h, w, m, shifted) in [
            (8, 8, 4, true),
            (7, 9, 4, true),
            (4, 4, 7, true),
            (6, 5, 2, false),
        ] {
            let g = WindowGeometry::new(h, w, m, shifted);
            let x = tape.constant(ramp(&[2, h, w]));
            let win = g.split(x).unwrap();
            assert_eq!(win.shape(), vec![g.num_windows(), 2, g.m, g.m]);
            assert_eq!(*g.merge(win).unwrap().value(), *x.value());
        }
        let small = WindowGeometry::new(4, 4, 7, true);
        assert_eq!((small.m, small.shift), (4, 0));
        assert!(small.mask().unwrap().is_none());
    }
}
