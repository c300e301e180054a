//! Overlap, volume and surface-distance scores for binary masks.
//!
//! Scores are percentages except the distances, which are in pixels.

use std::io::Write;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err("mask", &[height, width], &[data.len()]);
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    /// Pixels of a `[1×H×W]` or `[H×W]` tensor strictly above `threshold`.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return shape_err("mask", s, &[1, 0, 0]),
        };
        Self::new(h, w, t.data().iter().map(|&v| v > threshold).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Mask pixels with a 4-neighbor outside the mask or on the image edge,
    /// as `(y, x)` in row-major order.
    pub fn surface(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.at(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if edge
                    || !self.at(y - 1, x)
                    || !self.at(y + 1, x)
                    || !self.at(y, x - 1)
                    || !self.at(y, x + 1)
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn same_shape(p: &BinaryMask, g: &BinaryMask) -> Result<()> {
    if (p.height, p.width) != (g.height, g.width) {
        return shape_err("metric", &[p.height, p.width], &[g.height, g.width]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        same_shape(pred, gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }
}

/// `100·num/den`, or 100 when both are zero.
fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionScores {
    pub di: f64,
    pub ja: f64,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
}

pub fn confusion_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionScores> {
    let c = Confusion::of(pred, gt)?;
    Ok(ConfusionScores {
        di: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        ja: pct(c.tp, c.tp + c.fp + c.fn_),
        se: pct(c.tp, c.tp + c.fn_),
        sp: pct(c.tn, c.tn + c.fp),
        ac: pct(c.tp + c.tn, c.tp + c.fp + c.fn_ + c.tn),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeScores {
    pub voe: f64,
    pub rvd: f64,
}

pub fn volume_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<VolumeScores> {
    let c = Confusion::of(pred, gt)?;
    let g = c.tp + c.fn_;
    if g == 0 {
        return Err(Error::Undefined(
            "relative volume difference with an empty reference".into(),
        ));
    }
    let p = c.tp + c.fp;
    Ok(VolumeScores {
        voe: 100.0 - pct(c.tp, c.tp + c.fp + c.fn_),
        rvd: 100.0 * (p as f64 - g as f64) / g as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceScores {
    pub asd: f64,
    pub rmsd: f64,
    pub hd95: f64,
    /// Largest directed distance in the pool.
    pub max: f64,
}

/// One-dimensional lower envelope of parabolas over squared distances.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let s = loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break s;
            }
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
fn squared_distance_map(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    // large but finite so the envelope arithmetic stays exact
    let far = ((h + w) * (h + w)) as f64 * 4.0 + 1.0;
    let mut grid = vec![far; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let (mut col, mut out) = (vec![0.0; h], vec![0.0; n]);
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&row, &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Summary statistics of a pool of directed distances, kept in pool order.
pub fn pool_scores(pool: &[f64]) -> SurfaceScores {
    let n = pool.len() as f64;
    let asd = pool.iter().sum::<f64>() / n;
    let rmsd = (pool.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    SurfaceScores {
        asd,
        rmsd,
        hd95: percentile(&sorted, 0.95),
        max: *sorted.last().unwrap(),
    }
}

/// Directed distances from `pred`'s surface to `gt`'s, then from `gt`'s to
/// `pred`'s, each in row-major surface order.
pub fn directed_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<Vec<f64>> {
    same_shape(pred, gt)?;
    let (sp, sg) = (pred.surface(), gt.surface());
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::Undefined(
            "surface distance with an empty mask".into(),
        ));
    }
    let (h, w) = (pred.height, pred.width);
    let to_g = squared_distance_map(h, w, &sg);
    let to_p = squared_distance_map(h, w, &sp);
    let mut pool: Vec<f64> = sp.iter().map(|&(y, x)| to_g[y * w + x].sqrt()).collect();
    pool.extend(sg.iter().map(|&(y, x)| to_p[y * w + x].sqrt()));
    Ok(pool)
}

pub fn surface_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SurfaceScores> {
    Ok(pool_scores(&directed_distances(pred, gt)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllScores {
    pub confusion: ConfusionScores,
    /// Undefined for an empty reference.
    pub volume: Option<VolumeScores>,
    /// Undefined when either mask is empty.
    pub surface: Option<SurfaceScores>,
}

pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask) -> Result<AllScores> {
    let confusion = confusion_metrics(pred, gt)?;
    let volume = match volume_metrics(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let surface = match surface_metrics(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(AllScores {
        confusion,
        volume,
        surface,
    })
}

pub const METRICS_CSV_HEADER: &str = "sample_id,DI,JA,SE,SP,AC,VOE,RVD,ASD,RMSD,HD95";

/// One row per sample; undefined scores are written as `nan`.
pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[(String, AllScores)]) -> Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    for (id, s) in rows {
        let c = s.confusion;
        writeln!(
            out,
            "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            c.di,
            c.ja,
            c.se,
            c.sp,
            c.ac,
            f(s.volume.map(|v| v.voe)),
            f(s.volume.map(|v| v.rvd)),
            f(s.surface.map(|v| v.asd)),
            f(s.surface.map(|v| v.rmsd)),
            f(s.surface.map(|v| v.hd95)),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> (BinaryMask, BinaryMask) {
        let h = rng.random_range(2..=32);
        let w = rng.random_range(2..=32);
        let blob = |rng: &mut ChaCha8Rng| loop {
            let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
            let r = rng.random_range(1.0..(h.max(w) as f64 / 2.0).max(1.5));
            let noise = rng.random_range(0.0..0.3);
            let seed: u64 = rng.random();
            let m = mask(h, w, |y, x| {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let jitter = ((seed ^ ((y * 131 + x) as u64).wrapping_mul(0x9E3779B97F4A7C15))
                    >> 40) as f64
                    / (1u64 << 24) as f64;
                d <= r || jitter < noise * 0.2
            });
            if m.count() > 0 {
                return m;
            }
        };
        (blob(rng), blob(rng))
    }

    /// Nearest-point search over every pair of surface pixels.
    fn all_pairs_pool(p: &BinaryMask, g: &BinaryMask) -> Vec<f64> {
        let d = |a: &[(usize, usize)], b: &[(usize, usize)]| -> Vec<f64> {
            a.iter()
                .map(|&(y, x)| {
                    b.iter()
                        .map(|&(v, u)| {
                            let dy = y as f64 - v as f64;
                            let dx = x as f64 - u as f64;
                            dy * dy + dx * dx
                        })
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .collect()
        };
        let (sp, sg) = (p.surface(), g.surface());
        let mut pool = d(&sp, &sg);
        pool.extend(d(&sg, &sp));
        pool
    }

    fn loop_confusion(p: &BinaryMask, g: &BinaryMask) -> (usize, usize, usize, usize) {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for y in 0..p.height {
            for x in 0..p.width {
                match (p.at(y, x), g.at(y, x)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => tn += 1,
                }
            }
        }
        (tp, fp, fn_, tn)
    }

    #[test]
    fn identical_masks() {
        let m = mask(10, 10, |y, x| (2..6).contains(&y) && (3..8).contains(&x));
        let c = confusion_metrics(&m, &m).unwrap();
        for v in [c.di, c.ja, c.se, c.sp, c.ac] {
            assert_eq!(v, 100.0);
        }
        let v = volume_metrics(&m, &m).unwrap();
        assert_eq!((v.voe, v.rvd), (0.0, 0.0));
        let s = surface_metrics(&m, &m).unwrap();
        assert_eq!((s.asd, s.rmsd, s.hd95), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_conventions() {
        let e = mask(4, 4, |_, _| false);
        let c = confusion_metrics(&e, &e).unwrap();
        assert_eq!((c.di, c.ja, c.se), (100.0, 100.0, 100.0));
        assert!(matches!(volume_metrics(&e, &e), Err(Error::Undefined(_))));
        assert!(matches!(surface_metrics(&e, &e), Err(Error::Undefined(_))));
    }

    #[test]
    fn disjoint_and_half_planes() {
        let a = mask(8, 8, |y, _| y < 2);
        let b = mask(8, 8, |y, _| y > 5);
        let c = confusion_metrics(&a, &b).unwrap();
        assert_eq!((c.di, c.ja, c.se), (0.0, 0.0, 0.0));
        let n = 12;
        let left = mask(n, n, |_, x| x < n / 2);
        let top = mask(n, n, |y, _| y < n / 2);
        let (tp, ..) = loop_confusion(&top, &left);
        assert_eq!(tp, n * n / 4);
        assert_eq!(confusion_metrics(&top, &left).unwrap().di, 50.0);
    }

    #[test]
    fn rvd_one_extra_pixel() {
        let g = mask(20, 20, |y, x| (5..15).contains(&y) && (5..15).contains(&x));
        let mut p = g.clone();
        p.data[0] = true;
        assert!((volume_metrics(&p, &g).unwrap().rvd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixels_three_apart() {
        let a = mask(5, 9, |y, x| y == 2 && x == 2);
        let b = mask(5, 9, |y, x| y == 2 && x == 5);
        let s = surface_metrics(&a, &b).unwrap();
        assert_eq!((s.asd, s.rmsd, s.hd95), (3.0, 3.0, 3.0));
    }

    #[test]
    fn surface_is_four_connected_border() {
        let m = mask(5, 5, |y, x| (1..4).contains(&y) && (1..4).contains(&x));
        let s = m.surface();
        assert_eq!(s.len(), 8);
        assert!(!s.contains(&(2, 2)));
        let full = mask(3, 3, |_, _| true);
        assert_eq!(full.surface().len(), 8);
    }

    #[test]
    fn shape_mismatch() {
        assert!(confusion_metrics(&mask(2, 2, |_, _| true), &mask(2, 3, |_, _| true)).is_err());
    }

    #[test]
    fn random_pairs_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (p, g) = random_pair(&mut rng);
            let (tp, fp, fn_, tn) = loop_confusion(&p, &g);
            let c = Confusion::of(&p, &g).unwrap();
            assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
            let sc = confusion_metrics(&p, &g).unwrap();
            let vol = volume_metrics(&p, &g).unwrap();
            assert_eq!(vol.voe, 100.0 - sc.ja);
            assert_eq!(directed_distances(&p, &g).unwrap(), all_pairs_pool(&p, &g));
            let s = surface_metrics(&p, &g).unwrap();
            assert!(s.rmsd >= s.asd);
            assert!(s.hd95 <= s.max);
            let back = surface_metrics(&g, &p).unwrap();
            assert_eq!(s.hd95, back.hd95);
            assert!((s.asd - back.asd).abs() < 1e-12);
            assert_eq!(sc.di, confusion_metrics(&g, &p).unwrap().di);
        }
    }

    #[test]
    fn adding_true_positives_never_lowers_dice() {
        let g = mask(16, 16, |y, x| (3..12).contains(&y) && (2..10).contains(&x));
        let mut p = mask(16, 16, |y, x| (5..8).contains(&y) && (0..4).contains(&x));
        let mut last = confusion_metrics(&p, &g).unwrap().di;
        for i in 0..p.data.len() {
            if g.data[i] && !p.data[i] {
                p.data[i] = true;
                let di = confusion_metrics(&p, &g).unwrap().di;
                assert!(di >= last);
                last = di;
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert!((percentile(&v, 0.95) - 3.8).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn csv_layout() {
        let m = mask(4, 4, |y, _| y < 2);
        let e = mask(4, 4, |_, _| false);
        let rows = vec![
            ("a".to_string(), evaluate(&m, &m).unwrap()),
            ("b".to_string(), evaluate(&m, &e).unwrap()),
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 11));
        assert!(lines[2].ends_with("nan,nan,nan,nan,nan"));
    }
}
