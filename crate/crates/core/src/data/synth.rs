//! Synthetic low-contrast segmentation samples.
//!
//! Each image is a flat background plus a linear gradient, one to three
//! foreground regions raised by `gap`, and Gaussian noise. The mask is the
//! exact union of the generating regions. Sample `i` of seed `s` draws from
//! its own ChaCha stream, so it never depends on how many others exist.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pgm::GrayImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    BlobUnion,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeFamily::Ellipse),
            "blob-union" => Ok(ShapeFamily::BlobUnion),
            _ => Err(Error::Usage(format!(
                "unknown shape family {s:?} (ellipse | blob-union)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub family: ShapeFamily,
    /// Foreground minus background intensity, in (0, 1].
    pub gap: f64,
    pub sigma: f64,
    /// Peak-to-peak amplitude of the background ramp.
    pub gradient: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, count: usize, size: usize) -> Self {
        SynthSpec {
            seed,
            count,
            size,
            family: ShapeFamily::Ellipse,
            gap: 0.6,
            sigma: 0.05,
            gradient: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Usage(format!("image size {} below 32", self.size)));
        }
        if !(self.gap > 0.0 && self.gap <= 1.0) {
            return Err(Error::Usage(format!("gap {} outside (0, 1]", self.gap)));
        }
        if !(self.sigma >= 0.0 && self.gradient >= 0.0) {
            return Err(Error::Usage(
                "sigma and gradient must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One generated image with its mask in `{0, 255}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub image: GrayImage,
    pub mask: GrayImage,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

fn draw_regions(rng: &mut ChaCha8Rng, family: ShapeFamily, n: f64) -> Vec<Ellipse> {
    let count = rng.random_range(1..=3);
    let mut out = Vec::new();
    for _ in 0..count {
        let cx = rng.random_range(0.2..0.8) * n;
        let cy = rng.random_range(0.2..0.8) * n;
        match family {
            ShapeFamily::Ellipse => out.push(Ellipse {
                cx,
                cy,
                a: rng.random_range(0.08..0.25) * n,
                b: rng.random_range(0.08..0.25) * n,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            }),
            ShapeFamily::BlobUnion => {
                for _ in 0..rng.random_range(3..=5) {
                    let r = rng.random_range(0.05..0.12) * n;
                    out.push(Ellipse {
                        cx: cx + rng.random_range(-0.1..0.1) * n,
                        cy: cy + rng.random_range(-0.1..0.1) * n,
                        a: r,
                        b: r,
                        theta: 0.0,
                    });
                }
            }
        }
    }
    out
}

/// Sample `index` of `spec`; reproducible from `(spec, index)` alone.
pub fn sample(spec: &SynthSpec, index: usize) -> Result<SynthSample> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let nf = n as f64;
    let mut regions = draw_regions(&mut rng, spec.family, nf);
    let inside = |regions: &[Ellipse], x: usize, y: usize| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        regions.iter().any(|e| e.contains(px, py))
    };
    // a region too thin to cover any pixel center still yields a mask
    if !(0..n * n).any(|i| inside(&regions, i % n, i / n)) {
        let e = regions[0];
        regions.push(Ellipse {
            cx: e.cx.floor() + 0.5,
            cy: e.cy.floor() + 0.5,
            a: 1.0,
            b: 1.0,
            theta: 0.0,
        });
    }
    let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let (dy, dx) = angle.sin_cos();
    let background = (1.0 - spec.gap) / 2.0;
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Usage(e.to_string()))?;
    let mut img = Vec::with_capacity(n * n);
    let mut msk = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let fg = inside(&regions, x, y);
            // ramp in [-1/2, 1/2] along a random direction
            let u = ((x as f64 + 0.5) / nf - 0.5) * dx + ((y as f64 + 0.5) / nf - 0.5) * dy;
            let ramp = u / std::f64::consts::SQRT_2;
            let eps = if spec.sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let v = background + if fg { spec.gap } else { 0.0 } + spec.gradient * ramp + eps;
            img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            msk.push(if fg { 255 } else { 0 });
        }
    }
    Ok(SynthSample {
        image: GrayImage::new(n, n, img)?,
        mask: GrayImage::new(n, n, msk)?,
    })
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:04}.pgm")
}

pub fn mask_name(index: usize) -> String {
    format!("msk_{index:04}.pgm")
}

/// Writes `spec.count` image/mask pairs into `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    use rayon::prelude::*;
    (0..spec.count).into_par_iter().try_for_each(|i| {
        let s = sample(spec, i)?;
        s.image.save(&dir.join(image_name(i)))?;
        s.mask.save(&dir.join(mask_name(i)))
    })
}
