pub mod pgm;
pub mod synth;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use pgm::GrayImage;
use synth::{image_name, mask_name, SynthSample, SynthSpec};

/// An image scaled to `[0, 1]` and its binary mask, both `[1×H×W]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn from_gray(index: usize, image: &GrayImage, mask: &GrayImage) -> Result<Self> {
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::Shape {
                op: "sample",
                lhs: vec![image.height, image.width],
                rhs: vec![mask.height, mask.width],
            });
        }
        let shape = vec![1, image.height, image.width];
        let img = image.data.iter().map(|&v| v as f64 / 255.0).collect();
        let msk = mask
            .data
            .iter()
            .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
            .collect();
        Ok(Sample {
            index,
            image: Tensor::new(shape.clone(), img)?,
            mask: Tensor::new(shape, msk)?,
        })
    }

    pub fn side(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Generates samples in memory, identical to what [`synth::generate`] writes.
pub fn synthesize(spec: &SynthSpec, range: std::ops::Range<usize>) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    range
        .into_par_iter()
        .map(|i| {
            let SynthSample { image, mask } = synth::sample(spec, i)?;
            Sample::from_gray(i, &image, &mask)
        })
        .collect()
}

/// Loads every `img_NNNN.pgm` with its `msk_NNNN.pgm`, ordered by index.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("img_")
            .and_then(|s| s.strip_suffix(".pgm"))
        {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Usage(format!(
            "no img_NNNN.pgm files in {}",
            dir.display()
        )));
    }
    indices
        .into_iter()
        .map(|i| {
            let img = GrayImage::load(&dir.join(image_name(i)))?;
            let msk = GrayImage::load(&dir.join(mask_name(i)))?;
            Sample::from_gray(i, &img, &msk)
        })
        .collect()
}
