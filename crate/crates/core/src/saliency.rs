//! Center-surround color contrast, used only to pick the pixels the color
//! naming branch is pretrained on.
//!
//! Each pixel scores its distance (after a 3x3 blur) from the mean color of
//! the image border, the field is Gaussian-smoothed with `sigma =
//! min(H, W) / 16` and then min-max normalized. This is a rough stand-in for
//! graph-based saliency, which is enough to locate a single dominant object.

use std::path::Path;

use crate::data::pnm;
use crate::error::{Error, Result};
use crate::nets::SaliencyMask;
use crate::tensor::Tensor;

/// `[H, W]` saliency in `[0, 1]`; all zero when the image has no contrast.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyField(Tensor);

impl SaliencyField {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Writes the field as an 8-bit PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        pnm::write(path, &pnm::Raster::from_tensor(&self.0)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Mean,
    Fixed(f64),
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable convolution of each channel with `taps` (replicated edges).
fn separable(data: &[f64], h: usize, w: usize, c: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for (t, &k) in taps.iter().enumerate() {
                let sx = clamp_index(x as isize + t as isize - r, w);
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += k * data[(y * w + sx) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for (t, &k) in taps.iter().enumerate() {
            let sy = clamp_index(y as isize + t as isize - r, h);
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] += k * tmp[(sy * w + x) * c + ch];
                }
            }
        }
    }
    out
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

pub fn compute_saliency(image: &Tensor) -> Result<SaliencyField> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::shape("compute_saliency", format!("expected [H,W,3], got {:?}", image.shape()))),
    };
    let blurred = separable(image.data(), h, w, 3, &[1.0 / 3.0; 3]);
    let band = (h.min(w) / 8).max(1);
    let mut mean = [0.0; 3];
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if y < band || x < band || y >= h - band.min(h) || x >= w - band.min(w) {
                (0..3).for_each(|c| mean[c] += blurred[(y * w + x) * 3 + c]);
                n += 1.0;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let dist: Vec<f64> = blurred
        .chunks(3)
        .map(|p| (0..3).map(|c| (p[c] - mean[c]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let sigma = h.min(w) as f64 / 16.0;
    let smooth = separable(&dist, h, w, 1, &gaussian_taps(sigma));
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let field = if hi - lo > 1e-12 {
        smooth.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; h * w]
    };
    Ok(SaliencyField(Tensor::new(&[h, w], field)?))
}

/// `field > mean` or `field >= t`; a constant field under `Mean` gives an empty mask.
pub fn binarize(field: &SaliencyField, method: Threshold) -> Result<SaliencyMask> {
    let d = field.0.data();
    let on: Box<dyn Fn(f64) -> bool> = match method {
        Threshold::Mean => {
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            Box::new(move |v| v > mean)
        }
        Threshold::Fixed(t) => {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid("binarize", format!("fixed threshold {t} must lie in (0, 1)")));
            }
            Box::new(move |v| v >= t)
        }
    };
    let mask = d.iter().map(|&v| on(v) as u8 as f64).collect();
    SaliencyMask::new(Tensor::new(field.0.shape(), mask)?)
}

/// Saliency mask with the mean threshold.
pub fn saliency_mask(image: &Tensor) -> Result<SaliencyMask> {
    binarize(&compute_saliency(image)?, Threshold::Mean)
}
