//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::modulation::{AttentionMap, ImageScore};
use crate::nets::ColorNameMap;
use crate::tensor::Tensor;

/// Fraction of mask pixels whose argmax color name equals `gt`.
///
/// Takes the color naming output directly; attention plays no part.
pub fn pixel_accuracy(y: &ColorNameMap, mask: &Tensor, gt: &[usize]) -> Result<f64> {
    let pixels = y.tensor().len() / y.classes();
    if mask.len() != pixels || gt.len() != pixels {
        return Err(Error::shape(
            "pixel_accuracy",
            format!("map {:?}, mask {:?}, {} labels", y.tensor().shape(), mask.shape(), gt.len()),
        ));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for ((pred, &m), &g) in y.argmax().into_iter().zip(mask.data()).zip(gt) {
        if m != 0.0 {
            total += 1;
            hit += (pred == g) as usize;
        }
    }
    if total == 0 {
        return Err(Error::invalid("pixel_accuracy", "mask selects no pixels"));
    }
    Ok(hit as f64 / total as f64)
}

/// Fraction of images whose top-scoring class equals the label.
pub fn image_accuracy(predictions: &[ImageScore], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("image_accuracy", format!("{} predictions, {} labels", predictions.len(), labels.len())));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("image_accuracy", "no predictions"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub inside_mean: f64,
    pub outside_mean: f64,
    pub iou_at_mean_threshold: f64,
}

impl Localization {
    /// `inside / outside`, infinite when nothing outside is attended.
    pub fn ratio(&self) -> f64 {
        if self.outside_mean == 0.0 {
            if self.inside_mean > 0.0 { f64::INFINITY } else { 1.0 }
        } else {
            self.inside_mean / self.outside_mean
        }
    }
}

/// Attention statistics against a ground-truth object mask.
pub fn attention_localization(a: &AttentionMap, gt_mask: &Tensor) -> Result<Localization> {
    let at = a.tensor();
    if at.shape() != gt_mask.shape() {
        return Err(Error::shape("attention_localization", format!("{:?} vs {:?}", at.shape(), gt_mask.shape())));
    }
    let n = gt_mask.len();
    let inside = gt_mask.data().iter().filter(|&&m| m != 0.0).count();
    if inside == 0 || inside == n {
        return Err(Error::invalid("attention_localization", "mask must be neither empty nor full"));
    }
    let (mut si, mut so) = (0.0, 0.0);
    for (&v, &m) in at.data().iter().zip(gt_mask.data()) {
        if m != 0.0 { si += v } else { so += v }
    }
    let mean = at.sum() / n as f64;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in at.data().iter().zip(gt_mask.data()) {
        let (p, g) = (v > mean, m != 0.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(Localization {
        inside_mean: si / inside as f64,
        outside_mean: so / (n - inside) as f64,
        iou_at_mean_threshold: inter as f64 / union as f64,
    })
}
