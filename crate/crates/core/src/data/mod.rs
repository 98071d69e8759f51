//! Datasets on disk and in memory.
//!
//! Layout: `root/<split>/<color>/<id>.ppm`, with `<id>.mask.pgm` next to each
//! image of a masked evaluation set.

pub mod pnm;
pub mod presets;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nets::ColorVocabulary;
use crate::tensor::Tensor;

pub use synth::{synth_generate, Shape, SplitCounts, SynthConfig, SynthDataset};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST: &str = "manifest.txt";
const MASK_SUFFIX: &str = ".mask.pgm";

#[derive(Clone, Debug, PartialEq)]
pub struct WeakSample {
    pub id: String,
    pub label: usize,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub sample: WeakSample,
    /// `[H, W]` object mask of zeros and ones, never empty.
    pub mask: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct WeakDataset {
    pub train: Vec<WeakSample>,
    pub val: Vec<WeakSample>,
    pub test: Vec<WeakSample>,
}

impl WeakDataset {
    pub fn split(&self, name: &str) -> &[WeakSample] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }
}

/// Number of samples per class index.
pub fn class_counts(samples: &[WeakSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        out.push((name, entry.path()));
    }
    out.sort();
    Ok(out)
}

/// `(label, id, image path)` for every image under `dir/<color>/`, sorted by
/// color name then id.
fn list_class_dirs(dir: &Path, vocab: &ColorVocabulary) -> Result<Vec<(usize, String, PathBuf)>> {
    let mut out = Vec::new();
    for (color, path) in read_dir_sorted(dir)? {
        if !path.is_dir() {
            continue;
        }
        let label = vocab.index_of(&color).ok_or_else(|| {
            Error::Vocabulary(format!("{}: class folder {color:?} is not in the vocabulary ({vocab})", dir.display()))
        })?;
        for (file, p) in read_dir_sorted(&path)? {
            if let Some(id) = file.strip_suffix(".ppm") {
                out.push((label, id.to_string(), p));
            }
        }
    }
    Ok(out)
}

fn load_images(entries: Vec<(usize, String, PathBuf)>) -> Result<Vec<WeakSample>> {
    entries
        .into_par_iter()
        .map(|(label, id, p)| {
            Ok(WeakSample {
                id,
                label,
                image: pnm::read_ppm(&p)?,
            })
        })
        .collect()
}

/// Loads `root/{train,val,test}`; a missing split directory is an empty split.
pub fn load_weak_dataset(root: &Path, vocab: &ColorVocabulary) -> Result<WeakDataset> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let mut splits = Vec::new();
    for name in SPLITS {
        let dir = root.join(name);
        splits.push(if dir.is_dir() {
            load_images(list_class_dirs(&dir, vocab)?)?
        } else {
            Vec::new()
        });
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    for (name, s) in SPLITS.iter().zip([&train, &val, &test]) {
        log::info!("{name}: {} images, per class {:?}", s.len(), class_counts(s, vocab.len()));
    }
    Ok(WeakDataset { train, val, test })
}

/// Loads one split laid out as `dir/<color>/<id>.ppm`.
pub fn load_weak_dir(dir: &Path, vocab: &ColorVocabulary) -> Result<Vec<WeakSample>> {
    load_images(list_class_dirs(dir, vocab)?)
}

/// True when any image under `dir/<color>/` has a mask file.
pub fn has_masks(dir: &Path) -> bool {
    let Ok(rd) = fs::read_dir(dir) else { return false };
    rd.flatten().any(|class| {
        fs::read_dir(class.path())
            .map(|files| files.flatten().any(|f| f.file_name().to_string_lossy().ends_with(MASK_SUFFIX)))
            .unwrap_or(false)
    })
}

/// Loads a masked evaluation set laid out as `dir/<color>/<id>.ppm` plus `<id>.mask.pgm`.
pub fn load_eval_dataset(dir: &Path, vocab: &ColorVocabulary) -> Result<Vec<EvalSample>> {
    list_class_dirs(dir, vocab)?
        .into_par_iter()
        .map(|(label, id, p)| {
            let image = pnm::read_ppm(&p)?;
            let mask_path = p.with_file_name(format!("{id}{MASK_SUFFIX}"));
            if !mask_path.is_file() {
                return Err(Error::Dataset(format!("{}: missing mask {}", p.display(), mask_path.display())));
            }
            let mask = pnm::read_mask(&mask_path)?;
            if mask.shape() != &image.shape()[..2] {
                return Err(Error::format(&mask_path, format!("mask {:?} does not match image {:?}", mask.shape(), image.shape())));
            }
            if mask.sum() == 0.0 {
                return Err(Error::format(&mask_path, "mask is empty"));
            }
            Ok(EvalSample {
                sample: WeakSample { id, label, image },
                mask,
            })
        })
        .collect()
}

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got {raw:?}", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Vocabulary recorded in a dataset manifest, if there is one.
pub fn manifest_vocabulary(root: &Path) -> Result<Option<ColorVocabulary>> {
    let path = root.join(MANIFEST);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text).map_err(|d| Error::format(&path, d))?;
    match kv.iter().find(|(k, _)| k == "vocabulary") {
        Some((_, v)) => Ok(Some(ColorVocabulary::new(v.split(','))?)),
        None => Ok(None),
    }
}

/// Writes a generated dataset and its manifest under `root`.
pub fn export(dataset: &SynthDataset, config: &SynthConfig, root: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(root)?;
    let write_weak = |split: &str, s: &WeakSample| -> Result<()> {
        let dir = root.join(split).join(dataset.vocabulary.name(s.label));
        mkdir(&dir)?;
        pnm::write_ppm(&dir.join(format!("{}.ppm", s.id)), &s.image)
    };
    for s in &dataset.train {
        write_weak("train", s)?;
    }
    for s in &dataset.val {
        write_weak("val", s)?;
    }
    for e in &dataset.test {
        write_weak("test", &e.sample)?;
        let dir = root.join("test").join(dataset.vocabulary.name(e.sample.label));
        pnm::write_mask(&dir.join(format!("{}{MASK_SUFFIX}", e.sample.id)), &e.mask)?;
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest(dataset, config)).map_err(|e| Error::io(&path, e))
}

fn manifest(d: &SynthDataset, c: &SynthConfig) -> String {
    let anchors: Vec<String> = c.anchors.iter().map(|&a| presets::to_hex(a)).collect();
    let shapes: Vec<&str> = c.shapes.iter().map(|s| s.name()).collect();
    let mut m = String::new();
    let mut kv = |k: &str, v: String| m.push_str(&format!("{k} = {v}\n"));
    kv("seed", c.seed.to_string());
    kv("vocabulary", d.vocabulary.to_string());
    kv("anchors", anchors.join(","));
    kv("height", c.height.to_string());
    kv("width", c.width.to_string());
    kv("shapes", shapes.join(","));
    kv("scale_min", c.scale.0.to_string());
    kv("scale_max", c.scale.1.to_string());
    kv("jitter", c.jitter.to_string());
    kv("center_sigma", c.center_sigma.to_string());
    kv("background_margin", c.background_margin.to_string());
    kv("tile", c.tile.to_string());
    kv("texture", c.texture.to_string());
    kv("clutter", c.clutter.to_string());
    kv("clutter_ratio", c.clutter_ratio.to_string());
    let classes = d.vocabulary.len();
    let test: Vec<WeakSample> = d.test.iter().map(|e| e.sample.clone()).collect();
    for (split, samples) in [("train", &d.train), ("val", &d.val), ("test", &test)] {
        for (i, n) in class_counts(samples, classes).into_iter().enumerate() {
            kv(&format!("count.{split}.{}", d.vocabulary.name(i)), n.to_string());
        }
    }
    m
}

/// Bilinear resampling with half-pixel centers (corners not aligned).
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("resize_bilinear", format!("expected [H,W,C], got {:?}", image.shape()))),
    };
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize_bilinear", "target size must be positive"));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, height), axis(w, width));
    let d = image.data();
    let mut out = Vec::with_capacity(height * width * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| d[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[height, width, c], out)
}
