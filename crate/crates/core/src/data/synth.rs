//! Deterministic synthetic scenes: a textured background plus one colored
//! object whose color is the image label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::presets::{color_distance, min_pairwise_distance, preset, DEFAULT_PRESET};
use super::{EvalSample, WeakSample};
use crate::error::{Error, Result};
use crate::nets::ColorVocabulary;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

impl Shape {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rectangle" => Some(Shape::Rectangle),
            "ellipse" => Some(Shape::Ellipse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Rectangle => "rectangle",
            Shape::Ellipse => "ellipse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// `n` training images with validation and test sized 1/4 and 1/2 of it.
    pub fn from_train(n: usize) -> Self {
        Self {
            train: n,
            val: n.div_ceil(4),
            test: n.div_ceil(2),
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 40,
            val: 10,
            test: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub vocabulary: ColorVocabulary,
    pub anchors: Vec<[u8; 3]>,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
    /// Object side range as fractions of the image side.
    pub scale: (f64, f64),
    /// Per-pixel color noise in `[0, 1]` RGB units.
    pub jitter: f64,
    /// Standard deviation of the object center offset, as a fraction of the shorter side.
    pub center_sigma: f64,
    /// Minimum distance of any background color from every anchor.
    pub background_margin: f64,
    pub tile: usize,
    /// Maximum per-tile brightness shift of the background, in `[0, 1]` units.
    pub texture: f64,
    /// Adds same-colored distractors of another class near the border.
    pub clutter: bool,
    /// Total distractor area relative to the object area.
    pub clutter_ratio: f64,
    pub counts: SplitCounts,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let (vocabulary, anchors) = preset(DEFAULT_PRESET).expect("default preset");
        Self {
            seed: 0,
            vocabulary,
            anchors,
            height: 64,
            width: 64,
            shapes: vec![Shape::Rectangle, Shape::Ellipse],
            scale: (0.3, 0.5),
            jitter: 0.03,
            center_sigma: 0.15,
            background_margin: 0.25,
            tile: 8,
            texture: 0.08,
            clutter: false,
            clutter_ratio: 1.2,
            counts: SplitCounts::default(),
        }
    }
}

/// Generated dataset in loader order.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub vocabulary: ColorVocabulary,
    pub anchors: Vec<[u8; 3]>,
    pub train: Vec<WeakSample>,
    pub val: Vec<WeakSample>,
    pub test: Vec<EvalSample>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.anchors.len() != self.vocabulary.len() {
            return bad(format!("{} anchors for {} color names", self.anchors.len(), self.vocabulary.len()));
        }
        let min = min_pairwise_distance(&self.anchors);
        if !(self.jitter >= 0.0) || min <= 6.0 * self.jitter {
            return bad(format!("min anchor distance {min:.4} must exceed 6 x jitter ({})", self.jitter));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("image size {}x{} too small (min 8x8)", self.height, self.width));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 0.9) {
            return bad(format!("object scale range {lo}..{hi} must satisfy 0 < lo <= hi <= 0.9"));
        }
        if self.shapes.is_empty() {
            return bad("no object shapes".into());
        }
        if !(0.0..=0.5).contains(&self.texture) {
            return bad(format!("texture {} must lie in [0, 0.5]", self.texture));
        }
        if !(self.center_sigma >= 0.0) || self.tile == 0 || !(self.clutter_ratio > 0.0) {
            return bad("center_sigma must be >= 0, tile and clutter_ratio > 0".into());
        }
        let c = self.counts;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return bad(format!("per-class counts must be positive, got train {} val {} test {}", c.train, c.val, c.test));
        }
        if self.palette().is_empty() {
            return bad(format!("no background color is {} away from every anchor", self.background_margin));
        }
        Ok(())
    }

    /// Background colors: a 6-level RGB grid minus anchor neighborhoods.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        let levels = [0u8, 51, 102, 153, 204, 255];
        let mut out = Vec::new();
        for &r in &levels {
            for &g in &levels {
                for &b in &levels {
                    let c = [r, g, b];
                    if self.anchors.iter().all(|&a| color_distance(a, c) >= self.background_margin) {
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// One rendered scene.
pub struct Scene {
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
}

fn mix(seed: u64, split: u64, class: u64, index: u64) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed ^ split.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (class << 32) ^ index;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

fn paint(pixels: &mut [u8], width: usize, y: usize, x: usize, anchor: [u8; 3], noise: &Normal<f64>, rng: &mut ChaCha8Rng) {
    let o = (y * width + x) * 3;
    for c in 0..3 {
        let v = anchor[c] as f64 + 255.0 * noise.sample(rng);
        pixels[o + c] = v.clamp(0.0, 255.0).round() as u8;
    }
}

/// Renders the scene for `(split, label, index)`; independent of generation order.
pub fn render(config: &SynthConfig, palette: &[[u8; 3]], split: u64, label: usize, index: usize) -> Scene {
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, split, label as u64, index as u64));
    let mut pixels = vec![0u8; h * w * 3];

    let t = config.tile;
    let (oy, ox) = (rng.random_range(0..t), rng.random_range(0..t));
    let tiles_y = (h + oy).div_ceil(t);
    let tiles_x = (w + ox).div_ceil(t);
    // one base color per image, textured by per-tile brightness shifts
    let base = palette[rng.random_range(0..palette.len())];
    let amp = config.texture * 255.0;
    let tile_colors: Vec<[u8; 3]> = (0..tiles_y * tiles_x)
        .map(|_| {
            let shift = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            base.map(|v| (v as f64 + shift).clamp(0.0, 255.0).round() as u8)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let c = tile_colors[((y + oy) / t) * tiles_x + (x + ox) / t];
            pixels[(y * w + x) * 3..][..3].copy_from_slice(&c);
        }
    }

    let shape = config.shapes[rng.random_range(0..config.shapes.len())];
    let (lo, hi) = config.scale;
    let sh = (rng.random_range(lo..=hi) * h as f64).round().max(2.0);
    let sw = (rng.random_range(lo..=hi) * w as f64).round().max(2.0);
    let offset = Normal::new(0.0, config.center_sigma * h.min(w) as f64).expect("sigma >= 0");
    let cy = (h as f64 / 2.0 + offset.sample(&mut rng)).clamp(sh / 2.0, h as f64 - sh / 2.0);
    let cx = (w as f64 / 2.0 + offset.sample(&mut rng)).clamp(sw / 2.0, w as f64 - sw / 2.0);
    let noise = Normal::new(0.0, config.jitter).expect("jitter >= 0");
    let anchor = config.anchors[label];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / (sh / 2.0);
            let dx = (x as f64 + 0.5 - cx) / (sw / 2.0);
            let inside = match shape {
                Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                Shape::Ellipse => dy * dy + dx * dx <= 1.0,
            };
            if inside {
                mask[y * w + x] = true;
                paint(&mut pixels, w, y, x, anchor, &noise, &mut rng);
            }
        }
    }

    if config.clutter {
        let classes = config.anchors.len();
        let other = (label + rng.random_range(1..classes)) % classes;
        let area = mask.iter().filter(|&&m| m).count() as f64 * config.clutter_ratio;
        let band = ((h.min(w) as f64) * 0.3).round() as usize;
        let side = ((area / 2.0).sqrt().round() as usize).clamp(2, band.max(2));
        let mut placed: Vec<Rect> = Vec::new();
        for _ in 0..2 {
            for _attempt in 0..64 {
                // a square hugging one of the four borders
                let along_y = rng.random_range(0..=h - side);
                let along_x = rng.random_range(0..=w - side);
                let inset = rng.random_range(0..=band - side.min(band));
                let (y0, x0) = match rng.random_range(0..4) {
                    0 => (inset, along_x),
                    1 => (h - side - inset, along_x),
                    2 => (along_y, inset),
                    _ => (along_y, w - side - inset),
                };
                let r = Rect { y0, x0, h: side, w: side };
                let grown = Rect {
                    y0: y0.saturating_sub(1),
                    x0: x0.saturating_sub(1),
                    h: side + 2,
                    w: side + 2,
                };
                let hits_object = (0..h).any(|y| (0..w).any(|x| mask[y * w + x] && grown.contains(y, x)));
                let hits_other = placed.iter().any(|p| {
                    p.y0 < grown.y0 + grown.h && grown.y0 < p.y0 + p.h && p.x0 < grown.x0 + grown.w && grown.x0 < p.x0 + p.w
                });
                if !hits_object && !hits_other {
                    placed.push(r);
                    break;
                }
            }
        }
        let a = config.anchors[other];
        for r in &placed {
            for y in r.y0..r.y0 + r.h {
                for x in r.x0..r.x0 + r.w {
                    paint(&mut pixels, w, y, x, a, &noise, &mut rng);
                }
            }
        }
    }
    Scene { pixels, mask }
}

fn to_image(config: &SynthConfig, pixels: &[u8]) -> Tensor {
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(&[config.height, config.width, 3], data).expect("scene shape")
}

fn order(vocab: &ColorVocabulary) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vocab.len()).collect();
    idx.sort_by(|&a, &b| vocab.name(a).cmp(vocab.name(b)));
    idx
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Generates all three splits; ordering matches the directory loaders.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let palette = config.palette();
    let classes = order(&config.vocabulary);
    let jobs = |n: usize| -> Vec<(usize, usize)> { classes.iter().flat_map(|&c| (0..n).map(move |i| (c, i))).collect() };
    let weak = |split: u64, n: usize| -> Vec<WeakSample> {
        jobs(n)
            .into_par_iter()
            .map(|(label, i)| WeakSample {
                id: sample_id(i),
                label,
                image: to_image(config, &render(config, &palette, split, label, i).pixels),
            })
            .collect()
    };
    let train = weak(0, config.counts.train);
    let val = weak(1, config.counts.val);
    let test = jobs(config.counts.test)
        .into_par_iter()
        .map(|(label, i)| {
            let s = render(config, &palette, 2, label, i);
            let mask = Tensor::new(
                &[config.height, config.width],
                s.mask.iter().map(|&m| m as u8 as f64).collect(),
            )
            .expect("mask shape");
            EvalSample {
                sample: WeakSample {
                    id: sample_id(i),
                    label,
                    image: to_image(config, &s.pixels),
                },
                mask,
            }
        })
        .collect();
    Ok(SynthDataset {
        vocabulary: config.vocabulary.clone(),
        anchors: config.anchors.clone(),
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::presets::nearest_anchor;

    fn small() -> SynthConfig {
        SynthConfig {
            counts: SplitCounts { train: 3, val: 1, test: 2 },
            height: 32,
            width: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.image, y.image);
        }
        let c = synth_generate(&SynthConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn zero_jitter_paints_exact_anchor() {
        let cfg = SynthConfig { jitter: 0.0, ..small() };
        let d = synth_generate(&cfg).unwrap();
        for s in &d.test {
            let a = cfg.anchors[s.sample.label];
            for (px, &m) in s.sample.image.data().chunks(3).zip(s.mask.data()) {
                if m == 1.0 {
                    let rgb: Vec<u8> = px.iter().map(|v| (v * 255.0).round() as u8).collect();
                    assert_eq!(rgb, a);
                }
            }
        }
    }

    #[test]
    fn mean_object_color_is_nearest_to_label_anchor() {
        for clutter in [false, true] {
            let cfg = SynthConfig { clutter, ..small() };
            let d = synth_generate(&cfg).unwrap();
            for s in &d.test {
                let mut sum = [0.0; 3];
                let mut n = 0.0;
                for (px, &m) in s.sample.image.data().chunks(3).zip(s.mask.data()) {
                    if m == 1.0 {
                        (0..3).for_each(|c| sum[c] += px[c]);
                        n += 1.0;
                    }
                }
                assert!(n > 0.0);
                assert_eq!(nearest_anchor(&cfg.anchors, sum.map(|v| v / n)), s.sample.label);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(synth_generate(&SynthConfig { jitter: 0.2, ..small() }).is_err());
        let zero = SynthConfig {
            counts: SplitCounts { train: 0, val: 1, test: 1 },
            ..small()
        };
        assert!(synth_generate(&zero).is_err());
        assert!(synth_generate(&SynthConfig { background_margin: 2.0, ..small() }).is_err());
    }
}
