//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key is optional; unknown keys are rejected.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | - | dataset root for `train` / `eval` |
//! | `out` | - | output directory |
//! | `vocabulary` | `basic6` | preset name or comma-separated names |
//! | `anchors` | preset | comma-separated `rrggbb`, required with explicit names |
//! | `resolution` | `64x64` | training size `HxW` (or a single side) |
//! | `precision` | `f32` | stored parameter precision, `f32` or `f64` |
//! | `cn_width` | 72 | hidden width of the color naming branch |
//! | `va_channels` | `16,32,64` | attention encoder widths |
//! | `va_fc` | 512 | bottleneck fully connected width |
//! | `va_grid` | derived | bottleneck side; default `height / 2^stages` |
//! | `ablation` | `none` | `none`, `no-attention`, `no-prior`, `no-alternation` |
//! | `saliency_threshold` | `mean` | `mean` or a fixed value in (0, 1) |
//! | `eval_split` | `test` | split evaluated by `eval` |
//! | `learning_rate` `lr_decay_epochs` `lr_decay_factor` `momentum` | 0.01, 20, 10, 0.9 | SGD |
//! | `cn_batch` `va_batch` | 32, 6 | batch size per branch phase |
//! | `pretrain_epochs` `phase_epochs` `max_phases` `tol` | 10, 5, 10, 1e-3 | schedule (`tol = inf` stops after two phases) |
//! | `seed` | 0 | seeds data synthesis, initialization and batch order |
//! | `n_per_class` | - | sets train/val/test per class to n, n/4, n/2 (rounded up) |
//! | `train_per_class` `val_per_class` `test_per_class` | 40, 10, 20 | synthetic split sizes |
//! | `jitter` `center_sigma` `scale_min` `scale_max` | 0.03, 0.15, 0.3, 0.5 | synthetic objects |
//! | `shapes` | `rectangle,ellipse` | synthetic object shapes |
//! | `background_margin` `tile` `texture` | 0.25, 8, 0.08 | synthetic background |
//! | `clutter` `clutter_ratio` | false, 1.2 | border distractors of another class |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::presets::{parse_hex, preset, DEFAULT_PRESET};
use crate::data::{parse_key_values, Shape, SplitCounts, SynthConfig};
use crate::error::{Error, Result};
use crate::nets::cn::DEFAULT_WIDTH;
use crate::nets::{ColorVocabulary, VaConfig};
use crate::params::Precision;
use crate::saliency::Threshold;
use crate::train::{Ablation, TrainConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub vocabulary: ColorVocabulary,
    pub anchors: Vec<[u8; 3]>,
    pub resolution: (usize, usize),
    pub precision: Precision,
    pub cn_width: usize,
    pub va: VaConfig,
    pub ablation: Ablation,
    pub saliency: Threshold,
    pub eval_split: String,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_text("").expect("defaults are valid")
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_resolution(v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((parse("resolution", h.trim())?, parse("resolution", w.trim())?)),
        None => {
            let s = parse("resolution", v)?;
            Ok((s, s))
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text).map_err(Error::Config)?;
        let (mut vocabulary, mut anchors) = preset(DEFAULT_PRESET)?;
        let mut explicit_anchors = false;
        let mut resolution = (64, 64);
        let mut va = VaConfig::default();
        let mut grid = None;
        let mut c = RunConfig {
            dataset: None,
            out: None,
            vocabulary: vocabulary.clone(),
            anchors: anchors.clone(),
            resolution,
            precision: Precision::F32,
            cn_width: DEFAULT_WIDTH,
            va: va.clone(),
            ablation: Ablation::None,
            saliency: Threshold::Mean,
            eval_split: "test".into(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        };
        let mut counts = SplitCounts::default();
        let mut seen = Vec::new();
        for (k, v) in &kv {
            if seen.contains(k) {
                return Err(Error::Config(format!("duplicate key {k:?}")));
            }
            seen.push(k.clone());
            let v = v.as_str();
            let t = &mut c.train;
            let s = &mut c.synth;
            match k.as_str() {
                "dataset" => c.dataset = Some(PathBuf::from(v)),
                "out" => c.out = Some(PathBuf::from(v)),
                "vocabulary" => {
                    if v.contains(',') {
                        vocabulary = ColorVocabulary::new(v.split(',').map(str::trim))?;
                    } else {
                        (vocabulary, anchors) = preset(v)?;
                    }
                }
                "anchors" => {
                    anchors = v
                        .split(',')
                        .map(|h| parse_hex(h.trim()).ok_or_else(|| Error::Config(format!("anchors: bad color {h:?}"))))
                        .collect::<Result<_>>()?;
                    explicit_anchors = true;
                }
                "resolution" => resolution = parse_resolution(v)?,
                "precision" => {
                    c.precision = match v {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                    }
                }
                "cn_width" => c.cn_width = parse(k, v)?,
                "va_channels" => va.channels = parse_list(k, v)?,
                "va_fc" => va.fc_width = parse(k, v)?,
                "va_grid" => grid = Some(parse(k, v)?),
                "ablation" => {
                    c.ablation = Ablation::parse(v).ok_or_else(|| Error::Config(format!("unknown ablation {v:?}")))?
                }
                "saliency_threshold" => {
                    c.saliency = if v == "mean" { Threshold::Mean } else { Threshold::Fixed(parse(k, v)?) }
                }
                "eval_split" => {
                    if !crate::data::SPLITS.contains(&v) {
                        return Err(Error::Config(format!("eval_split must be train, val or test, got {v:?}")));
                    }
                    c.eval_split = v.to_string();
                }
                "learning_rate" => t.learning_rate = parse(k, v)?,
                "lr_decay_epochs" => t.lr_decay_epochs = parse(k, v)?,
                "lr_decay_factor" => t.lr_decay_factor = parse(k, v)?,
                "momentum" => t.momentum = parse(k, v)?,
                "cn_batch" => t.cn_batch = parse(k, v)?,
                "va_batch" => t.va_batch = parse(k, v)?,
                "pretrain_epochs" => t.pretrain_epochs = parse(k, v)?,
                "phase_epochs" => t.phase_epochs = parse(k, v)?,
                "max_phases" => t.max_phases = parse(k, v)?,
                "tol" => t.tol = parse(k, v)?,
                "seed" => {
                    t.seed = parse(k, v)?;
                    s.seed = t.seed;
                }
                "n_per_class" => counts = SplitCounts::from_train(parse(k, v)?),
                "train_per_class" => counts.train = parse(k, v)?,
                "val_per_class" => counts.val = parse(k, v)?,
                "test_per_class" => counts.test = parse(k, v)?,
                "jitter" => s.jitter = parse(k, v)?,
                "center_sigma" => s.center_sigma = parse(k, v)?,
                "scale_min" => s.scale.0 = parse(k, v)?,
                "scale_max" => s.scale.1 = parse(k, v)?,
                "shapes" => {
                    s.shapes = v
                        .split(',')
                        .map(|n| Shape::parse(n.trim()).ok_or_else(|| Error::Config(format!("unknown shape {n:?}"))))
                        .collect::<Result<_>>()?
                }
                "background_margin" => s.background_margin = parse(k, v)?,
                "tile" => s.tile = parse(k, v)?,
                "texture" => s.texture = parse(k, v)?,
                "clutter" => s.clutter = parse_bool(k, v)?,
                "clutter_ratio" => s.clutter_ratio = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        if vocabulary.len() != anchors.len() {
            let hint = if explicit_anchors { "" } else { " (explicit names need an `anchors` list)" };
            return Err(Error::Config(format!(
                "{} color names but {} anchors{hint}",
                vocabulary.len(),
                anchors.len()
            )));
        }
        va.grid = grid.unwrap_or_else(|| va.grid_for(resolution.0));
        c.vocabulary = vocabulary;
        c.anchors = anchors;
        c.resolution = resolution;
        c.va = va;
        c.synth.vocabulary = c.vocabulary.clone();
        c.synth.anchors = c.anchors.clone();
        c.synth.height = resolution.0;
        c.synth.width = resolution.1;
        c.synth.counts = counts;
        c.train.validate()?;
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }
}
