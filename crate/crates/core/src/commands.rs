//! Subcommand implementations behind the `chroma` binary.
//!
//! Exit codes: 0 success, 1 check failure, 2 I/O or data, 3 divergence,
//! 4 configuration or vocabulary mismatch.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::pnm::{self, Raster};
use crate::data::{self, has_masks, load_eval_dataset, load_weak_dataset, load_weak_dir, manifest_vocabulary, resize_bilinear, WeakSample};
use crate::error::{Error, Result};
use crate::nets::ColorVocabulary;
use crate::saliency::{binarize, compute_saliency};
use crate::selfcheck;
use crate::tensor::Tensor;
use crate::train::{evaluate, Ablation, Model, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

pub const TRAIN_LOG_TABLE: &str = "train_log.txt";
pub const TRAIN_LOG_KV: &str = "train_log.kv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const METRICS: &str = "metrics.txt";
pub const ATTENTION_PPM: &str = "attention.ppm";
pub const COLORNAMES_PPM: &str = "colornames.ppm";
pub const PREDICTION_TXT: &str = "prediction.txt";
pub const GRADCHECK_TXT: &str = "gradcheck.txt";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Dataset(_) | Error::Checkpoint(_) => EXIT_IO,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        Error::Config(_) | Error::Vocabulary(_) | Error::ImageSize { .. } | Error::LabelOutOfRange { .. } => EXIT_CONFIG,
        _ => EXIT_CHECK,
    }
}

/// Settings shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
}

impl Options {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        if let Some(a) = self.ablation {
            c.ablation = a;
        }
        if let Some(d) = &self.dataset {
            c.dataset = Some(d.clone());
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
        Ok(c)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (use --{what} or the `{what}` config key)")))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_vocabulary(expected: &ColorVocabulary, found: &ColorVocabulary, what: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Vocabulary(format!("{what} has ({found}), expected ({expected})")));
    }
    Ok(())
}

fn check_dataset_vocabulary(root: &Path, vocab: &ColorVocabulary) -> Result<()> {
    match manifest_vocabulary(root)? {
        Some(v) => check_vocabulary(vocab, &v, &format!("dataset {}", root.display())),
        None => Ok(()),
    }
}

/// Generates a synthetic dataset into an empty or missing directory.
pub fn cmd_synth(opts: &Options) -> Result<()> {
    let c = opts.run_config()?;
    let out = required(&c.out, "out")?;
    c.synth.validate()?;
    if out.is_dir() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::io(
            out,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty"),
        ));
    }
    let dataset = data::synth_generate(&c.synth)?;
    data::export(&dataset, &c.synth, out)?;
    log::info!(
        "wrote {} train, {} val, {} test images to {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn fit(samples: Vec<WeakSample>, (h, w): (usize, usize)) -> Result<Vec<WeakSample>> {
    samples
        .into_iter()
        .map(|mut s| {
            if s.image.shape() != [h, w, 3] {
                s.image = resize_bilinear(&s.image, h, w)?;
            }
            Ok(s)
        })
        .collect()
}

fn phase_checkpoint_name(tag: &str) -> String {
    format!("{tag}.ckpt")
}

fn write_logs(out: &Path, t: &Trainer) -> Result<()> {
    write_text(&out.join(TRAIN_LOG_TABLE), &t.log.to_table())?;
    write_text(&out.join(TRAIN_LOG_KV), &t.log.to_key_values())
}

/// Pretrains and alternately trains on `dataset`, writing checkpoints and logs to `out`.
pub fn cmd_train(opts: &Options) -> Result<Trainer> {
    let c = opts.run_config()?;
    let root = required(&c.dataset, "dataset")?.to_path_buf();
    let out = required(&c.out, "out")?.to_path_buf();
    if !root.is_dir() {
        return Err(Error::io(&root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found")));
    }
    check_dataset_vocabulary(&root, &c.vocabulary)?;
    let mut trainer = match &opts.checkpoint {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?, c.train.clone())?;
            check_vocabulary(&c.vocabulary, &t.model.vocabulary, &format!("checkpoint {}", p.display()))?;
            if let Some(a) = opts.ablation {
                if a != t.model.ablation {
                    return Err(Error::Config(format!(
                        "checkpoint was trained with ablation {}, not {}",
                        t.model.ablation.name(),
                        a.name()
                    )));
                }
            }
            t
        }
        None => {
            let model = Model::new(
                c.vocabulary.clone(),
                c.anchors.clone(),
                c.cn_width,
                c.va.clone(),
                c.precision,
                c.train.seed,
                c.ablation,
                c.resolution,
            )?;
            Trainer::new(model, c.train.clone())?
        }
    };
    let resolution = trainer.model.resolution;
    let dataset = load_weak_dataset(&root, &c.vocabulary)?;
    let train = fit(dataset.train, resolution)?;
    let val = fit(dataset.val, resolution)?;
    if train.len() < c.train.cn_batch.min(c.train.va_batch) {
        log::warn!("training split has {} images, fewer than a batch", train.len());
    }
    create_dir(&out)?;
    let masks = if trainer.progress.pretrain_epochs < c.train.pretrain_epochs {
        train
            .iter()
            .map(|s| binarize(&compute_saliency(&s.image)?, c.saliency))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let result = trainer.run(&train, &val, &masks, &mut |tag, t| {
        let name = if tag == "pretrain" { PRETRAIN_CKPT.to_string() } else { phase_checkpoint_name(tag) };
        t.checkpoint().save(&out.join(name))?;
        write_logs(&out, t)?;
        log::info!("{tag}: epoch {} loss {:.6}", t.progress.epochs, t.log.records.last().map_or(f64::NAN, |r| r.loss));
        Ok(())
    });
    write_logs(&out, &trainer)?;
    result?;
    trainer.checkpoint().save(&out.join(FINAL_CKPT))?;
    Ok(trainer)
}

/// Evaluates a checkpoint on the configured split and writes `metrics.txt`.
pub fn cmd_eval(opts: &Options) -> Result<String> {
    let c = opts.run_config()?;
    let ckpt_path = required(&opts.checkpoint, "checkpoint")?;
    let root = required(&c.dataset, "dataset")?;
    let out = required(&c.out, "out")?;
    let model = Model::from_checkpoint(&Checkpoint::load(ckpt_path)?)?;
    if opts.config.is_some() {
        check_vocabulary(&c.vocabulary, &model.vocabulary, &format!("checkpoint {}", ckpt_path.display()))?;
    }
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found")));
    }
    check_dataset_vocabulary(root, &model.vocabulary)?;
    let split_dir = root.join(&c.eval_split);
    let dir = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let (samples, masks): (Vec<WeakSample>, Option<Vec<Tensor>>) = if has_masks(&dir) {
        let set = load_eval_dataset(&dir, &model.vocabulary)?;
        let (s, m) = set.into_iter().map(|e| (e.sample, e.mask)).unzip();
        (s, Some(m))
    } else {
        (load_weak_dir(&dir, &model.vocabulary)?, None)
    };
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{}: no images to evaluate", dir.display())));
    }
    let report = evaluate(&model, &samples, masks.as_deref())?;
    let text = format!("split = {}\nablation = {}\n\n{}", c.eval_split, model.ablation.name(), report.to_key_values());
    create_dir(out)?;
    write_text(&out.join(METRICS), &text)?;
    Ok(text)
}

/// Endpoints of the attention colormap: dark blue for zero, yellow for the maximum.
pub const COLORMAP_LOW: [u8; 3] = [0, 0, 128];
pub const COLORMAP_HIGH: [u8; 3] = [255, 224, 0];

/// 256-entry blue to yellow table, linear in each channel between the endpoints.
pub fn colormap() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, e) in table.iter_mut().enumerate() {
        for c in 0..3 {
            let (lo, hi) = (COLORMAP_LOW[c] as f64, COLORMAP_HIGH[c] as f64);
            e[c] = (lo + (hi - lo) * i as f64 / 255.0).round() as u8;
        }
    }
    table
}

/// Heatmap of `a` normalized by its maximum; an all-zero map is uniformly entry 0.
pub fn attention_heatmap(a: &Tensor) -> Raster {
    let table = colormap();
    let max = a.data().iter().cloned().fold(0.0, f64::max);
    let pixels = a
        .data()
        .iter()
        .flat_map(|&v| {
            let i = if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as usize } else { 0 };
            table[i]
        })
        .collect();
    Raster::new(a.shape()[1], a.shape()[0], 3, pixels)
}

/// Runs one image through a checkpoint and writes the heatmap, the color
/// name map and the image-level distribution.
pub fn cmd_infer(opts: &Options, image: &Path) -> Result<String> {
    let ckpt_path = required(&opts.checkpoint, "checkpoint")?;
    let out = required(&opts.out, "out")?;
    let model = Model::from_checkpoint(&Checkpoint::load(ckpt_path)?)?;
    let x = pnm::read_ppm(image)?;
    let (y, a, score) = model.predict(&x)?;
    create_dir(out)?;
    pnm::write(&out.join(ATTENTION_PPM), &attention_heatmap(a.tensor()))?;
    let (h, w) = (y.tensor().shape()[0], y.tensor().shape()[1]);
    let names: Vec<u8> = y.argmax().into_iter().flat_map(|k| model.anchors[k]).collect();
    pnm::write(&out.join(COLORNAMES_PPM), &Raster::new(w, h, 3, names))?;
    let mut text = String::new();
    for (k, p) in score.probabilities().iter().enumerate() {
        text.push_str(&format!("{} = {p:.6}\n", model.vocabulary.name(k)));
    }
    text.push_str(&format!("predicted = {}\n", model.vocabulary.name(score.argmax())));
    write_text(&out.join(PREDICTION_TXT), &text)?;
    Ok(text)
}

/// Runs the finite-difference suite; returns the report and whether every check passed.
pub fn cmd_gradcheck(opts: &Options) -> Result<(String, bool)> {
    let report = selfcheck::run_suite()?;
    let text = report.to_text();
    if let Some(out) = &opts.out {
        create_dir(out)?;
        write_text(&out.join(GRADCHECK_TXT), &text)?;
    }
    Ok((text, report.passed()))
}
