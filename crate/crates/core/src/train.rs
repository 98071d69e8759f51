//! Saliency-masked pretraining, alternating two-branch training and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{restore_store, store_records, Checkpoint, Record};
use crate::data::presets::{parse_hex, to_hex};
use crate::data::{resize_bilinear, WeakSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{attention_localization, image_accuracy, pixel_accuracy};
use crate::modulation::{AttentionMap, ImageScore};
use crate::nets::layers::{apply_bn_updates, Ctx};
use crate::nets::{image_scores, Branches, CnConfig, CnNet, ColorNameMap, ColorVocabulary, Mode, SaliencyMask, VaConfig, VaNet};
use crate::optim::Sgd;
use crate::params::{ParamStore, Precision};
use crate::tensor::Tensor;

/// Images per graph when running a frozen branch over a whole split.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Attention fixed to one everywhere; only the color naming branch trains.
    NoAttention,
    /// Spatial prior replaced by ones.
    NoPrior,
    /// Both branches trained jointly instead of alternately.
    NoAlternation,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoAttention, Ablation::NoPrior, Ablation::NoAlternation];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAttention => "no-attention",
            Ablation::NoPrior => "no-prior",
            Ablation::NoAlternation => "no-alternation",
        }
    }

    pub fn branches(self) -> Branches {
        Branches {
            attention: self != Ablation::NoAttention,
            prior: self != Ablation::NoPrior,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// The rate is divided by `lr_decay_factor` every `lr_decay_epochs` global epochs.
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub cn_batch: usize,
    pub va_batch: usize,
    pub pretrain_epochs: usize,
    pub phase_epochs: usize,
    pub max_phases: usize,
    /// Relative change of phase-mean loss below which training stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_decay_epochs: 20,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            cn_batch: 32,
            va_batch: 6,
            pretrain_epochs: 10,
            phase_epochs: 5,
            max_phases: 10,
            tol: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.cn_batch == 0 || self.va_batch == 0 || self.phase_epochs == 0 || self.lr_decay_epochs == 0 {
            return Err(Error::Config("batch sizes, phase epochs and decay interval must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol {} must be positive", self.tol)));
        }
        Ok(())
    }

    /// Learning rate for the 0-based global epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate / self.lr_decay_factor.powi((epoch / self.lr_decay_epochs) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Cn,
    Va,
    Joint,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Pretrain => "PRETRAIN",
            Phase::Cn => "CN",
            Phase::Va => "VA",
            Phase::Joint => "JOINT",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based global epoch.
    pub epoch: usize,
    pub phase: Phase,
    /// 0 for pretraining, then 1, 2, ... for each training phase.
    pub phase_index: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    pub cn_fingerprint: u64,
    pub va_fingerprint: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub ablation: Ablation,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(ablation: Ablation) -> Self {
        Self {
            ablation,
            records: Vec::new(),
        }
    }

    /// Equality ignoring wall-clock times.
    pub fn same_run(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| -> Vec<EpochRecord> {
            l.records.iter().map(|r| EpochRecord { wall_seconds: 0.0, ..r.clone() }).collect()
        };
        self.ablation == other.ablation && strip(self) == strip(other)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("# ablation: {}\n", self.ablation.name());
        s.push_str("epoch  phase     idx  lr        loss        val_acc  seconds\n");
        for r in &self.records {
            let acc = r.val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<6} {:<9} {:<4} {:<9.2e} {:<11.6} {:<8} {:.2}",
                r.epoch,
                r.phase.tag(),
                r.phase_index,
                r.lr,
                r.loss,
                acc,
                r.wall_seconds
            );
        }
        s
    }

    /// One `key = value` line per field, records separated by blank lines.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("ablation = {}\n", self.ablation.name());
        for r in &self.records {
            let _ = write!(
                s,
                "\nepoch = {}\nphase = {}\nphase_index = {}\nlr = {}\nloss = {}\nval_accuracy = {}\ncn_fingerprint = {:016x}\nva_fingerprint = {:016x}\nwall_seconds = {:.3}\n",
                r.epoch,
                r.phase.tag(),
                r.phase_index,
                r.lr,
                r.loss,
                r.val_accuracy.map_or("none".to_string(), |a| a.to_string()),
                r.cn_fingerprint,
                r.va_fingerprint,
                r.wall_seconds
            );
        }
        s
    }
}

/// Both branches plus everything needed to interpret their outputs.
#[derive(Clone, Debug)]
pub struct Model {
    pub vocabulary: ColorVocabulary,
    /// Display color per class.
    pub anchors: Vec<[u8; 3]>,
    pub cn: CnNet,
    pub va: VaNet,
    pub ablation: Ablation,
    /// Training resolution `(H, W)`.
    pub resolution: (usize, usize),
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    parts.iter().for_each(|p| data.extend_from_slice(p.data()));
    Tensor::new(&shape, data).expect("equal shapes")
}

fn unstack(t: &Tensor) -> Vec<Tensor> {
    let n = t.shape()[0];
    let inner = &t.shape()[1..];
    let size = t.len() / n.max(1);
    t.data().chunks(size).map(|c| Tensor::new(inner, c.to_vec()).expect("chunk")).collect()
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocabulary: ColorVocabulary,
        anchors: Vec<[u8; 3]>,
        cn_width: usize,
        va_config: VaConfig,
        precision: Precision,
        seed: u64,
        ablation: Ablation,
        resolution: (usize, usize),
    ) -> Result<Self> {
        if anchors.len() != vocabulary.len() {
            return Err(Error::Config(format!("{} anchors for {} classes", anchors.len(), vocabulary.len())));
        }
        let cn = CnNet::new(
            CnConfig {
                classes: vocabulary.len(),
                width: cn_width,
            },
            precision,
            mix(seed, 1),
        )?;
        let va = VaNet::new(va_config, precision, mix(seed, 2))?;
        CnNet::check_size(resolution.0, resolution.1)?;
        va.check_size(resolution.0, resolution.1)?;
        Ok(Self {
            vocabulary,
            anchors,
            cn,
            va,
            ablation,
            resolution,
        })
    }

    pub fn branches(&self) -> Branches {
        self.ablation.branches()
    }

    /// Eval-mode color name maps, one `[H, W, C]` per image.
    pub fn cn_maps(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let bind = self.cn.store.bind(&mut g, false);
            let x = g.constant(stack(chunk));
            let mut ctx = Ctx::new(&mut g, &self.cn.store, &bind, Mode::Eval);
            let y = self.cn.build(&mut ctx, x)?;
            out.extend(unstack(g.value(y)));
        }
        Ok(out)
    }

    /// Eval-mode attention maps, one `[H, W]` per image (ones under `NoAttention`).
    pub fn va_maps(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let branches = self.branches();
        if !branches.attention {
            return Ok(images.iter().map(|im| Tensor::ones(&im.shape()[..2])).collect());
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let bind = self.va.store.bind(&mut g, false);
            let x = g.constant(stack(chunk));
            let mut ctx = Ctx::new(&mut g, &self.va.store, &bind, Mode::Eval);
            let a = self.va.build(&mut ctx, x, branches.prior)?;
            out.extend(unstack(g.value(a)));
        }
        Ok(out)
    }

    fn input_for_scores(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if self.va.check_size(h, w).is_ok() {
            Ok(image.clone())
        } else {
            resize_bilinear(image, self.resolution.0, self.resolution.1)
        }
    }

    /// Color name map at native size, plus attention and image score.
    ///
    /// Images the attention branch cannot take are resized to the training
    /// resolution for the attention/score path only.
    pub fn predict(&self, image: &Tensor) -> Result<(ColorNameMap, AttentionMap, ImageScore)> {
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(Error::shape("predict", format!("expected [H,W,3], got {:?}", image.shape())));
        }
        let y_native = self.cn.forward(image)?;
        let x = self.input_for_scores(image)?;
        let (y, a) = if x.shape() == image.shape() {
            (y_native.tensor().clone(), self.va_maps(&[&x])?.remove(0))
        } else {
            (self.cn_maps(&[&x])?.remove(0), self.va_maps(&[&x])?.remove(0))
        };
        let s = score_from_maps(&y, &a)?;
        Ok((y_native, AttentionMap::new(a)?, s))
    }

    /// Image scores for many images at once.
    pub fn scores(&self, images: &[&Tensor]) -> Result<Vec<ImageScore>> {
        let inputs: Vec<Tensor> = images.iter().map(|im| self.input_for_scores(im)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let ys = self.cn_maps(&refs)?;
        let attention = self.va_maps(&refs)?;
        ys.iter().zip(&attention).map(|(y, a)| score_from_maps(y, a)).collect()
    }

    fn header(&self, ckpt: &mut Checkpoint) {
        let precision = match self.cn.store.precision() {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let hex: Vec<String> = self.anchors.iter().map(|&a| to_hex(a)).collect();
        let va = self.va.config();
        let chans: Vec<String> = va.channels.iter().map(|c| c.to_string()).collect();
        ckpt.set("format_version", 1);
        ckpt.set("vocabulary", &self.vocabulary);
        ckpt.set("anchors", hex.join(","));
        ckpt.set("height", self.resolution.0);
        ckpt.set("width", self.resolution.1);
        ckpt.set("ablation", self.ablation.name());
        ckpt.set("precision", precision);
        ckpt.set("cn.width", self.cn.config().width);
        ckpt.set("va.channels", chans.join(","));
        ckpt.set("va.fc_width", va.fc_width);
        ckpt.set("va.grid", va.grid);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        self.header(&mut c);
        c.params = store_records(&self.cn.store);
        c.params.extend(store_records(&self.va.store));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let bad = |k: &str| Error::Checkpoint(format!("bad header value for {k}"));
        let num = |k: &str| -> Result<usize> { c.require(k)?.parse().map_err(|_| bad(k)) };
        let vocabulary = ColorVocabulary::new(c.require("vocabulary")?.split(','))?;
        let anchors = c
            .require("anchors")?
            .split(',')
            .map(|h| parse_hex(h).ok_or_else(|| bad("anchors")))
            .collect::<Result<Vec<_>>>()?;
        let ablation = Ablation::parse(c.require("ablation")?).ok_or_else(|| bad("ablation"))?;
        let precision = match c.require("precision")? {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            _ => return Err(bad("precision")),
        };
        let channels = c
            .require("va.channels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("va.channels")))
            .collect::<Result<Vec<usize>>>()?;
        let va_config = VaConfig {
            channels,
            fc_width: num("va.fc_width")?,
            grid: num("va.grid")?,
        };
        let resolution = (num("height")?, num("width")?);
        let mut m = Model::new(vocabulary, anchors, num("cn.width")?, va_config, precision, 0, ablation, resolution)?;
        restore_store(&mut m.cn.store, &c.params)?;
        restore_store(&mut m.va.store, &c.params)?;
        if c.params.len() != m.cn.store.len() + m.va.store.len() {
            return Err(Error::Checkpoint("unexpected extra parameter records".into()));
        }
        Ok(m)
    }
}

/// `softmax(mean_xy(A · Y))` on already computed maps.
pub fn score_from_maps(y: &Tensor, a: &Tensor) -> Result<ImageScore> {
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let av = g.constant(a.clone());
    let s = image_scores(&mut g, yv, Some(av))?;
    ImageScore::new(g.value(s).clone())
}

/// Training progress stored in checkpoints for resuming.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub phases: usize,
    pub phase_losses: Vec<f64>,
    pub converged: bool,
}

/// Which branches a training phase updates, and the loss it uses.
fn phase_kind(ablation: Ablation, index: usize) -> Phase {
    match ablation {
        Ablation::NoAttention => Phase::Cn,
        Ablation::NoAlternation => Phase::Joint,
        // start with the attention branch; the color branch was just pretrained
        _ if index.is_multiple_of(2) => Phase::Va,
        _ => Phase::Cn,
    }
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(1e-12)
}

/// Called with a tag (`pretrain`, `phaseNN`) whenever a stage completes.
pub type Hook<'a> = dyn FnMut(&str, &Trainer) -> Result<()> + 'a;

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub progress: Progress,
    pub log: TrainLog,
    cn_opt: Sgd,
    va_opt: Sgd,
}

struct Batch {
    images: Tensor,
    labels: Vec<usize>,
    masks: Option<Tensor>,
    y: Option<Tensor>,
    a: Option<Tensor>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let log = TrainLog::new(model.ablation);
        Ok(Self {
            cn_opt: Sgd::new(config.learning_rate, config.momentum)?,
            va_opt: Sgd::new(config.learning_rate, config.momentum)?,
            model,
            config,
            progress: Progress::default(),
            log,
        })
    }

    /// Restores model, optimizer state and progress.
    pub fn from_checkpoint(c: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = Model::from_checkpoint(c)?;
        let mut t = Self::new(model, config)?;
        let num = |k: &str| -> Result<usize> {
            c.require(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad header value for {k}")))
        };
        t.progress.epochs = num("progress.epochs")?;
        t.progress.pretrain_epochs = num("progress.pretrain_epochs")?;
        t.progress.phases = num("progress.phases")?;
        t.progress.converged = c.require("progress.converged")? == "true";
        let losses = c.require("progress.phase_losses")?;
        t.progress.phase_losses = if losses.is_empty() {
            Vec::new()
        } else {
            losses
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad progress.phase_losses".into())))
                .collect::<Result<_>>()?
        };
        for r in &c.optimizer {
            let opt = if r.name.starts_with("cn.") { &mut t.cn_opt } else { &mut t.va_opt };
            opt.set_velocity(r.name.clone(), r.values());
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint();
        let cfg = &self.config;
        let losses: Vec<String> = self.progress.phase_losses.iter().map(|l| l.to_string()).collect();
        c.set("progress.epochs", self.progress.epochs);
        c.set("progress.pretrain_epochs", self.progress.pretrain_epochs);
        c.set("progress.phases", self.progress.phases);
        c.set("progress.phase_losses", losses.join(","));
        c.set("progress.converged", self.progress.converged);
        c.set("train.learning_rate", cfg.learning_rate);
        c.set("train.lr_decay_epochs", cfg.lr_decay_epochs);
        c.set("train.lr_decay_factor", cfg.lr_decay_factor);
        c.set("train.momentum", cfg.momentum);
        c.set("train.cn_batch", cfg.cn_batch);
        c.set("train.va_batch", cfg.va_batch);
        c.set("train.phase_epochs", cfg.phase_epochs);
        c.set("train.seed", cfg.seed);
        let velocity = |opt: &Sgd, store: &ParamStore| -> Vec<Record> {
            opt.velocity()
                .iter()
                .map(|(name, v)| {
                    let shape = store.find(name).map_or(vec![v.len()], |id| store.get(id).shape().to_vec());
                    Record::new(name, &shape, v)
                })
                .collect()
        };
        c.optimizer = velocity(&self.cn_opt, &self.model.cn.store);
        c.optimizer.extend(velocity(&self.va_opt, &self.model.va.store));
        c
    }

    fn check_data(&self, samples: &[WeakSample]) -> Result<()> {
        let (h, w) = self.model.resolution;
        for s in samples {
            if s.image.shape() != [h, w, 3] {
                return Err(Error::Dataset(format!(
                    "image {} is {:?}; training needs {h}x{w}x3 (resize first)",
                    s.id,
                    s.image.shape()
                )));
            }
            if s.label >= self.model.vocabulary.len() {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: self.model.vocabulary.len(),
                });
            }
        }
        Ok(())
    }

    fn batch_size(&self, phase: Phase) -> usize {
        match phase {
            Phase::Va => self.config.va_batch,
            _ => self.config.cn_batch,
        }
    }

    /// Runs pretraining (if epochs remain) and then training phases until
    /// convergence or `max_phases`.
    pub fn run(
        &mut self,
        train: &[WeakSample],
        val: &[WeakSample],
        masks: &[SaliencyMask],
        hook: &mut Hook,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        self.check_data(train)?;
        self.check_data(val)?;
        if self.progress.pretrain_epochs < self.config.pretrain_epochs {
            if masks.len() != train.len() {
                return Err(Error::Dataset(format!("{} saliency masks for {} images", masks.len(), train.len())));
            }
            while self.progress.pretrain_epochs < self.config.pretrain_epochs {
                self.epoch(Phase::Pretrain, 0, train, val, Some(masks), None, None)?;
                self.progress.pretrain_epochs += 1;
            }
            hook("pretrain", self)?;
        }
        while !self.progress.converged && self.progress.phases < self.config.max_phases {
            let index = self.progress.phases;
            let phase = phase_kind(self.model.ablation, index);
            let mean = self.phase(phase, index + 1, train, val)?;
            self.progress.phases += 1;
            self.progress.phase_losses.push(mean);
            if index % 2 == 1 {
                let prev = self.progress.phase_losses[index - 1];
                self.progress.converged = relative_change(prev, mean) < self.config.tol;
            }
            hook(&format!("phase{:02}", index + 1), self)?;
        }
        Ok(())
    }

    /// One training phase; returns the mean of its epoch losses.
    fn phase(&mut self, phase: Phase, index: usize, train: &[WeakSample], val: &[WeakSample]) -> Result<f64> {
        let all: Vec<&WeakSample> = train.iter().chain(val).collect();
        let images: Vec<&Tensor> = all.iter().map(|s| &s.image).collect();
        // the frozen branch is deterministic for the whole phase, so run it once
        let (y_cache, a_cache) = match phase {
            Phase::Va => (Some(self.model.cn_maps(&images)?), None),
            Phase::Cn => (None, Some(self.model.va_maps(&images)?)),
            _ => (None, None),
        };
        let (cn_before, va_before) = (self.model.cn.store.fingerprint(), self.model.va.store.fingerprint());
        let mut total = 0.0;
        for _ in 0..self.config.phase_epochs {
            total += self.epoch(phase, index, train, val, None, y_cache.as_deref(), a_cache.as_deref())?;
        }
        let frozen_changed = match phase {
            Phase::Va => self.model.cn.store.fingerprint() != cn_before,
            Phase::Cn => self.model.va.store.fingerprint() != va_before,
            _ => false,
        };
        if frozen_changed {
            return Err(Error::invalid("alternating_train", format!("frozen branch changed during {} phase", phase.tag())));
        }
        Ok(total / self.config.phase_epochs as f64)
    }

    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        phase: Phase,
        index: usize,
        train: &[WeakSample],
        val: &[WeakSample],
        masks: Option<&[SaliencyMask]>,
        y_cache: Option<&[Tensor]>,
        a_cache: Option<&[Tensor]>,
    ) -> Result<f64> {
        let start = Instant::now();
        let epoch = self.progress.epochs;
        let lr = self.config.lr_at(epoch);
        self.cn_opt.learning_rate = lr;
        self.va_opt.learning_rate = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64 + 1)));
        let bs = self.batch_size(phase).min(train.len());
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(bs) {
            let batch = Batch {
                images: stack(&idx.iter().map(|&i| &train[i].image).collect::<Vec<_>>()),
                labels: idx.iter().map(|&i| train[i].label).collect(),
                masks: masks.map(|m| stack(&idx.iter().map(|&i| m[i].tensor()).collect::<Vec<_>>())),
                y: y_cache.map(|c| stack(&idx.iter().map(|&i| &c[i]).collect::<Vec<_>>())),
                a: a_cache.map(|c| stack(&idx.iter().map(|&i| &c[i]).collect::<Vec<_>>())),
            };
            let loss = self.step(phase, &batch).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch: epoch + 1, loss: f64::NAN },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, loss });
            }
            sum += loss * idx.len() as f64;
            count += idx.len();
        }
        let loss = sum / count as f64;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(self.val_accuracy(phase, train.len(), val, y_cache, a_cache)?)
        };
        self.progress.epochs += 1;
        let record = EpochRecord {
            epoch: epoch + 1,
            phase,
            phase_index: index,
            lr,
            loss,
            val_accuracy,
            cn_fingerprint: self.model.cn.store.fingerprint(),
            va_fingerprint: self.model.va.store.fingerprint(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} {} phase {} loss {:.6} val {:?}",
            record.epoch,
            phase.tag(),
            index,
            loss,
            val_accuracy
        );
        self.log.records.push(record);
        Ok(loss)
    }

    /// Validation image-wise accuracy, reusing cached frozen-branch outputs
    /// (caches cover `train ++ val`).
    fn val_accuracy(
        &self,
        phase: Phase,
        offset: usize,
        val: &[WeakSample],
        y_cache: Option<&[Tensor]>,
        a_cache: Option<&[Tensor]>,
    ) -> Result<f64> {
        let images: Vec<&Tensor> = val.iter().map(|s| &s.image).collect();
        let ys = match (phase, y_cache) {
            (Phase::Va, Some(c)) => c[offset..].to_vec(),
            _ => self.model.cn_maps(&images)?,
        };
        let attention = match (phase, a_cache) {
            (Phase::Cn, Some(c)) => c[offset..].to_vec(),
            _ => self.model.va_maps(&images)?,
        };
        let scores = ys.iter().zip(&attention).map(|(y, a)| score_from_maps(y, a)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = val.iter().map(|s| s.label).collect();
        image_accuracy(&scores, &labels)
    }

    fn step(&mut self, phase: Phase, b: &Batch) -> Result<f64> {
        let model = &mut self.model;
        let branches = model.ablation.branches();
        let mut g = Graph::new();
        let train_cn = matches!(phase, Phase::Pretrain | Phase::Cn | Phase::Joint);
        let train_va = matches!(phase, Phase::Va | Phase::Joint);
        let cn_bind = train_cn.then(|| model.cn.store.bind(&mut g, true));
        let va_bind = train_va.then(|| model.va.store.bind(&mut g, true));
        let x = g.constant(b.images.clone());
        let mut cn_updates = Vec::new();
        let mut va_updates = Vec::new();
        let y: Var = match &cn_bind {
            Some(bind) => {
                let mut ctx = Ctx::new(&mut g, &model.cn.store, bind, Mode::Train);
                let y = model.cn.build(&mut ctx, x)?;
                cn_updates = ctx.updates;
                y
            }
            None => g.constant(b.y.clone().expect("cached color maps")),
        };
        let loss = if phase == Phase::Pretrain {
            g.masked_nll(y, b.masks.as_ref().expect("pretraining masks"), &b.labels)?
        } else {
            let a = match &va_bind {
                Some(bind) => {
                    let mut ctx = Ctx::new(&mut g, &model.va.store, bind, Mode::Train);
                    let a = model.va.build(&mut ctx, x, branches.prior)?;
                    va_updates = ctx.updates;
                    a
                }
                None => match &b.a {
                    Some(a) => g.constant(a.clone()),
                    None => {
                        let s = b.images.shape();
                        g.constant(Tensor::ones(&s[..3]))
                    }
                },
            };
            let s = image_scores(&mut g, y, Some(a))?;
            g.cross_entropy(s, &b.labels)?
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(loss)?;
        if let Some(bind) = &cn_bind {
            let grads = bind.grads(&model.cn.store, &g);
            self.cn_opt.step(&mut model.cn.store, &grads)?;
            apply_bn_updates(&mut model.cn.store, &cn_updates)?;
        }
        if let Some(bind) = &va_bind {
            let grads = bind.grads(&model.va.store, &g);
            self.va_opt.step(&mut model.va.store, &grads)?;
            apply_bn_updates(&mut model.va.store, &va_updates)?;
        }
        Ok(value)
    }
}

/// Metrics over one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub image_accuracy: f64,
    pub pixel_accuracy: Option<f64>,
    pub localization: Option<LocalizationSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationSummary {
    pub mean_inside: f64,
    pub mean_outside: f64,
    pub mean_iou: f64,
    /// Fraction of images whose inside/outside attention ratio is at least 2.
    pub ratio_at_least_2: f64,
    pub evaluated: usize,
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[image_wise]\nimages = {}\naccuracy = {:.6}", self.images, self.image_accuracy);
        if let Some(p) = self.pixel_accuracy {
            let _ = writeln!(s, "\n[pixel_wise]\naccuracy = {p:.6}");
        }
        if let Some(l) = &self.localization {
            let _ = writeln!(
                s,
                "\n[attention_localization]\nimages = {}\nmean_inside = {:.6}\nmean_outside = {:.6}\nmean_iou = {:.6}\nratio_at_least_2 = {:.6}",
                l.evaluated, l.mean_inside, l.mean_outside, l.mean_iou, l.ratio_at_least_2
            );
        }
        s
    }
}

/// Image-wise accuracy on `samples`; with `masks`, also pixel-wise accuracy
/// (color branch only, native resolution) and attention localization.
pub fn evaluate(model: &Model, samples: &[WeakSample], masks: Option<&[Tensor]>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let scores = model.scores(&images)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let image_acc = image_accuracy(&scores, &labels)?;
    let Some(masks) = masks else {
        return Ok(EvalReport {
            images: samples.len(),
            image_accuracy: image_acc,
            pixel_accuracy: None,
            localization: None,
        });
    };
    let (mut hits, mut pixels) = (0.0, 0.0);
    let (mut inside, mut outside, mut iou, mut good, mut n) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for (s, mask) in samples.iter().zip(masks) {
        let (y, a, _) = model.predict(&s.image)?;
        let gt = vec![s.label; mask.len()];
        let count = mask.sum();
        hits += pixel_accuracy(&y, mask, &gt)? * count;
        pixels += count;
        let a = if a.tensor().shape() == mask.shape() {
            a
        } else {
            continue;
        };
        if let Ok(l) = attention_localization(&a, mask) {
            inside += l.inside_mean;
            outside += l.outside_mean;
            iou += l.iou_at_mean_threshold;
            good += (l.ratio() >= 2.0) as usize;
            n += 1;
        }
    }
    let localization = (n > 0).then(|| LocalizationSummary {
        mean_inside: inside / n as f64,
        mean_outside: outside / n as f64,
        mean_iou: iou / n as f64,
        ratio_at_least_2: good as f64 / n as f64,
        evaluated: n,
    });
    Ok(EvalReport {
        images: samples.len(),
        image_accuracy: image_acc,
        pixel_accuracy: Some(hits / pixels),
        localization,
    })
}
