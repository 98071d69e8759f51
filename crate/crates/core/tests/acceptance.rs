//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use chroma::checkpoint::Checkpoint;
use chroma::commands::{cmd_eval, cmd_synth, cmd_train, Options};
use chroma::data::{synth_generate, SplitCounts, SynthConfig, SynthDataset, WeakSample};
use chroma::modulation::aggregate_scores;
use chroma::nets::VaConfig;
use chroma::params::Precision;
use chroma::saliency::saliency_mask;
use chroma::selfcheck::{modulate_literal_error, run_suite};
use chroma::train::{evaluate, Ablation, EvalReport, Model, TrainConfig, Trainer};
use chroma::{Graph, Result, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>2} {name}: {detail} ({:.1} s)", t0.elapsed().as_secs_f64());
    passed
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn gradient_suite() -> Result<Outcome> {
    let t0 = Instant::now();
    let report = run_suite()?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = report.entries.iter().map(|e| e.error).fold(0.0, f64::max);
    let failed: Vec<&str> = report.failures().iter().map(|e| e.name.as_str()).collect();
    outcome(
        report.passed() && secs < 120.0,
        format!("{} checks, worst error {worst:.2e}, failures {failed:?}, {secs:.1} s", report.entries.len()),
    )
}

fn literal_modulation() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let cases = 200;
    for _ in 0..cases {
        let (h, w, c) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..12));
        let y = uniform(&[h, w, c], 0.0, 1.0, &mut rng);
        let a = uniform(&[h, w], 0.0, 3.0, &mut rng);
        worst = worst.max(modulate_literal_error(&y, &a)?);
    }
    outcome(worst == 0.0, format!("{cases} random shapes, max deviation {worst:e}"))
}

fn oracle_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 150;
    let (mut conv_err, mut deconv_err, mut pool_err, mut adjoint_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (ci, co, k): (usize, usize, usize) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let (s, pad): (usize, usize) = (rng.random_range(1..4), rng.random_range(0..3));
        let min = k.saturating_sub(2 * pad).max(1);
        let (h, w) = (rng.random_range(min..min + 7), rng.random_range(min..min + 7));
        let x = rand_t(&[h, w, ci], &mut rng);
        let kt = rand_t(&[k, k, ci, co], &mut rng);
        let b = rand_t(&[co], &mut rng);
        conv_err = conv_err.max(conv(&x, &kt, &b, s, pad).max_abs_diff(&conv_oracle(&x, &kt, &b, s, pad)));

        let kd = rand_t(&[k, k, co, ci], &mut rng);
        deconv_err = deconv_err.max(deconv(&x, &kd, s).max_abs_diff(&deconv_oracle(&x, &kd, s)));

        let pk = rng.random_range(1..=h.min(w).min(4));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = g.maxpool2d(xv, pk, s)?;
        pool_err = pool_err.max(g.value(p).max_abs_diff(&maxpool_oracle(&x, pk, s)));

        let n = rng.random_range(1..5);
        let big = (n - 1) * s + k;
        let y = rand_t(&[n, n, co], &mut rng);
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[big, big, ci]));
        let kv = g.constant(kt.clone());
        let bv = g.constant(Tensor::zeros(&[co]));
        let c = g.conv2d(z, kv, bv, s, 0)?;
        let yv = g.constant(y.clone());
        let prod = g.mul(c, yv)?;
        let total = g.sum(prod);
        g.backward(total)?;
        let adjoint = g.grad(z).expect("input gradient");
        adjoint_err = adjoint_err.max(deconv(&y, &kt, s).max_abs_diff(&adjoint));
    }
    let worst = conv_err.max(deconv_err).max(pool_err).max(adjoint_err);
    outcome(
        worst < 1e-6,
        format!(
            "{cases} shapes each: conv {conv_err:.1e}, deconv {deconv_err:.1e}, maxpool {pool_err:.1e}, deconv vs conv adjoint {adjoint_err:.1e}"
        ),
    )
}

fn normalization() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = 1000;
    let (mut fiber_err, mut score_err) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (n, h, w, c) = (rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..7), rng.random_range(2..12));
        let scale = rng.random_range(0.1..30.0);
        let logits = uniform(&[n, h, w, c], -scale, scale, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let y = g.softmax(x)?;
        for fiber in g.value(y).data().chunks(c) {
            fiber_err = fiber_err.max((fiber.iter().sum::<f64>() - 1.0).abs());
        }
        let a = g.constant(uniform(&[n, h, w, 1], 0.0, 5.0, &mut rng));
        let y_hat = g.modulate(y, a)?;
        let s = aggregate_scores(&mut g, y_hat)?;
        for row in g.value(s).data().chunks(c) {
            score_err = score_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        fiber_err <= 1e-6 && score_err <= 1e-6,
        format!("{cases} inputs: softmax fibers {fiber_err:.1e}, aggregated scores {score_err:.1e}"),
    )
}

fn masked_loss_gating() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = 500;
    let mut changed = 0;
    let mut grad_leak = 0.0f64;
    for _ in 0..cases {
        let (n, h, w, c) = (rng.random_range(1..4), rng.random_range(1..8), rng.random_range(1..8), rng.random_range(2..8));
        let mask = Tensor::from_fn(&[n, h, w], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y = uniform(&[n, h, w, c], 0.01, 1.0, &mut rng);
        let mut perturbed = y.clone();
        for (p, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                for k in 0..c {
                    perturbed.data_mut()[p * c + k] = rng.random_range(1e-9..10.0);
                }
            }
        }
        let loss = |t: &Tensor| -> Result<(f64, Tensor)> {
            let mut g = Graph::new();
            let v = g.param(t.clone());
            let l = g.masked_nll(v, &mask, &labels)?;
            g.backward(l)?;
            Ok((g.value(l).data()[0], g.grad(v).expect("map gradient")))
        };
        let (l0, grad) = loss(&y)?;
        let (l1, _) = loss(&perturbed)?;
        changed += (l0.to_bits() != l1.to_bits()) as usize;
        for (p, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                for k in 0..c {
                    grad_leak = grad_leak.max(grad.data()[p * c + k].abs());
                }
            }
        }
    }
    outcome(
        changed == 0 && grad_leak == 0.0,
        format!("{cases} random maps: {changed} losses changed, max gradient outside mask {grad_leak:e}"),
    )
}

struct Trained {
    model: Model,
    report: EvalReport,
    seconds: f64,
}

fn test_split(data: &SynthDataset) -> (Vec<WeakSample>, Vec<Tensor>) {
    data.test.iter().map(|e| (e.sample.clone(), e.mask.clone())).unzip()
}

/// Trains on a synthetic set with the reduced-width recipe used by the
/// experiment criteria and evaluates on its masked test split.
fn train_synthetic(side: usize, clutter: bool, seed: u64, ablation: Ablation, counts: SplitCounts) -> Result<Trained> {
    let t0 = Instant::now();
    let cfg = SynthConfig {
        height: side,
        width: side,
        clutter,
        seed,
        counts,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg)?;
    let masks: Vec<_> = data.train.iter().map(|s| saliency_mask(&s.image)).collect::<Result<_>>()?;
    let grid = if side >= 64 { 8 } else { 4 };
    let va = VaConfig {
        channels: vec![16, 32, 64],
        fc_width: 512,
        grid,
    };
    let model = Model::new(data.vocabulary.clone(), data.anchors.clone(), 16, va, Precision::F32, seed, ablation, (side, side))?;
    let config = TrainConfig {
        pretrain_epochs: 5,
        phase_epochs: 5,
        max_phases: 4,
        learning_rate: 0.01,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(&data.train, &data.val, &masks, &mut |_, _| Ok(()))?;
    let (samples, gt) = test_split(&data);
    let report = evaluate(&trainer.model, &samples, Some(&gt))?;
    Ok(Trained {
        model: trainer.model,

        report,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn end_to_end(slot: &mut Option<Trained>) -> Result<Outcome> {
    let t = train_synthetic(64, false, 0, Ablation::None, SplitCounts { train: 40, val: 10, test: 20 })?;
    let pixel = t.report.pixel_accuracy.unwrap_or(0.0);
    let image = t.report.image_accuracy;
    let detail = format!(
        "64x64, 6 classes, 40/10/20 per class: image-wise {image:.4}, pixel-wise {pixel:.4}, {:.0} s",
        t.seconds
    );
    let passed = image >= 0.90 && pixel >= 0.85 && t.seconds <= 900.0;
    *slot = Some(t);
    outcome(passed, detail)
}

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const CLUTTER_SIDE: usize = 32;

fn clutter_counts() -> SplitCounts {
    SplitCounts { train: 40, val: 10, test: 20 }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_ordering(full: &mut Vec<Trained>) -> Result<Outcome> {
    let acc = |ablation: Ablation, keep: bool, full: &mut Vec<Trained>| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for seed in ABLATION_SEEDS {
            let t = train_synthetic(CLUTTER_SIDE, true, seed, ablation, clutter_counts())?;
            out.push(t.report.image_accuracy);
            if keep {
                full.push(t);
            }
        }
        Ok(out)
    };
    let f = mean(&acc(Ablation::None, true, full)?);
    let alt = mean(&acc(Ablation::NoAlternation, false, full)?);
    let att = mean(&acc(Ablation::NoAttention, false, full)?);
    outcome(
        f >= alt && alt >= att && f - att >= 0.05,
        format!("cluttered {CLUTTER_SIDE}x{CLUTTER_SIDE}, 3 seeds: full {f:.4}, no-alternation {alt:.4}, no-attention {att:.4}"),
    )
}

fn localization(t: Option<&Trained>) -> Result<Outcome> {
    let Some(t) = t else {
        return outcome(false, "no trained model from the end-to-end run".into());
    };
    let Some(l) = &t.report.localization else {
        return outcome(false, "no localization measured".into());
    };
    outcome(
        l.ratio_at_least_2 >= 0.80 && l.mean_iou >= 0.3,
        format!(
            "{} test images: ratio >= 2 on {:.1}%, mean IoU {:.3}, mean inside {:.3} vs outside {:.3}",
            l.evaluated,
            100.0 * l.ratio_at_least_2,
            l.mean_iou,
            l.mean_inside,
            l.mean_outside
        ),
    )
}

fn in_central_box((r, c): (f64, f64)) -> bool {
    (0.25..=0.75).contains(&r) && (0.25..=0.75).contains(&c)
}

fn spatial_prior(centered: Option<&Trained>, full: &[Trained]) -> Result<Outcome> {
    let Some(centered) = centered else {
        return outcome(false, "no trained model from the end-to-end run".into());
    };
    let Some(com) = centered.model.va.spatial_prior().center_of_mass() else {
        return outcome(false, "learned prior has no positive mass".into());
    };
    let mut without = Vec::new();
    for seed in ABLATION_SEEDS {
        without.push(train_synthetic(CLUTTER_SIDE, true, seed, Ablation::NoPrior, clutter_counts())?.report.image_accuracy);
    }
    let with: Vec<f64> = full.iter().map(|t| t.report.image_accuracy).collect();
    if with.len() != without.len() {
        return outcome(false, "missing full runs from the ablation criterion".into());
    }
    let delta = mean(&with) - mean(&without);
    outcome(
        in_central_box(com) && delta > 0.0,
        format!(
            "prior center of mass ({:.3}, {:.3}); cluttered accuracy with prior {:.4}, without {:.4}, delta {delta:+.4}",
            com.0,
            com.1,
            mean(&with),
            mean(&without)
        ),
    )
}

const DETERMINISM_CONFIG: &str = "\
resolution = 16
n_per_class = 8
cn_width = 4
va_channels = 4,8
va_fc = 32
cn_batch = 8
va_batch = 6
pretrain_epochs = 2
phase_epochs = 1
max_phases = 2
seed = 11
";

fn read(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| chroma::Error::io(p, e))
}

fn pipeline_run(root: &Path, config: &Path, data: &Path, name: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let out = root.join(name);
    let opts = Options {
        config: Some(config.to_path_buf()),
        out: Some(out.clone()),
        dataset: Some(data.to_path_buf()),
        ..Options::default()
    };
    cmd_train(&opts)?;
    let eval = Options {
        checkpoint: Some(out.join("final.ckpt")),
        ..opts
    };
    cmd_eval(&eval)?;
    Ok((read(&out.join("final.ckpt"))?, read(&out.join("metrics.txt"))?))
}

fn determinism() -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| chroma::Error::Config(e.to_string()))?;
    pool.install(|| {
        let dir = tempfile::tempdir().map_err(|e| chroma::Error::io(Path::new("tempdir"), e))?;
        let root = dir.path();
        let config = root.join("run.cfg");
        let data = root.join("data");
        fs::write(&config, DETERMINISM_CONFIG).map_err(|e| chroma::Error::io(&config, e))?;
        cmd_synth(&Options {
            config: Some(config.clone()),
            out: Some(data.clone()),
            ..Options::default()
        })?;
        let (ckpt_a, metrics_a) = pipeline_run(root, &config, &data, "a")?;
        let (ckpt_b, metrics_b) = pipeline_run(root, &config, &data, "b")?;

        let loaded = Checkpoint::load(&root.join("a/final.ckpt"))?;
        let model = Model::from_checkpoint(&loaded)?;
        let copy = root.join("copy.ckpt");
        loaded.save(&copy)?;
        let reloaded = Model::from_checkpoint(&Checkpoint::load(&copy)?)?;
        let resaved_same = read(&copy)? == ckpt_a;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut forward_same = true;
        for _ in 0..5 {
            let image = uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
            let (y0, a0, s0) = model.predict(&image)?;
            let (y1, a1, s1) = reloaded.predict(&image)?;
            let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            forward_same &= bits(y0.tensor().data()) == bits(y1.tensor().data())
                && bits(a0.tensor().data()) == bits(a1.tensor().data())
                && bits(s0.probabilities()) == bits(s1.probabilities());
        }
        let ckpt_same = ckpt_a == ckpt_b;
        let metrics_same = metrics_a == metrics_b;
        outcome(
            ckpt_same && metrics_same && resaved_same && forward_same,
            format!(
                "single thread: checkpoints identical {ckpt_same}, metrics identical {metrics_same}, re-save identical {resaved_same}, reloaded forward bit-identical {forward_same}"
            ),
        )
    })
}

fn main() {
    let mut centered = None;
    let mut full = Vec::new();
    let results = [
        run(1, "gradient suite", gradient_suite),
        run(2, "literal modulation gradients", literal_modulation),
        run(3, "oracle equivalence", oracle_equivalence),
        run(4, "normalization invariants", normalization),
        run(5, "masked loss gating", masked_loss_gating),
        run(6, "synthetic end-to-end", || end_to_end(&mut centered)),
        run(7, "ablation ordering", || ablation_ordering(&mut full)),
        run(8, "attention localization", || localization(centered.as_ref())),
        run(9, "spatial prior effect", || spatial_prior(centered.as_ref(), &full)),
        run(10, "determinism and persistence", determinism),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
