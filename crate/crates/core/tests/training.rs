use chroma::checkpoint::Checkpoint;
use chroma::data::{synth_generate, SplitCounts, SynthConfig, SynthDataset, WeakSample};
use chroma::metrics::pixel_accuracy;
use chroma::nets::{SaliencyMask, VaConfig};
use chroma::params::Precision;
use chroma::saliency::saliency_mask;
use chroma::train::{evaluate, Ablation, Model, Phase, TrainConfig, Trainer};
use chroma::{Error, Tensor};

fn tiny_data(side: usize, train: usize, seed: u64, jitter: f64) -> SynthDataset {
    synth_generate(&SynthConfig {
        seed,
        height: side,
        width: side,
        jitter,
        counts: SplitCounts { train, val: 1, test: 2 },
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_va(side: usize) -> VaConfig {
    VaConfig {
        channels: vec![4, 8],
        fc_width: 2 * (side / 4) * (side / 4),
        grid: side / 4,
    }
}

fn tiny_model(data: &SynthDataset, side: usize, seed: u64, ablation: Ablation) -> Model {
    Model::new(
        data.vocabulary.clone(),
        data.anchors.clone(),
        4,
        tiny_va(side),
        Precision::F32,
        seed,
        ablation,
        (side, side),
    )
    .unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        cn_batch: 8,
        va_batch: 6,
        pretrain_epochs: 1,
        phase_epochs: 1,
        max_phases: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn masks(train: &[WeakSample]) -> Vec<SaliencyMask> {
    train.iter().map(|s| saliency_mask(&s.image).unwrap()).collect()
}

fn samples(data: &SynthDataset) -> (Vec<WeakSample>, Vec<WeakSample>) {
    (
        data.train.clone(),
        data.val.clone(),
    )
}

fn run(t: &mut Trainer, data: &SynthDataset) -> chroma::Result<()> {
    let (train, val) = samples(data);
    t.run(&train, &val, &masks(&train), &mut |_, _| Ok(()))
}

#[test]
fn infinite_tolerance_stops_after_one_va_and_one_cn_phase() {
    let data = tiny_data(16, 3, 1, 0.03);
    let mut cfg = tiny_config(1);
    cfg.tol = f64::INFINITY;
    cfg.max_phases = 10;
    let mut t = Trainer::new(tiny_model(&data, 16, 1, Ablation::None), cfg).unwrap();
    run(&mut t, &data).unwrap();
    assert_eq!(t.progress.phases, 2);
    assert!(t.progress.converged);
    let tags: Vec<Phase> = t.log.records.iter().map(|r| r.phase).collect();
    assert_eq!(tags, [Phase::Pretrain, Phase::Va, Phase::Cn]);
}

#[test]
fn frozen_branch_is_bit_identical_within_its_phase() {
    let data = tiny_data(16, 3, 2, 0.03);
    let mut cfg = tiny_config(2);
    cfg.phase_epochs = 2;
    cfg.max_phases = 3;
    cfg.tol = 1e-12;
    let mut t = Trainer::new(tiny_model(&data, 16, 2, Ablation::None), cfg).unwrap();
    let (train, val) = samples(&data);
    let mut checks = Vec::new();
    let mut before = (t.model.cn.store.fingerprint(), t.model.va.store.fingerprint());
    t.run(&train, &val, &masks(&train), &mut |tag, t| {
        let after = (t.model.cn.store.fingerprint(), t.model.va.store.fingerprint());
        let phase = t.log.records.last().unwrap().phase;
        checks.push((tag.to_string(), phase, before, after));
        before = after;
        Ok(())
    })
    .unwrap();
    assert_eq!(checks.len(), 4);
    for (tag, phase, b, a) in &checks {
        match phase {
            Phase::Pretrain => assert_eq!(b.1, a.1, "{tag}: attention changed during pretraining"),
            Phase::Va => {
                assert_eq!(b.0, a.0, "{tag}: color branch changed");
                assert_ne!(b.1, a.1, "{tag}: attention did not train");
            }
            Phase::Cn => {
                assert_eq!(b.1, a.1, "{tag}: attention changed");
                assert_ne!(b.0, a.0, "{tag}: color branch did not train");
            }
            Phase::Joint => unreachable!(),
        }
    }
    // per-epoch fingerprints of the frozen branch agree within each phase
    for w in t.log.records.windows(2) {
        if w[0].phase == w[1].phase && w[0].phase_index == w[1].phase_index {
            match w[0].phase {
                Phase::Va => assert_eq!(w[0].cn_fingerprint, w[1].cn_fingerprint),
                Phase::Cn => assert_eq!(w[0].va_fingerprint, w[1].va_fingerprint),
                _ => {}
            }
        }
    }
}

#[test]
fn pretraining_is_tagged_and_only_first() {
    let data = tiny_data(16, 3, 3, 0.03);
    let mut cfg = tiny_config(3);
    cfg.pretrain_epochs = 2;
    let mut t = Trainer::new(tiny_model(&data, 16, 3, Ablation::None), cfg).unwrap();
    run(&mut t, &data).unwrap();
    let tags: Vec<&str> = t.log.records.iter().map(|r| r.phase.tag()).collect();
    assert_eq!(tags, ["PRETRAIN", "PRETRAIN", "VA", "CN"]);
    let epochs: Vec<usize> = t.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [1, 2, 3, 4]);
    assert!(t.log.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn learning_rate_follows_global_epoch_schedule() {
    let data = tiny_data(16, 2, 4, 0.03);
    let mut cfg = tiny_config(4);
    cfg.lr_decay_epochs = 2;
    cfg.pretrain_epochs = 3;
    cfg.phase_epochs = 2;
    cfg.tol = 1e-12;
    let base = cfg.learning_rate;
    let mut t = Trainer::new(tiny_model(&data, 16, 4, Ablation::None), cfg).unwrap();
    run(&mut t, &data).unwrap();
    assert_eq!(t.log.records.len(), 7);
    for r in &t.log.records {
        let expected = base / 10f64.powi(((r.epoch - 1) / 2) as i32);
        assert!((r.lr - expected).abs() <= 1e-15 * expected, "epoch {}: {} vs {expected}", r.epoch, r.lr);
    }
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let data = tiny_data(16, 3, 5, 0.03);
    let go = || {
        let mut t = Trainer::new(tiny_model(&data, 16, 5, Ablation::None), tiny_config(5)).unwrap();
        run(&mut t, &data).unwrap();
        t
    };
    let (a, b) = (go(), go());
    assert!(a.log.same_run(&b.log));
    assert_eq!(a.checkpoint().encode(), b.checkpoint().encode());
    let other = {
        let mut t = Trainer::new(tiny_model(&data, 16, 6, Ablation::None), tiny_config(6)).unwrap();
        run(&mut t, &data).unwrap();
        t
    };
    assert_ne!(a.checkpoint().encode(), other.checkpoint().encode());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = tiny_data(16, 3, 7, 0.03);
    let mut cfg = tiny_config(7);
    cfg.max_phases = 3;
    cfg.tol = 1e-12;
    let mut full = Trainer::new(tiny_model(&data, 16, 7, Ablation::None), cfg.clone()).unwrap();
    let (train, val) = samples(&data);
    let m = masks(&train);
    let mut saved = None;
    full.run(&train, &val, &m, &mut |tag, t| {
        if tag == "phase01" {
            saved = Some(t.checkpoint().encode());
        }
        Ok(())
    })
    .unwrap();
    let ckpt = Checkpoint::decode(&saved.unwrap()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt, cfg).unwrap();
    resumed.run(&train, &val, &[], &mut |_, _| Ok(())).unwrap();
    assert_eq!(resumed.progress.phases, 3);
    assert_eq!(resumed.model.cn.store.fingerprint(), full.model.cn.store.fingerprint());
    assert_eq!(resumed.model.va.store.fingerprint(), full.model.va.store.fingerprint());
}

#[test]
fn resuming_a_finished_run_changes_nothing() {
    let data = tiny_data(16, 3, 8, 0.03);
    let mut t = Trainer::new(tiny_model(&data, 16, 8, Ablation::None), tiny_config(8)).unwrap();
    run(&mut t, &data).unwrap();
    let bytes = t.checkpoint().encode();
    let mut again = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), tiny_config(8)).unwrap();
    run(&mut again, &data).unwrap();
    assert!(again.log.records.is_empty());
    assert_eq!(again.checkpoint().encode(), bytes);
}

#[test]
fn checkpoint_round_trip_forward_is_bit_identical() {
    let data = tiny_data(16, 2, 9, 0.03);
    let mut t = Trainer::new(tiny_model(&data, 16, 9, Ablation::None), tiny_config(9)).unwrap();
    run(&mut t, &data).unwrap();
    let bytes = t.model.to_checkpoint().encode();
    let back = Model::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().encode(), bytes);
    for e in &data.test {
        let (y0, a0, s0) = t.model.predict(&e.sample.image).unwrap();
        let (y1, a1, s1) = back.predict(&e.sample.image).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(y0.tensor()), bits(y1.tensor()));
        assert_eq!(bits(a0.tensor()), bits(a1.tensor()));
        assert_eq!(s0.probabilities(), s1.probabilities());
    }
}

#[test]
fn single_class_dataset_pretrains_to_zero_loss() {
    let data = tiny_data(16, 6, 10, 0.03);
    let red: Vec<WeakSample> = data.train.iter().filter(|s| s.label == 0).cloned().collect();
    let mut cfg = tiny_config(10);
    cfg.pretrain_epochs = 40;
    cfg.max_phases = 0;
    cfg.learning_rate = 0.05;
    cfg.lr_decay_epochs = 1000;
    let mut t = Trainer::new(tiny_model(&data, 16, 10, Ablation::None), cfg).unwrap();
    let m = masks(&red);
    t.run(&red, &[], &m, &mut |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = t.log.records.iter().map(|r| r.loss).collect();
    assert!(losses.last().unwrap() < &0.05, "{losses:?}");
    assert!(losses.last().unwrap() < &(losses[0] / 10.0));
    for (s, mask) in red.iter().zip(&m) {
        let y = t.model.cn.forward(&s.image).unwrap();
        let acc = pixel_accuracy(&y, mask.tensor(), &vec![0; mask.tensor().len()]).unwrap();
        assert_eq!(acc, 1.0);
    }
}

#[test]
fn noiseless_pretraining_names_masked_pixels() {
    let side = 32;
    let data = synth_generate(&SynthConfig {
        seed: 11,
        height: side,
        width: side,
        jitter: 0.0,
        counts: SplitCounts { train: 12, val: 2, test: 6 },
        ..SynthConfig::default()
    })
    .unwrap();
    let model = Model::new(
        data.vocabulary.clone(),
        data.anchors.clone(),
        16,
        tiny_va(side),
        Precision::F32,
        11,
        Ablation::None,
        (side, side),
    )
    .unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 20,
        max_phases: 0,
        seed: 11,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    run(&mut t, &data).unwrap();
    let (mut hits, mut total) = (0.0, 0.0);
    for e in &data.test {
        let y = t.model.cn.forward(&e.sample.image).unwrap();
        let n = e.mask.sum();
        hits += pixel_accuracy(&y, &e.mask, &vec![e.sample.label; e.mask.len()]).unwrap() * n;
        total += n;
    }
    assert!(hits / total >= 0.99, "masked pixel accuracy {}", hits / total);
}

#[test]
fn no_attention_run_is_tagged_and_never_trains_attention() {
    let data = tiny_data(16, 3, 12, 0.03);
    let mut t = Trainer::new(tiny_model(&data, 16, 12, Ablation::NoAttention), tiny_config(12)).unwrap();
    let va_before = t.model.va.store.fingerprint();
    run(&mut t, &data).unwrap();
    assert!(t.log.to_key_values().starts_with("ablation = no-attention\n"));
    assert!(t.log.to_table().contains("no-attention"));
    assert!(t.log.records.iter().all(|r| r.phase != Phase::Va));
    assert_eq!(t.model.va.store.fingerprint(), va_before);
    let (_, a, _) = t.model.predict(&data.test[0].sample.image).unwrap();
    assert!(a.tensor().data().iter().all(|&v| v == 1.0));
}

#[test]
fn no_alternation_trains_both_branches_jointly() {
    let data = tiny_data(16, 3, 13, 0.03);
    let mut t = Trainer::new(tiny_model(&data, 16, 13, Ablation::NoAlternation), tiny_config(13)).unwrap();
    let before = (t.model.cn.store.fingerprint(), t.model.va.store.fingerprint());
    run(&mut t, &data).unwrap();
    assert!(t.log.records[1..].iter().all(|r| r.phase == Phase::Joint));
    assert_ne!(t.model.cn.store.fingerprint(), before.0);
    assert_ne!(t.model.va.store.fingerprint(), before.1);
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let data = tiny_data(16, 3, 14, 0.03);
    let mut cfg = tiny_config(14);
    cfg.learning_rate = 1e300;
    cfg.pretrain_epochs = 3;
    let mut t = Trainer::new(tiny_model(&data, 16, 14, Ablation::None), cfg).unwrap();
    match run(&mut t, &data) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn logged_validation_accuracy_matches_evaluation() {
    let data = tiny_data(16, 4, 15, 0.03);
    let mut t = Trainer::new(tiny_model(&data, 16, 15, Ablation::None), tiny_config(15)).unwrap();
    let (train, val) = samples(&data);
    let m = masks(&train);
    let mut seen = Vec::new();
    t.run(&train, &val, &m, &mut |_, t| {
        let logged = t.log.records.last().unwrap().val_accuracy.unwrap();
        seen.push((logged, evaluate(&t.model, &val, None).unwrap().image_accuracy));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 3);
    for (logged, fresh) in seen {
        assert_eq!(logged, fresh);
    }
}

#[test]
fn wrong_image_size_is_rejected_before_training() {
    let data = tiny_data(16, 2, 16, 0.03);
    let model = tiny_model(&tiny_data(16, 1, 0, 0.03), 16, 16, Ablation::None);
    let mut t = Trainer::new(model, tiny_config(16)).unwrap();
    let mut train: Vec<WeakSample> = data.train.clone();
    train[0].image = Tensor::zeros(&[8, 8, 3]);
    let m = masks(&train);
    assert!(matches!(t.run(&train, &[], &m, &mut |_, _| Ok(())), Err(Error::Dataset(_))));
    assert!(t.log.records.is_empty());
}
