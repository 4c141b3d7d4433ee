//! Training loop contracts: step accounting, determinism, resume and checkpoints.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use dtmi_core::data::{make_batch, synthetic_inputs};
use dtmi_core::nn::Ctx;
use dtmi_core::training::{load_checkpoint, lr_schedule, TrainOptions, TrainRecord, Trainer};
use dtmi_core::{DtmiNet, Error, ModelInput, RunConfig};

fn small_config() -> RunConfig {
    RunConfig {
        input_size: 32,
        embed_dim: 8,
        depths: vec![1, 1, 1, 1],
        num_heads: vec![1, 1, 2, 2],
        decoder_width: 8,
        cmi_stages: BTreeSet::from([4, 5]),
        batch_size: 2,
        epochs: 1,
        ..RunConfig::default()
    }
}

fn samples(n: usize) -> Vec<ModelInput> {
    synthetic_inputs(21, 0, n, 32, 32)
}

fn read_log(dir: &Path) -> Vec<TrainRecord> {
    std::fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_time(records: &[TrainRecord]) -> Vec<TrainRecord> {
    records
        .iter()
        .map(|r| TrainRecord {
            seconds: 0.0,
            ..r.clone()
        })
        .collect()
}

fn fit(cfg: &RunConfig, data: &[ModelInput], dir: &Path, resume: bool) -> Trainer {
    let opts = TrainOptions {
        run_dir: Some(dir.to_path_buf()),
        resume: resume.then(|| dir.join("last.ckpt")),
        allow_config_override: false,
    };
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::resume(cfg, p, false, DType::F32, &Device::Cpu).unwrap(),
        None => Trainer::new(cfg, DType::F32, &Device::Cpu).unwrap(),
    };
    trainer.fit(data, None, &opts).unwrap();
    trainer
}

#[test]
fn one_sample_one_epoch_is_one_logged_step() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = fit(&small_config(), &samples(1), dir.path(), false);
    assert_eq!(trainer.steps(), 1);
    let log = read_log(dir.path());
    assert_eq!(log.len(), 1);
    assert_eq!((log[0].epoch, log[0].step), (0, 1));
    assert_eq!(log[0].loss.l, log[0].loss.l_s + log[0].loss.l_e);
    assert!(dir.path().join("last.ckpt").exists());
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn loss_decreases_over_ten_steps_on_a_fixed_batch() {
    let cfg = small_config();
    let data = samples(2);
    let refs: Vec<_> = data.iter().collect();
    let batch = make_batch(&refs, DType::F32, &Device::Cpu).unwrap();
    let mut trainer = Trainer::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let losses: Vec<f64> = (0..10).map(|_| trainer.train_step(&batch, 1e-3).unwrap().l).collect();
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let cfg = RunConfig {
        epochs: 2,
        ..small_config()
    };
    let data = samples(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(&cfg, &data, a.path(), false);
    fit(&cfg, &data, b.path(), false);
    let (la, lb) = (read_log(a.path()), read_log(b.path()));
    assert_eq!(la.len(), 4);
    assert_eq!(without_time(&la), without_time(&lb));
}

#[test]
fn resume_runs_exactly_the_remaining_epochs_and_matches_a_straight_run() {
    let data = samples(2);
    let full = RunConfig {
        epochs: 10,
        batch_size: 1,
        ..small_config()
    };
    let half = RunConfig {
        epochs: 5,
        ..full.clone()
    };

    let split = tempfile::tempdir().unwrap();
    fit(&half, &data, split.path(), false);
    assert_eq!(
        load_checkpoint(&split.path().join("last.ckpt"), &Device::Cpu)
            .unwrap()
            .epoch,
        5
    );
    let resumed = fit(&full, &data, split.path(), true);
    assert_eq!(resumed.epoch(), 10);
    let log = read_log(split.path());
    assert_eq!(log.len(), 20);
    assert_eq!(log.iter().filter(|r| r.epoch >= 5).count(), 10);

    let straight = tempfile::tempdir().unwrap();
    fit(&full, &data, straight.path(), false);
    assert_eq!(without_time(&log), without_time(&read_log(straight.path())));
}

fn forward_values(net: &DtmiNet, x: &Tensor, d: &Tensor) -> Vec<f32> {
    net.forward(x, d, &Ctx::eval())
        .unwrap()
        .s
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

#[test]
fn checkpoint_round_trip_reproduces_the_forward_pass() {
    let cfg = small_config();
    let data = samples(2);
    let dir = tempfile::tempdir().unwrap();
    let trained = fit(&cfg, &data, dir.path(), false);
    let refs: Vec<_> = data.iter().collect();
    let batch = make_batch(&refs, DType::F32, &Device::Cpu).unwrap();
    let before = forward_values(trained.net(), &batch.rgb, &batch.depth);

    let restored = Trainer::resume(&cfg, &dir.path().join("last.ckpt"), false, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(forward_values(restored.net(), &batch.rgb, &batch.depth), before);
    assert_eq!(restored.steps(), trained.steps());
}

#[test]
fn loading_with_a_different_input_size_is_an_error_unless_overridden() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    fit(&cfg, &samples(1), dir.path(), false);
    let other = RunConfig {
        input_size: 64,
        ..cfg.clone()
    };
    let path = dir.path().join("last.ckpt");
    let err = match Trainer::resume(&other, &path, false, DType::F32, &Device::Cpu) {
        Ok(_) => panic!("mismatched input_size was accepted"),
        Err(e) => e,
    };
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    assert!(err.to_string().contains("input_size"), "{err}");

    // Non-architectural changes are accepted.
    let tweaked = RunConfig { lr: 5e-4, ..cfg };
    assert!(Trainer::resume(&tweaked, &path, false, DType::F32, &Device::Cpu).is_ok());
}

#[test]
fn missing_and_corrupted_checkpoints_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert!(load_checkpoint(&missing, &Device::Cpu).is_err());
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint(&junk, &Device::Cpu),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn learning_rate_steps_exactly_at_decay_boundaries() {
    let cfg = RunConfig {
        lr: 1e-3,
        lr_decay_gamma: 0.1,
        lr_decay_every_epochs: 3,
        ..RunConfig::default()
    };
    let lrs: Vec<f64> = (0..7).map(|e| lr_schedule(e, &cfg)).collect();
    assert_eq!(lrs[0], lrs[2]);
    assert!(lrs[3] < lrs[2]);
    assert_eq!(lrs[3], lrs[5]);
    assert!((lrs[3] - 1e-4).abs() < 1e-18);
    assert!((lrs[6] - 1e-5).abs() < 1e-18);
}

#[test]
fn non_finite_loss_is_reported_as_a_numerical_error() {
    let cfg = small_config();
    let data = samples(2);
    let mut trainer = Trainer::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let (name, var) = trainer
        .net()
        .params()
        .iter()
        .find(|(n, _)| n.starts_with("rgb.encoder.patch_embed"))
        .map(|(n, v)| (n.to_string(), v.clone()))
        .unwrap();
    let poisoned = (var.as_tensor().ones_like().unwrap() * f64::NAN).unwrap();
    var.set(&poisoned).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let batch = make_batch(&refs, DType::F32, &Device::Cpu).unwrap();
    let err = trainer.train_step(&batch, 1e-3).unwrap_err();
    assert!(err.is_numerical(), "{name}: {err}");
}
