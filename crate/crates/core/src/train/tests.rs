use super::*;
use crate::arch::{ArchId, ArchitectureTemplate};
use crate::test_support::random_tensor;
use rand::Rng;

fn small_spec(id: ArchId) -> NetworkSpec {
    ArchitectureTemplate::compact(id).at_multiplier(0.5).unwrap()
}

fn random_data(n: usize, seed: u64, p: f64) -> (Vec<Tensor>, Vec<Vec<u8>>) {
    let mut rng = SeededRng::seed_from_u64(seed);
    let inputs = (0..n).map(|i| random_tensor(&[1, 8, 12], seed * 10_000 + i as u64)).collect();
    let labels = (0..n).map(|_| (0..50).map(|_| u8::from(rng.random_bool(p))).collect()).collect();
    (inputs, labels)
}

#[test]
fn bce_of_half_is_ln_two() {
    let p = Tensor::full([4, 50], 0.5);
    let mut rng = SeededRng::seed_from_u64(1);
    let y = Tensor::new([4, 50], (0..200).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect()).unwrap();
    assert!((bce_loss(&p, &y, 1e-7).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_matches_a_naive_loop() {
    let mut rng = SeededRng::seed_from_u64(2);
    let p: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..300).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
    let mut naive = 0.0;
    for (pi, yi) in p.iter().zip(&y) {
        let q = pi.max(1e-7).min(1.0 - 1e-7);
        naive += if *yi == 1.0 { -q.ln() } else { -(1.0 - q).ln() };
    }
    naive /= 300.0;
    let got = bce_loss(&Tensor::new([6, 50], p).unwrap(), &Tensor::new([6, 50], y).unwrap(), 1e-7).unwrap();
    assert!((got - naive).abs() < 1e-12);
    assert!(bce_loss(&Tensor::zeros([2, 3]), &Tensor::zeros([3, 2]), 1e-7).is_err());
    let certain = bce_loss(&Tensor::new([1, 2], vec![0.0, 1.0]).unwrap(), &Tensor::new([1, 2], vec![1.0, 0.0]).unwrap(), 1e-7);
    assert!(certain.unwrap().is_finite());
}

#[test]
fn adam_zero_gradient_is_a_no_op_and_first_step_is_lr_sign() {
    let cfg = TrainingConfig::default();
    let mut p = vec![Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()];
    let before = p.clone();
    let mut adam = Adam::new(&cfg);
    adam.update(p.iter_mut(), &[vec![0.0; 3]]).unwrap();
    assert_eq!(p, before);

    let mut adam = Adam::new(&cfg);
    adam.update(p.iter_mut(), &[vec![3.0, -0.2, 1e-3]]).unwrap();
    let moved: Vec<f64> = p[0].data().iter().zip(before[0].data()).map(|(a, b)| a - b).collect();
    for (m, s) in moved.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((m - s * 1e-3).abs() < 1e-8, "{moved:?}");
    }
    assert!(adam.update(p.iter_mut(), &[vec![0.0; 2]]).is_err());
}

#[test]
fn adam_minimizes_a_quadratic() {
    let cfg = TrainingConfig {
        learning_rate: 0.1,
        ..TrainingConfig::default()
    };
    let mut adam = Adam::new(&cfg);
    let mut theta = vec![Tensor::new([1], vec![1.0]).unwrap()];
    for _ in 0..200 {
        let g = 2.0 * theta[0].data()[0];
        adam.update(theta.iter_mut(), &[vec![g]]).unwrap();
    }
    assert!(theta[0].data()[0].abs() < 0.05, "{}", theta[0].data()[0]);
    assert_eq!(adam.steps(), 200);
}

#[test]
fn batch_ranges_absorb_singletons() {
    assert_eq!(batch_ranges(33, 16), vec![0..16, 16..33]);
    assert_eq!(batch_ranges(32, 16), vec![0..16, 16..32]);
    assert_eq!(batch_ranges(5, 2), vec![0..2, 2..5]);
    assert_eq!(batch_ranges(1, 16), vec![0..1]);
    assert!(batch_ranges(0, 16).is_empty());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainingConfig {
            batch_size: 1,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            learning_rate: 0.0,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            beta2: 1.0,
            ..TrainingConfig::default()
        },
    ] {
        assert!(matches!(Trainer::from_spec(&small_spec(ArchId::K2c2), cfg), Err(Error::Config(_))));
    }
}

#[test]
fn zero_epochs_returns_the_initial_network() {
    let spec = small_spec(ArchId::K1c2);
    let cfg = TrainingConfig {
        max_epochs: 0,
        ..TrainingConfig::default()
    };
    let trainer = Trainer::from_spec(&spec, cfg).unwrap();
    let initial = trainer.net.clone();
    let (x, y) = random_data(8, 1, 0.3);
    let d = LabeledInputs::new(&x, &y).unwrap();
    let fit = fit(trainer, d, d, |_| {}).unwrap();
    assert!(fit.history.is_empty());
    assert_eq!(fit.best_epoch, 0);
    assert_eq!(fit.net, initial);
}

#[test]
fn null_signal_stays_at_chance() {
    let (xt, yt) = random_data(256, 2, 0.3);
    let (xv, yv) = random_data(256, 3, 0.3);
    let cfg = TrainingConfig {
        max_epochs: 3,
        patience: 10,
        seed: 4,
        ..TrainingConfig::default()
    };
    let trainer = Trainer::from_spec(&small_spec(ArchId::K2c2), cfg).unwrap();
    let fit = fit(
        trainer,
        LabeledInputs::new(&xt, &yt).unwrap(),
        LabeledInputs::new(&xv, &yv).unwrap(),
        |_| {},
    )
    .unwrap();
    assert_eq!(fit.history.len(), 3);
    for r in &fit.history {
        assert!((r.valid_auc - 0.5).abs() <= 0.1, "{r:?}");
    }
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let (xt, yt) = random_data(64, 5, 0.3);
    let (xv, yv) = random_data(64, 6, 0.3);
    let cfg = TrainingConfig {
        max_epochs: 12,
        patience: 2,
        seed: 1,
        ..TrainingConfig::default()
    };
    let trainer = Trainer::from_spec(&small_spec(ArchId::K2c1), cfg).unwrap();
    let valid = LabeledInputs::new(&xv, &yv).unwrap();
    let mut seen = Vec::new();
    let fit = fit(trainer, LabeledInputs::new(&xt, &yt).unwrap(), valid, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, (1..=fit.history.len()).collect::<Vec<_>>());
    let best = fit.history.iter().map(|r| r.valid_auc).fold(f64::MIN, f64::max);
    assert_eq!(fit.best_valid_auc, Some(best));
    assert_eq!(fit.history[fit.best_epoch - 1].valid_auc, best);
    assert!(fit.history.len() == 12 || fit.history.len() == fit.best_epoch + 2);
    let restored = mean_auc(&fit.net.predict(&xv.iter().collect::<Vec<_>>(), 16).unwrap(), &yv).unwrap();
    assert_eq!(restored, best);
}

#[test]
fn training_replays_bit_for_bit() {
    let (x, y) = random_data(40, 7, 0.3);
    let d = LabeledInputs::new(&x, &y).unwrap();
    let run = || {
        let cfg = TrainingConfig {
            max_epochs: 2,
            patience: 5,
            seed: 11,
            ..TrainingConfig::default()
        };
        let f = fit(Trainer::from_spec(&small_spec(ArchId::Crnn), cfg).unwrap(), d, d, |_| {}).unwrap();
        let losses: Vec<(u64, u64)> = f.history.iter().map(|r| (r.train_loss.to_bits(), r.valid_auc.to_bits())).collect();
        (losses, f.net)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_reports_divergence() {
    let (mut x, y) = random_data(20, 8, 0.3);
    x[0].data_mut()[5] = f64::NAN;
    let d = LabeledInputs::new(&x, &y).unwrap();
    let mut trainer = Trainer::from_spec(&small_spec(ArchId::K2c2), TrainingConfig::default()).unwrap();
    match trainer.train_epoch(d) {
        Err(Error::Divergence { epoch, step, .. }) => {
            assert_eq!(epoch, 1);
            assert!(step >= 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn overfits_a_small_set() {
    let (x, y) = random_data(32, 9, 0.3);
    let d = LabeledInputs::new(&x, &y).unwrap();
    let spec = ArchitectureTemplate::compact(ArchId::K2c2).at_multiplier(1.0).unwrap();
    let mut trainer = Trainer::from_spec(
        &spec,
        TrainingConfig {
            learning_rate: 3e-3,
            seed: 3,
            ..TrainingConfig::default()
        },
    )
    .unwrap();
    let mut auc = 0.0;
    for _ in 0..50 {
        trainer.train_epoch(d).unwrap();
        auc = trainer.mean_auc(d).unwrap();
        if auc >= 0.95 {
            break;
        }
    }
    assert!(auc >= 0.95, "training AUC {auc}");
}

#[test]
fn history_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("history.csv");
    let h = vec![
        EpochRecord {
            epoch: 1,
            train_loss: 0.69,
            valid_auc: 0.51,
            seconds: 1.5,
        },
        EpochRecord {
            epoch: 2,
            train_loss: 0.5,
            valid_auc: 0.6,
            seconds: 1.25,
        },
    ];
    write_history(&h, &p).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("epoch,train_loss,valid_auc,seconds\n"));
    assert_eq!(read_history(&p).unwrap(), h);
    write_history(&[], &p).unwrap();
    assert!(read_history(&p).unwrap().is_empty());
}
