mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use readmit_core::metrics::{auprc, auroc, ece};
use readmit_core::pipeline::{
    grid_search, platt_calibrate, platt_fit, predict_scores, raw_scores, split_dataset, train_local, Calibrator,
    Hyperparameters, SplitSpec,
};

fn fast_hp() -> Hyperparameters {
    Hyperparameters {
        lr: 3e-3,
        batch_size: 32,
        max_epochs: 6,
        patience: 2,
        embed_dim: 6,
        hidden_dim: 8,
        attn_dim: 6,
        dense_dim: 6,
        dropout_rate: 0.0,
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let ds = common::small_site(700, 3);
    let folds = split_dataset(&ds, &SplitSpec { seed: 1, ..Default::default() }).unwrap();
    let (m1, log1) = train_local(&folds.train, &folds.valid, &fast_hp(), 11).unwrap();
    let (m2, log2) = train_local(&folds.train, &folds.valid, &fast_hp(), 11).unwrap();
    assert!(log1.final_train_loss() < log1.initial_train_loss());
    assert_eq!(log1, log2);
    let bits = |m: &readmit_core::neural::RiskModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&m1), bits(&m2));
    assert_eq!(log1.records[0].epoch, 0);
    assert!(log1.records[0].valid_auprc.is_none());
    let mut jsonl = Vec::new();
    log1.write_jsonl(&mut jsonl).unwrap();
    assert_eq!(String::from_utf8(jsonl).unwrap().lines().count(), log1.records.len());
}

#[test]
fn separable_fixture_learns() {
    let ds = common::small_site(500, 8);
    let mut ds50 = ds.subset(&(0..50).collect::<Vec<_>>());
    // label by a planted, visible feature: the claim-count expert feature
    let median = {
        let mut v: Vec<f64> = ds50.examples.iter().map(|e| e.expert[5]).collect();
        v.sort_by(f64::total_cmp);
        v[25]
    };
    for e in &mut ds50.examples {
        e.label = e.expert[5] > median;
    }
    let hp = Hyperparameters { max_epochs: 20, patience: 20, ..fast_hp() };
    let (_, log) = train_local(&ds50, &ds50, &hp, 2).unwrap();
    assert!(log.final_train_loss() < log.initial_train_loss());
}

#[test]
fn patience_zero_stops_one_epoch_after_first_evaluation() {
    let ds = common::small_site(500, 4);
    let folds = split_dataset(&ds, &SplitSpec { seed: 2, ..Default::default() }).unwrap();
    let hp = Hyperparameters { lr: 0.0, patience: 0, max_epochs: 10, ..fast_hp() };
    let (_, log) = train_local(&folds.train, &folds.valid, &hp, 1).unwrap();
    assert_eq!(log.epochs_run(), 2);
    assert_eq!(log.best_epoch, 1);
}

#[test]
fn grid_selection_and_determinism() {
    let ds = common::small_site(500, 5);
    let folds = split_dataset(&ds, &SplitSpec { seed: 3, ..Default::default() }).unwrap();
    let one = grid_search(&folds.train, &folds.valid, &[fast_hp()], 9).unwrap();
    assert_eq!(one.best_index, 0);
    let grid = [fast_hp(), Hyperparameters { hidden_dim: 4, ..fast_hp() }, Hyperparameters { lr: 1e-3, ..fast_hp() }];
    let a = grid_search(&folds.train, &folds.valid, &grid, 9).unwrap();
    let b = grid_search(&folds.train, &folds.valid, &grid, 9).unwrap();
    assert_eq!(a.best_index, b.best_index);
    assert_eq!(a.scores, b.scores);
    assert!(grid_search(&folds.train, &folds.valid, &[], 9).is_err());
}

#[test]
fn platt_recovers_identity_on_calibrated_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..20000 {
        let s: f64 = rng.random_range(0.02..0.98);
        scores.push(s);
        labels.push(rng.random_bool(s));
    }
    let c = platt_fit(&scores, &labels).unwrap();
    assert!((c.a - 1.0).abs() < 0.1 && c.b.abs() < 0.1, "{c:?}");
}

#[test]
fn platt_recovers_known_distortion() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let truth = Calibrator { a: 0.5, b: -1.0 };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..40000 {
        let s: f64 = rng.random_range(0.01..0.99);
        scores.push(s);
        labels.push(rng.random_bool(truth.apply(s)));
    }
    let c = platt_fit(&scores, &labels).unwrap();
    assert!((c.a - 0.5).abs() < 0.05 && (c.b + 1.0).abs() < 0.1, "{c:?}");
}

#[test]
fn calibration_preserves_ranking_and_does_not_worsen_ece() {
    let ds = common::small_site(900, 6);
    let folds = split_dataset(&ds, &SplitSpec { seed: 4, ..Default::default() }).unwrap();
    let (mut m, _) = train_local(&folds.train, &folds.valid, &fast_hp(), 5).unwrap();
    let before = raw_scores(&m, &folds.calib).unwrap();
    m.calibrator = Some(platt_calibrate(&m, &folds.calib).unwrap());
    let after = predict_scores(&m, &folds.calib).unwrap();
    let labels = folds.calib.labels();
    assert_eq!(auroc(&before, &labels).unwrap(), auroc(&after, &labels).unwrap());
    assert_eq!(auprc(&before, &labels).unwrap(), auprc(&after, &labels).unwrap());
    assert!(ece(&after, &labels, 10).unwrap() <= ece(&before, &labels, 10).unwrap() + 1e-12);
}
