use petseg::checkpoint::Checkpoint;
use petseg::config::RunConfig;
use petseg::ingest::PatientRecord;
use petseg::phantom::generate_phantoms;
use petseg::trainer::{train, Trainer, TrainHistory};

fn small() -> (RunConfig, Vec<PatientRecord>) {
    let mut cfg = RunConfig::default();
    cfg.phantom.n_patients = 7;
    cfg.phantom.n_negative = 1;
    cfg.phantom.template.grid = [20, 32, 32];
    cfg.train.out_size = 32;
    cfg.train.batch_size = 6;
    cfg.train.epochs = 2;
    let patients = generate_phantoms(&cfg.phantom).unwrap().into_iter().map(|p| p.patient).collect();
    (cfg, patients)
}

#[test]
fn epochs_consume_exactly_the_sampler_list() {
    let (cfg, patients) = small();
    let mut t = Trainer::new(&patients, &cfg.train, &cfg.scheduler, &cfg.model).unwrap();
    let train_ids = t.train_patient_ids();
    assert!(!train_ids.iter().any(|id| id == "p006"), "negative patient in training set");
    assert!(t.val_patient_ids().iter().all(|id| !train_ids.contains(id)));
    for e in 0..2 {
        let want: Vec<_> = t.epoch_plan(e).slices.into_iter().map(|p| p.sample).collect();
        let rec = t.run_epoch(e).unwrap();
        assert_eq!(t.last_consumed, want);
        assert!(t.last_consumed.iter().all(|s| train_ids.contains(&s.patient_id)));
        assert!(rec.train_loss.is_finite());
        assert_eq!(rec.lr, cfg.train.lr(e));
    }
    let per_epoch: u64 = (0..2).map(|e| t.epoch_plan(e).slices.len().div_ceil(6) as u64).sum();
    assert_eq!(t.steps, per_epoch);
}

#[test]
fn best_checkpoint_is_persisted_and_runs_repeat() {
    let (cfg, patients) = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let a = train(&patients, &cfg.train, &cfg.scheduler, &cfg.model, Some(&path), &mut |_| {}).unwrap();
    assert_eq!(a.history.records.len(), 2);
    let best = a.history.best_val_dice().unwrap();
    assert_eq!(a.best.val_dice, best);
    let saved = Checkpoint::load(&path).unwrap();
    assert_eq!((saved.epoch, saved.val_dice), (a.best.epoch, a.best.val_dice));
    assert_eq!(saved.loss_weights, a.best.loss_weights);
    // the loss weights move under their own optimizer
    assert_ne!(a.history.records[1].s_dice, 0.0);

    let b = train(&patients, &cfg.train, &cfg.scheduler, &cfg.model, None, &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);

    let csv = dir.path().join("history.csv");
    a.history.write_csv(&csv).unwrap();
    assert_eq!(TrainHistory::read_csv(&csv).unwrap(), a.history);
}

#[test]
fn too_few_patients_for_folds_is_an_error() {
    let (mut cfg, patients) = small();
    cfg.train.folds = 10;
    cfg.train.fold_index = 0;
    assert!(Trainer::new(&patients, &cfg.train, &cfg.scheduler, &cfg.model).is_err());
}
