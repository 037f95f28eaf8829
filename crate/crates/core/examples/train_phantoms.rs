//! Train the toy network on in-memory phantoms and report validation and test scores.
//!
//! ```text
//! cargo run --release --example train_phantoms -- [epochs] [alpha] [seed]
//! ```

use std::time::Instant;

use petseg::config::RunConfig;
use petseg::metrics::{evaluate_patient, EvalReport};
use petseg::phantom::{generate_phantoms, DatasetSpec};
use petseg::trainer::train;

fn main() -> petseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(Ok(20), |s| s.parse()).expect("epochs");
    let alpha: f64 = args.get(1).map_or(Ok(1.0), |s| s.parse()).expect("alpha");
    let seed: u64 = args.get(2).map_or(Ok(0), |s| s.parse()).expect("seed");

    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    cfg.train.epochs = epochs;
    cfg.scheduler.alpha = alpha;

    let patients: Vec<_> = generate_phantoms(&cfg.phantom)?.into_iter().map(|p| p.patient).collect();
    let test_spec = DatasetSpec { n_patients: 4, n_negative: 1, seed: seed + 1000, ..cfg.phantom.clone() };
    let test: Vec<_> = generate_phantoms(&test_spec)?.into_iter().map(|p| p.patient).collect();

    let start = Instant::now();
    let outcome = train(&patients, &cfg.train, &cfg.scheduler, &cfg.model, None, &mut |r| {
        println!(
            "epoch {:>2}  lr {:.2e}  loss {:.4}  val dice {:.4}  [{:.0?}]",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_dice,
            start.elapsed()
        );
    })?;
    println!("best val dice {:.4} at epoch {}", outcome.best.val_dice, outcome.best.epoch);

    let mut report = EvalReport::default();
    for p in &test {
        report.rows.push(evaluate_patient(&outcome.best.model, p, cfg.train.out_size, cfg.train.threshold)?);
    }
    for r in &report.rows {
        println!("{}  dice {:.4}  fpv {:.3} mL  fnv {:.3} mL", r.patient_id, r.dice, r.fpv_ml, r.fnv_ml);
    }
    let s = report.summary();
    println!("test mean: dice {:.4}  fpv {:.3} mL  fnv {:.3} mL", s.mean_dice, s.mean_fpv_ml, s.mean_fnv_ml);
    Ok(())
}
