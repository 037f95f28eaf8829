//! Show how the whole-body sampler rotates patient batches through training.
//!
//! ```text
//! cargo run --release --example inspect_plan -- [alpha] [beta]
//! ```

use petseg::ingest::PatientRecord;
use petseg::phantom::{generate_phantoms, DatasetSpec, PhantomSpec};
use petseg::sampler::{build_cycle_plan, epoch_training_list, Origin, SchedulerConfig};

fn main() -> petseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let alpha = args.first().map_or(1.0, |s| s.parse().expect("alpha"));
    let beta = args.get(1).map_or(5, |s| s.parse().expect("beta"));

    let ds = DatasetSpec { n_patients: 12, n_negative: 2, template: PhantomSpec::default(), seed: 0 };
    let patients: Vec<PatientRecord> = generate_phantoms(&ds)?.into_iter().map(|p| p.patient).collect();
    let cfg = SchedulerConfig { alpha, beta, ..SchedulerConfig::default() };
    let plan = build_cycle_plan(&patients, &cfg)?;

    println!("{} lesion slices, target {} whole-body slices per batch", plan.lesion_base.len(), plan.target_wb_count);
    if plan.degenerate {
        println!("alpha {alpha}: lesion-only training");
    }
    for b in &plan.batches {
        println!(
            "batch {}: {:?}  native {}  carried {}",
            b.batch_index,
            b.patient_ids,
            b.native_slices.len(),
            b.carried_in.len()
        );
    }
    for e in (0..plan.batches.len() * beta).step_by(beta) {
        let ep = epoch_training_list(&plan, e, &cfg);
        let count = |o: Origin| ep.slices.iter().filter(|s| s.origin == o).count();
        let head: String = ep.slices.iter().take(40).map(|s| match s.origin {
            Origin::Lesion => 'L',
            Origin::WholeBody => 'w',
            Origin::Carried => 'c',
        }).collect();
        println!(
            "epoch {e:>2}: batch {}  lesion {}  whole-body {}  carried {}  {head}…",
            ep.active_batch,
            count(Origin::Lesion),
            count(Origin::WholeBody),
            count(Origin::Carried)
        );
    }
    Ok(())
}
