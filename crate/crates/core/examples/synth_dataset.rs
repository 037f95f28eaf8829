//! Write a phantom dataset to disk and print what the manifest records.
//!
//! ```text
//! cargo run --release --example synth_dataset -- /tmp/phantoms [patients] [seed]
//! ```

use std::path::PathBuf;

use petseg::ingest;
use petseg::phantom::{generate_dataset, DatasetSpec, PhantomSpec};

fn main() -> petseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = PathBuf::from(args.first().map_or("phantoms", String::as_str));
    let n_patients = args.get(1).map_or(6, |s| s.parse().expect("patients"));
    let seed = args.get(2).map_or(0, |s| s.parse().expect("seed"));

    let spec = DatasetSpec { n_patients, n_negative: 1, template: PhantomSpec::default(), seed };
    let manifest = generate_dataset(&root, &spec)?;
    for p in &manifest.patients {
        println!(
            "{}  lesions {}  volume {:7.2} mL  lesion slices {:?}",
            p.patient_id, p.n_lesions, p.lesion_volume_ml, p.lesion_slices
        );
    }

    let back = ingest::load_patients(&root)?;
    let negatives = back.iter().filter(|p| p.is_negative()).count();
    println!("reloaded {} patients from {} ({negatives} negative)", back.len(), root.display());
    Ok(())
}
