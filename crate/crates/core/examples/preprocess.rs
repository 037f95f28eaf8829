//! Turn one axial slice of a phantom into the two-channel network input.

use petseg::ingest::{preprocess_label, preprocess_slice};
use petseg::phantom::{generate_patient, PhantomSpec};

fn main() -> petseg::Result<()> {
    let phantom = generate_patient(&PhantomSpec { seed: 4, ..PhantomSpec::default() }, "demo")?;
    let patient = &phantom.patient;
    let z = patient.lesion_slices.first().copied().unwrap_or(0);
    let size = 64;
    let x = preprocess_slice(patient, z, size)?;
    let y = preprocess_label(patient, z, size)?;
    let (ct, pet) = x.split_at(size * size);
    let range = |v: &[f32]| v.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    println!("slice z={z} of {:?}", patient.shape());
    println!("CT channel  range {:?}", range(ct));
    println!("SUV channel range {:?}", range(pet));
    println!("lesion pixels {}", y.iter().filter(|&&v| v > 0.5).count());

    // crude picture of the SUV channel: '#' lesion, '+' hot, '.' body
    for row in (0..size).step_by(4) {
        let line: String = (0..size)
            .step_by(2)
            .map(|col| {
                let i = row * size + col;
                if y[i] > 0.5 {
                    '#'
                } else if pet[i] > 0.1 {
                    '+'
                } else if pet[i] > 0.01 {
                    '.'
                } else {
                    ' '
                }
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
