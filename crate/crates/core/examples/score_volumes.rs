//! Dice, false-positive volume and false-negative volume on a perturbed phantom label.

use petseg::ingest::{Modality, Volume3D};
use petseg::metrics::score_prediction;
use petseg::phantom::{generate_patient, PhantomSpec};

fn main() -> petseg::Result<()> {
    let phantom = generate_patient(&PhantomSpec { seed: 9, ..PhantomSpec::default() }, "demo")?;
    let patient = &phantom.patient;
    for l in &phantom.lesions {
        println!("lesion at {:?} mm, r {:.1} mm, {} voxels", l.center_mm.map(|v| v.round()), l.radius_mm, l.voxel_count);
    }

    let perfect = score_prediction(&patient.label, patient)?;
    println!("ground truth      dice {:.3}  fpv {:.3} mL  fnv {:.3} mL", perfect.dice, perfect.fpv_ml, perfect.fnv_ml);

    // drop the first lesion and add a spurious blob in the brain
    let mut pred = patient.label.clone();
    let first = &phantom.lesions[0];
    let [nz, ny, nx] = pred.shape;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = [z, y, x].map(|v| v as f64);
                let d2: f64 = (0..3).map(|a| (c[a] * pred.spacing[a] - first.center_mm[a]).powi(2)).sum();
                let i = pred.index(z, y, x);
                if d2 <= (first.radius_mm + 4.0).powi(2) {
                    pred.data[i] = 0.0;
                }
            }
        }
    }
    let brain = phantom.organs[0].sphere.center_mm;
    let c = brain.map(|v| (v / 4.0).round() as usize);
    for dz in 0..2 {
        for dy in 0..3 {
            for dx in 0..3 {
                let i = pred.index(c[0] + dz, c[1] + dy, c[2] + dx);
                pred.data[i] = 1.0;
            }
        }
    }
    let pred = Volume3D::new(pred.data, pred.shape, pred.spacing, Modality::Label)?;
    let r = score_prediction(&pred, patient)?;
    println!("perturbed         dice {:.3}  fpv {:.3} mL  fnv {:.3} mL", r.dice, r.fpv_ml, r.fnv_ml);
    Ok(())
}
