//! Independent reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use petseg::ingest::{Modality, PatientRecord, SliceSample, Volume3D};
use petseg::sampler::{build_cycle_plan, epoch_training_list, interleave_even, Origin, SchedulerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Jaccard loss of the error set `s` against the positive set `g`:
/// `1 - |G \ S| / |G ∪ S|`, zero when both are empty.
fn jaccard_set_loss(g: &[bool], s: &[bool]) -> f64 {
    let keep = g.iter().zip(s).filter(|(&gi, &si)| gi && !si).count();
    let union = g.iter().zip(s).filter(|(&gi, &si)| gi || si).count();
    if union == 0 {
        0.0
    } else {
        1.0 - keep as f64 / union as f64
    }
}

/// Lovász extension of the Jaccard set loss evaluated at the hinge errors, via the
/// level-set integral `∫₀^∞ Δ({i : m_i ≥ t}) dt` over the distinct error levels.
pub fn lovasz_oracle(logits: &[f64], labels: &[f64]) -> f64 {
    let m: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(&f, &y)| (1.0 - f * (2.0 * y - 1.0)).max(0.0))
        .collect();
    let g: Vec<bool> = labels.iter().map(|&y| y > 0.5).collect();
    let mut levels: Vec<f64> = m.iter().copied().filter(|&v| v > 0.0).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let mut total = 0.0;
    for (k, &t) in levels.iter().enumerate() {
        let next = levels.get(k + 1).copied().unwrap_or(0.0);
        let s: Vec<bool> = m.iter().map(|&v| v >= t).collect();
        total += (t - next) * jaccard_set_loss(&g, &s);
    }
    total
}

pub fn dice_loss_oracle(p: &[f64], y: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sy: f64 = y.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sp + sy + 1.0)
}

pub fn bce_oracle(p: &[f64], y: &[f64]) -> f64 {
    let eps = 1e-7;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}

/// 26-connected components by breadth-first flood fill; each component is a list of
/// flat voxel indices.
pub fn flood_fill_components(shape: [usize; 3], mask: &[bool]) -> Vec<Vec<usize>> {
    let [nz, ny, nx] = shape;
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (z, y, x) = (i / (ny * nx), (i / nx) % ny, i % nx);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if zz < 0 || yy < 0 || xx < 0 || zz >= nz as i64 || yy >= ny as i64 || xx >= nx as i64 {
                            continue;
                        }
                        let j = (zz as usize * ny + yy as usize) * nx + xx as usize;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Volume in mL of the components of `a` that share no voxel with `b`.
fn disjoint_volume(shape: [usize; 3], a: &[bool], b: &[bool], spacing: [f64; 3]) -> f64 {
    let voxels: usize = flood_fill_components(shape, a)
        .into_iter()
        .filter(|c| c.iter().all(|&i| !b[i]))
        .map(|c| c.len())
        .sum();
    voxels as f64 * spacing[0] * spacing[1] * spacing[2] / 1000.0
}

pub fn fpv_oracle(shape: [usize; 3], pred: &[bool], gt: &[bool], spacing: [f64; 3]) -> f64 {
    disjoint_volume(shape, pred, gt, spacing)
}

pub fn fnv_oracle(shape: [usize; 3], pred: &[bool], gt: &[bool], spacing: [f64; 3]) -> f64 {
    disjoint_volume(shape, gt, pred, spacing)
}

pub fn dice_oracle(pred: &[bool], gt: &[bool]) -> f64 {
    let p = pred.iter().filter(|&&v| v).count();
    let g = gt.iter().filter(|&&v| v).count();
    let i = pred.iter().zip(gt).filter(|(&a, &b)| a && b).count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

/// Patient whose label has one voxel on each slice listed in `lesion_z`.
pub fn patient_with_lesions(id: &str, nz: usize, lesion_z: &[usize]) -> PatientRecord {
    let shape = [nz, 2, 2];
    let sp = [2.0; 3];
    let ct = Volume3D::filled(0.0, shape, sp, Modality::Ct).unwrap();
    let suv = Volume3D::filled(1.0, shape, sp, Modality::Pet).unwrap();
    let mut label = Volume3D::filled(0.0, shape, sp, Modality::Label).unwrap();
    for &z in lesion_z {
        let i = label.index(z, 1, 1);
        label.data[i] = 1.0;
    }
    PatientRecord::new(id, ct, suv, label).unwrap()
}

/// Random pool of `n` patients, each with `4..=max_slices` slices of which up to half carry a lesion.
pub fn random_pool(rng: &mut ChaCha8Rng, n: usize, max_slices: usize) -> Vec<PatientRecord> {
    (0..n)
        .map(|i| {
            let nz = rng.random_range(4..=max_slices);
            let k = rng.random_range(1..=nz / 2);
            let mut zs: Vec<usize> = (0..nz).collect();
            for j in 0..k {
                let r = rng.random_range(j..nz);
                zs.swap(j, r);
            }
            patient_with_lesions(&format!("q{i:03}"), nz, &zs[..k])
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random boolean volume with the given fill probability.
pub fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3], fill: f64) -> Vec<bool> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_bool(fill)).collect()
}

/// Numbers of lesion items between consecutive whole-body items (and at both ends).
pub fn gaps(flags: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run = 0;
    for &wb in flags {
        if wb {
            out.push(run);
            run = 0;
        } else {
            run += 1;
        }
    }
    out.push(run);
    out
}

/// Checks every structural invariant of a cycle plan and its first cycle of epoch lists.
pub fn check_plan_invariants(patients: &[PatientRecord], cfg: &SchedulerConfig) -> Result<(), String> {
    let plan = build_cycle_plan(patients, cfg).map_err(|e| e.to_string())?;
    if plan != build_cycle_plan(patients, cfg).unwrap() {
        return Err("plan not deterministic".into());
    }
    let training: Vec<&PatientRecord> = patients.iter().filter(|p| !p.is_negative()).collect();
    let n_lesion: usize = training.iter().map(|p| p.lesion_slices.len()).sum();
    if plan.lesion_base.len() != n_lesion {
        return Err(format!("lesion base {} != {n_lesion}", plan.lesion_base.len()));
    }
    let target = (n_lesion as f64 / cfg.alpha).round() as usize;
    if plan.target_wb_count != target {
        return Err(format!("target {} != {target}", plan.target_wb_count));
    }
    if plan.degenerate {
        return if target == 0 && plan.batches.len() == 1 && plan.batches[0].native_slices.is_empty() {
            Ok(())
        } else {
            Err("bad degenerate plan".into())
        };
    }

    // disjoint patients, full coverage, native slices exactly the members' pools
    let mut seen = HashSet::new();
    for b in &plan.batches {
        let mut expect = Vec::new();
        for id in &b.patient_ids {
            if !seen.insert(id.clone()) {
                return Err(format!("patient {id} in two batches"));
            }
            let p = training.iter().find(|p| &p.patient_id == id).ok_or("unknown patient")?;
            expect.extend(p.nonlesion_samples());
        }
        if expect != b.native_slices {
            return Err(format!("batch {} native slices differ from its patients' pools", b.batch_index));
        }
    }
    if seen.len() != training.len() {
        return Err(format!("{} of {} patients planned", seen.len(), training.len()));
    }

    // ratio bound on every non-final batch
    let max_pool = training.iter().map(|p| p.nonlesion_slices.len()).max().unwrap_or(0);
    let k = plan.batches.len();
    for b in &plan.batches[..k - 1] {
        let size = b.native_slices.len();
        if size < target || size >= target + max_pool {
            return Err(format!("batch {} size {size} outside [{target}, {})", b.batch_index, target + max_pool));
        }
    }

    // carryover sizes and provenance
    for (i, b) in plan.batches.iter().enumerate() {
        let prev_slices: Vec<SliceSample> = match i {
            0 => plan.batches[k - 1].total_slices(),
            1 => plan.batches[0].native_slices.clone(),
            _ => plan.batches[i - 1].total_slices(),
        };
        let want = (cfg.carryover_fraction * prev_slices.len() as f64).floor() as usize;
        if b.carried_in.len() != want {
            return Err(format!("batch {i} carried {} != {want}", b.carried_in.len()));
        }
        let prev: HashSet<&SliceSample> = prev_slices.iter().collect();
        let uniq: HashSet<&SliceSample> = b.carried_in.iter().collect();
        if uniq.len() != b.carried_in.len() || !b.carried_in.iter().all(|s| prev.contains(s)) {
            return Err(format!("batch {i} carryover is not a subset without repeats"));
        }
    }

    // one full cycle of epoch lists
    let mut covered = HashSet::new();
    for e in 0..k * cfg.beta {
        let ep = epoch_training_list(&plan, e, cfg);
        if ep != epoch_training_list(&plan, e, cfg) {
            return Err(format!("epoch {e} not deterministic"));
        }
        if ep.active_batch != (e / cfg.beta) % k {
            return Err(format!("epoch {e} uses batch {}", ep.active_batch));
        }
        let active = plan.batches[ep.active_batch].total_slices();
        if ep.slices.len() != plan.lesion_base.len() + active.len() {
            return Err(format!("epoch {e} has {} slices", ep.slices.len()));
        }
        let mut lesion: Vec<&SliceSample> =
            ep.slices.iter().filter(|s| s.origin == Origin::Lesion).map(|s| &s.sample).collect();
        lesion.sort();
        let mut base: Vec<&SliceSample> = plan.lesion_base.iter().collect();
        base.sort();
        if lesion != base {
            return Err(format!("epoch {e} lesion slices are not the lesion base once each"));
        }
        let flags: Vec<bool> = ep.slices.iter().map(|s| s.origin != Origin::Lesion).collect();
        check_even(&flags).map_err(|g| format!("epoch {e}: {g}"))?;
        covered.extend(ep.slices.iter().map(|s| s.sample.clone()));
    }
    for p in &training {
        if !p.nonlesion_samples().iter().all(|s| covered.contains(s)) {
            return Err(format!("pool of {} not covered in one cycle", p.patient_id));
        }
    }
    Ok(())
}

/// Interior gaps (lesion runs between consecutive whole-body items) differ by at most one.
pub fn check_even(flags: &[bool]) -> Result<(), String> {
    let g = gaps(flags);
    if g.len() > 2 {
        let inner = &g[1..g.len() - 1];
        let (lo, hi) = (inner.iter().min().unwrap(), inner.iter().max().unwrap());
        if hi - lo > 1 {
            return Err(format!("uneven gaps {inner:?}"));
        }
    }
    Ok(())
}

/// Length, order preservation and evenness of `interleave_even` for one `(n, m)`.
pub fn check_interleave(n: usize, m: usize) -> Result<(), String> {
    let a: Vec<(bool, usize)> = (0..n).map(|i| (false, i)).collect();
    let b: Vec<(bool, usize)> = (0..m).map(|i| (true, i)).collect();
    let out = interleave_even(a, b);
    if out.len() != n + m {
        return Err(format!("n={n} m={m}: length {}", out.len()));
    }
    for side in [false, true] {
        let idx: Vec<usize> = out.iter().filter(|x| x.0 == side).map(|x| x.1).collect();
        if idx != (0..if side { m } else { n }).collect::<Vec<_>>() {
            return Err(format!("n={n} m={m}: order not preserved"));
        }
    }
    let flags: Vec<bool> = out.iter().map(|x| x.0).collect();
    check_even(&flags).map_err(|e| format!("n={n} m={m}: {e}"))
}
