//! Whole-body slice sampling.
//!
//! Training lists are built from every lesion-containing slice of the training
//! patients, plus a rotating batch of whole-body slices from a subset of patients:
//!
//! * the number of whole-body slices per batch targets `round(n_lesion / alpha)`;
//!   patients are shuffled once and greedily grouped until a batch reaches the target,
//! * each batch stays active for `beta` epochs, then the next batch takes over,
//! * a fraction (default 25%) of every batch's slices is randomly carried into the
//!   following batch, and the last batch carries into the first,
//! * whole-body slices are spread at proportional intervals through the shuffled
//!   lesion list ([`interleave_even`]).
//!
//! A patient's whole-body pool is its non-lesion slices; its lesion slices are
//! already part of the lesion base.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PatientRecord, SliceSample};
use crate::rng::{derived_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Lesion : whole-body slice ratio. `inf` disables whole-body slices.
    pub alpha: f64,
    /// Epochs each whole-body batch stays active.
    pub beta: usize,
    pub carryover_fraction: f64,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 5, carryover_fraction: 0.25, seed: 0 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.beta < 1 {
            return Err(Error::Config("beta must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.carryover_fraction) {
            return Err(Error::Config(format!(
                "carryover_fraction must lie in [0, 1), got {}",
                self.carryover_fraction
            )));
        }
        Ok(())
    }

    /// Whole-body slices wanted per batch for a lesion base of `n_lesion` slices.
    pub fn target_wb_count(&self, n_lesion: usize) -> usize {
        let t = n_lesion as f64 / self.alpha;
        if t.is_finite() {
            t.round() as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Lesion,
    #[serde(rename = "wholebody")]
    WholeBody,
    Carried,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Lesion => "lesion",
            Origin::WholeBody => "wholebody",
            Origin::Carried => "carried",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WholeBodyBatch {
    pub batch_index: usize,
    pub patient_ids: Vec<String>,
    pub native_slices: Vec<SliceSample>,
    pub carried_in: Vec<SliceSample>,
}

impl WholeBodyBatch {
    /// Native slices followed by carried slices not already native.
    pub fn active_slices(&self) -> Vec<(SliceSample, Origin)> {
        let native: HashSet<(&str, usize)> =
            self.native_slices.iter().map(|s| (s.patient_id.as_str(), s.z)).collect();
        let mut seen = HashSet::new();
        let mut out: Vec<(SliceSample, Origin)> =
            self.native_slices.iter().map(|s| (s.clone(), Origin::WholeBody)).collect();
        for s in &self.carried_in {
            let key = (s.patient_id.as_str(), s.z);
            if !native.contains(&key) && seen.insert(key) {
                out.push((s.clone(), Origin::Carried));
            }
        }
        out
    }

    /// The set of distinct slices this batch hands to training.
    pub fn total_slices(&self) -> Vec<SliceSample> {
        self.active_slices().into_iter().map(|(s, _)| s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CyclePlan {
    pub batches: Vec<WholeBodyBatch>,
    pub lesion_base: Vec<SliceSample>,
    pub target_wb_count: usize,
    /// Set when the target is zero: one empty batch, lesion-only training.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedSlice {
    pub sample: SliceSample,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch_index: usize,
    pub active_batch: usize,
    pub slices: Vec<PlannedSlice>,
}

/// Greedy prefix grouping: a group closes once its cumulative size reaches `target`.
/// The trailing group keeps whatever is left. Returns index ranges into `sizes`.
pub fn group_by_target(sizes: &[usize], target: usize) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut acc = 0;
    for (i, &s) in sizes.iter().enumerate() {
        acc += s;
        if acc >= target {
            groups.push(start..i + 1);
            start = i + 1;
            acc = 0;
        }
    }
    if start < sizes.len() {
        groups.push(start..sizes.len());
    }
    groups
}

/// Splits patients into whole-body batches and fixes the carryover between them.
pub fn build_cycle_plan(patients: &[PatientRecord], config: &SchedulerConfig) -> Result<CyclePlan> {
    config.validate()?;
    let training: Vec<&PatientRecord> = patients.iter().filter(|p| !p.is_negative()).collect();
    let lesion_base: Vec<SliceSample> = training.iter().flat_map(|p| p.lesion_samples()).collect();
    if lesion_base.is_empty() {
        return Err(Error::NoLesionSlices);
    }
    let target = config.target_wb_count(lesion_base.len());
    if target == 0 {
        return Ok(CyclePlan {
            batches: vec![WholeBodyBatch {
                batch_index: 0,
                patient_ids: Vec::new(),
                native_slices: Vec::new(),
                carried_in: Vec::new(),
            }],
            lesion_base,
            target_wb_count: 0,
            degenerate: true,
        });
    }

    let mut order = training;
    order.shuffle(&mut derived_rng(config.seed, Stream::PatientOrder, 0));
    let sizes: Vec<usize> = order.iter().map(|p| p.nonlesion_slices.len()).collect();
    let mut batches: Vec<WholeBodyBatch> = group_by_target(&sizes, target)
        .into_iter()
        .enumerate()
        .map(|(batch_index, range)| {
            let members = &order[range];
            WholeBodyBatch {
                batch_index,
                patient_ids: members.iter().map(|p| p.patient_id.clone()).collect(),
                native_slices: members.iter().flat_map(|p| p.nonlesion_samples()).collect(),
                carried_in: Vec::new(),
            }
        })
        .collect();

    let k = batches.len();
    // Batch 1 draws from batch 0 before batch 0 receives its wrap-around carryover.
    for b in 1..k {
        let carried = carryover(&batches[b - 1], config.carryover_fraction, config.seed, b);
        batches[b].carried_in = carried;
    }
    batches[0].carried_in = carryover(&batches[k - 1], config.carryover_fraction, config.seed, 0);

    Ok(CyclePlan { batches, lesion_base, target_wb_count: target, degenerate: false })
}

/// Draws `floor(fraction * |prev|)` distinct slices of `prev` for the batch at `into_index`.
pub fn carryover(prev: &WholeBodyBatch, fraction: f64, seed: u64, into_index: usize) -> Vec<SliceSample> {
    let total = prev.total_slices();
    let count = (fraction * total.len() as f64).floor() as usize;
    let mut rng = derived_rng(seed, Stream::Carryover, into_index as u64);
    let mut picked = index::sample(&mut rng, total.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| total[i].clone()).collect()
}

/// Merges two lists so that slot `j` of the result takes the next whole-body item iff
/// `floor((j+1)·m/(n+m)) > floor(j·m/(n+m))`. Both input orders are preserved.
pub fn interleave_even<T>(lesion: Vec<T>, wholebody: Vec<T>) -> Vec<T> {
    let n = lesion.len();
    let m = wholebody.len();
    let total = n + m;
    let mut out = Vec::with_capacity(total);
    let mut a = lesion.into_iter();
    let mut b = wholebody.into_iter();
    for j in 0..total {
        let take_wb = (j + 1) * m / total > j * m / total;
        let item = if take_wb { b.next() } else { a.next() };
        out.push(item.expect("interleave counts are exact"));
    }
    out
}

/// Index of the whole-body batch active at `epoch_index`.
pub fn active_batch_index(plan: &CyclePlan, epoch_index: usize, config: &SchedulerConfig) -> usize {
    (epoch_index / config.beta) % plan.batches.len()
}

/// The ordered training list for one epoch.
pub fn epoch_training_list(plan: &CyclePlan, epoch_index: usize, config: &SchedulerConfig) -> EpochPlan {
    let active_batch = active_batch_index(plan, epoch_index, config);
    let mut lesion: Vec<PlannedSlice> = plan
        .lesion_base
        .iter()
        .map(|s| PlannedSlice { sample: s.clone(), origin: Origin::Lesion })
        .collect();
    let mut wholebody: Vec<PlannedSlice> = plan.batches[active_batch]
        .active_slices()
        .into_iter()
        .map(|(sample, origin)| PlannedSlice { sample, origin })
        .collect();
    lesion.shuffle(&mut derived_rng(config.seed, Stream::EpochShuffle, epoch_index as u64));
    wholebody.shuffle(&mut derived_rng(config.seed, Stream::EpochShuffle, epoch_index as u64));
    EpochPlan { epoch_index, active_batch, slices: interleave_even(lesion, wholebody) }
}

/// Text dump of a cycle plan: a `#` header, then one `patient_id,z,origin` line per
/// slice reference, grouped under `[lesion_base]` and `[batch k]` section markers.
pub fn dump_cycle_plan(plan: &CyclePlan, config: &SchedulerConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# cycle_plan alpha={} beta={} carryover_fraction={} seed={} lesion_slices={} target_wb_count={} batches={} degenerate={}",
        config.alpha,
        config.beta,
        config.carryover_fraction,
        config.seed,
        plan.lesion_base.len(),
        plan.target_wb_count,
        plan.batches.len(),
        plan.degenerate
    );
    let _ = writeln!(s, "[lesion_base]");
    for x in &plan.lesion_base {
        let _ = writeln!(s, "{},{},{}", x.patient_id, x.z, Origin::Lesion);
    }
    for b in &plan.batches {
        let _ = writeln!(
            s,
            "[batch {}] patients={} native={} carried={}",
            b.batch_index,
            b.patient_ids.join(" "),
            b.native_slices.len(),
            b.carried_in.len()
        );
        for x in &b.native_slices {
            let _ = writeln!(s, "{},{},{}", x.patient_id, x.z, Origin::WholeBody);
        }
        for x in &b.carried_in {
            let _ = writeln!(s, "{},{},{}", x.patient_id, x.z, Origin::Carried);
        }
    }
    s
}

/// Text dump of one epoch list, one `patient_id,z,origin` line per training slice in order.
pub fn dump_epoch_plan(plan: &EpochPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# epoch={} active_batch={} slices={}", plan.epoch_index, plan.active_batch, plan.slices.len());
    for x in &plan.slices {
        let _ = writeln!(s, "{},{},{}", x.sample.patient_id, x.sample.z, x.origin);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Modality, Volume3D};

    /// Patient with `lesion` lesion slices followed by `wb` lesion-free slices.
    pub(crate) fn synthetic_patient(id: &str, lesion: usize, wb: usize) -> PatientRecord {
        let shape = [lesion + wb, 2, 2];
        let sp = [1.0; 3];
        let ct = Volume3D::filled(0.0, shape, sp, Modality::Ct).unwrap();
        let suv = Volume3D::filled(1.0, shape, sp, Modality::Pet).unwrap();
        let mut label = Volume3D::filled(0.0, shape, sp, Modality::Label).unwrap();
        for z in 0..lesion {
            let i = label.index(z, 0, 0);
            label.data[i] = 1.0;
        }
        PatientRecord::new(id, ct, suv, label).unwrap()
    }

    #[test]
    fn greedy_grouping_worked_example() {
        assert_eq!(group_by_target(&[60, 50, 70, 40], 100), vec![0..2, 2..4]);
        assert_eq!(group_by_target(&[60, 50, 70], 100), vec![0..2, 2..3]);
        assert_eq!(group_by_target(&[120], 100), vec![0..1]);
        assert!(group_by_target(&[], 10).is_empty());
    }

    #[test]
    fn interleave_examples() {
        let a: Vec<String> = (1..=6).map(|i| format!("a{i}")).collect();
        let b: Vec<String> = (1..=3).map(|i| format!("b{i}")).collect();
        assert_eq!(
            interleave_even(a.clone(), b),
            ["a1", "a2", "b1", "a3", "a4", "b2", "a5", "a6", "b3"]
        );
        assert_eq!(interleave_even(a.clone(), vec![]), a);
        assert_eq!(interleave_even(vec!["a1"], vec!["b1"]), ["a1", "b1"]);
        assert_eq!(interleave_even(Vec::<u8>::new(), vec![1, 2]), [1, 2]);
    }

    #[test]
    fn carryover_sizes() {
        let batch = WholeBodyBatch {
            batch_index: 0,
            patient_ids: vec!["p".into()],
            native_slices: synthetic_patient("p", 0, 110).nonlesion_samples(),
            carried_in: vec![],
        };
        let c = carryover(&batch, 0.25, 9, 1);
        assert_eq!(c.len(), 27);
        let all: HashSet<_> = batch.native_slices.iter().collect();
        assert!(c.iter().all(|s| all.contains(s)));
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 27);
        assert!(carryover(&batch, 0.0, 9, 1).is_empty());
    }

    #[test]
    fn single_patient_single_batch() {
        let p = vec![synthetic_patient("only", 5, 40)];
        let cfg = SchedulerConfig::default();
        let plan = build_cycle_plan(&p, &cfg).unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].patient_ids, vec!["only".to_string()]);
        let e0 = epoch_training_list(&plan, 0, &cfg);
        let e7 = epoch_training_list(&plan, 7, &cfg);
        assert_eq!(e0.slices.len(), 45);
        let mut a: Vec<_> = e0.slices.iter().map(|s| (&s.sample, s.origin)).collect();
        let mut b: Vec<_> = e7.slices.iter().map(|s| (&s.sample, s.origin)).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_excluded_and_errors() {
        let cfg = SchedulerConfig::default();
        let only_neg = vec![synthetic_patient("n", 0, 10)];
        assert!(matches!(build_cycle_plan(&only_neg, &cfg), Err(Error::NoLesionSlices)));
        let mixed = vec![synthetic_patient("n", 0, 10), synthetic_patient("p", 2, 10)];
        let plan = build_cycle_plan(&mixed, &cfg).unwrap();
        assert!(plan.batches.iter().all(|b| !b.patient_ids.contains(&"n".to_string())));
        assert!(build_cycle_plan(&mixed, &SchedulerConfig { alpha: 0.0, ..cfg.clone() }).is_err());
        assert!(build_cycle_plan(&mixed, &SchedulerConfig { beta: 0, ..cfg.clone() }).is_err());
        assert!(build_cycle_plan(&mixed, &SchedulerConfig { carryover_fraction: 1.0, ..cfg }).is_err());
    }

    #[test]
    fn infinite_alpha_degenerates_to_lesion_only() {
        let p = vec![synthetic_patient("a", 3, 10), synthetic_patient("b", 4, 10)];
        let cfg = SchedulerConfig { alpha: f64::INFINITY, ..Default::default() };
        let plan = build_cycle_plan(&p, &cfg).unwrap();
        assert!(plan.degenerate);
        assert_eq!(plan.target_wb_count, 0);
        let e = epoch_training_list(&plan, 3, &cfg);
        assert_eq!(e.slices.len(), 7);
        assert!(e.slices.iter().all(|s| s.origin == Origin::Lesion));
    }

    #[test]
    fn batch_rotation_follows_beta() {
        let p: Vec<_> = (0..4).map(|i| synthetic_patient(&format!("p{i}"), 25, 55)).collect();
        let cfg = SchedulerConfig::default();
        let plan = build_cycle_plan(&p, &cfg).unwrap();
        assert_eq!(plan.batches.len(), 2);
        let idx: Vec<usize> = (0..11).map(|e| epoch_training_list(&plan, e, &cfg).active_batch).collect();
        assert_eq!(idx, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0]);
    }

    #[test]
    fn dump_lines_have_three_fields() {
        let p = vec![synthetic_patient("a", 2, 5), synthetic_patient("b", 1, 6)];
        let cfg = SchedulerConfig::default();
        let plan = build_cycle_plan(&p, &cfg).unwrap();
        let text = dump_cycle_plan(&plan, &cfg);
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with('[')) {
            assert_eq!(line.split(',').count(), 3, "{line}");
        }
        let e = dump_epoch_plan(&epoch_training_list(&plan, 0, &cfg));
        assert!(e.starts_with("# epoch=0"));
    }
}
