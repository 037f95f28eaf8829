//! Training loop: patient-level k-fold split, sampler-driven epochs, AdamW on the
//! network with a cosine-annealed learning rate, Adam on the loss weights, and
//! best-checkpoint selection by validation Dice.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ingest::{self, PatientRecord, SliceSample};
use crate::losses::{combined_loss, LossWeights};
use crate::model::{build_model, ModelConfig, SegModel};
use crate::nn::Tensor;
use crate::optim::{cosine_lr, Adam, AdamW};
use crate::rng::{derived_rng, Stream};
use crate::sampler::{build_cycle_plan, epoch_training_list, CyclePlan, EpochPlan, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Length of the cosine schedule in epochs; training may stop before it ends.
    pub cosine_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Learning rate of the loss-weight optimizer.
    pub weight_lr: f64,
    pub folds: usize,
    pub fold_index: usize,
    /// Side of the square network canvas.
    pub out_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            epochs: 80,
            lr_init: 1e-5,
            lr_final: 1e-8,
            cosine_period: 100,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weight_decay: 1e-2,
            weight_lr: 1e-4,
            folds: 5,
            fold_index: 0,
            out_size: 256,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for 64×64 phantoms: small batches and a larger learning rate
    /// range (same 1000:1 decay ratio) so a randomly initialized toy network learns
    /// within a few dozen epochs.
    pub fn toy() -> Self {
        Self { batch_size: 8, epochs: 10, lr_init: 3e-3, lr_final: 3e-6, out_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.out_size == 0 {
            return Err(Error::Config("batch_size and out_size must be positive".into()));
        }
        if !(self.lr_final <= self.lr_init) || !(self.lr_final >= 0.0) {
            return Err(Error::Config(format!("need 0 <= lr_final <= lr_init, got {} / {}", self.lr_final, self.lr_init)));
        }
        if self.folds < 2 || self.fold_index >= self.folds {
            return Err(Error::Config(format!("fold_index {} outside 0..{}", self.fold_index, self.folds)));
        }
        if self.cosine_period == 0 {
            return Err(Error::Config("cosine_period must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.lr_init, self.lr_final, self.cosine_period)
    }
}

/// One train/validation split, as indices into the patient list that was split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into `k` near-equal parts; fold `f` validates on part `f`.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} patients into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, Stream::Fold, 0));
    let parts: Vec<&[usize]> = (0..k).map(|f| &order[f * n / k..(f + 1) * n / k]).collect();
    Ok((0..k)
        .map(|f| Fold {
            val: parts[f].to_vec(),
            train: parts.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, p)| p.iter().copied()).collect(),
        })
        .collect())
}

/// Drops negative patients, then returns the (train, validation) patients of
/// `config.fold_index`.
pub fn split_patients<'a>(
    patients: &'a [PatientRecord],
    config: &TrainConfig,
) -> Result<(Vec<&'a PatientRecord>, Vec<&'a PatientRecord>)> {
    let positive: Vec<&PatientRecord> = patients.iter().filter(|p| !p.is_negative()).collect();
    let folds = kfold_split(positive.len(), config.folds, config.seed)?;
    let fold = folds
        .get(config.fold_index)
        .ok_or_else(|| Error::Config(format!("fold_index {} outside 0..{}", config.fold_index, config.folds)))?;
    Ok((fold.train.iter().map(|&i| positive[i]).collect(), fold.val.iter().map(|&i| positive[i]).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub s_dice: f64,
    pub s_lovasz: f64,
    pub s_bce: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with columns `epoch,lr,train_loss,s_dice,s_lovasz,s_bce,val_dice`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn best_val_dice(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_dice).fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Mean per-slice Dice at a fixed threshold over 2D masks given as logits and labels.
pub fn slice_dice(logits: &[f32], labels: &[f32], threshold: f64) -> f64 {
    let cut = (threshold / (1.0 - threshold)).ln() as f32;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&f, &y) in logits.iter().zip(labels) {
        let pred = f > cut;
        let gt = y > 0.5;
        p += pred as usize;
        g += gt as usize;
        inter += (pred && gt) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Stateful training run over one fold.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub plan: CyclePlan,
    pub model: SegModel,
    pub weights: LossWeights,
    pub history: TrainHistory,
    pub best: Option<Checkpoint>,
    train_patients: Vec<&'a PatientRecord>,
    val_patients: Vec<&'a PatientRecord>,
    optimizer: AdamW,
    weight_optimizer: Adam<3>,
    checkpoint_path: Option<PathBuf>,
    /// Slices consumed by the most recent epoch, in training order.
    pub last_consumed: Vec<SliceSample>,
    pub steps: u64,
}

impl<'a> Trainer<'a> {
    /// Excludes negative patients, splits the rest into folds and plans the sampler on
    /// the training part of `config.fold_index`.
    pub fn new(
        patients: &'a [PatientRecord],
        config: &TrainConfig,
        scheduler: &SchedulerConfig,
        model_config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        scheduler.validate()?;
        let (train_patients, val_patients) = split_patients(patients, config)?;
        let owned: Vec<PatientRecord> = train_patients.iter().map(|p| (*p).clone()).collect();
        let plan = build_cycle_plan(&owned, scheduler)?;
        let model = build_model(model_config)?;
        Ok(Self {
            config: config.clone(),
            scheduler: scheduler.clone(),
            plan,
            model,
            weights: LossWeights::default(),
            history: TrainHistory::default(),
            best: None,
            train_patients,
            val_patients,
            optimizer: AdamW::new(config.adam_beta1, config.adam_beta2, config.weight_decay),
            weight_optimizer: Adam::new(config.weight_lr),
            checkpoint_path: None,
            last_consumed: Vec::new(),
            steps: 0,
        })
    }

    /// Also write the best checkpoint to `path` whenever validation Dice improves.
    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn train_patient_ids(&self) -> Vec<String> {
        self.train_patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    pub fn val_patient_ids(&self) -> Vec<String> {
        self.val_patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    pub fn epoch_plan(&self, epoch: usize) -> EpochPlan {
        epoch_training_list(&self.plan, epoch, &self.scheduler)
    }

    fn patient(&self, id: &str) -> Result<&'a PatientRecord> {
        self.train_patients
            .iter()
            .chain(&self.val_patients)
            .find(|p| p.patient_id == id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown patient {id}")))
    }

    fn batch(&self, slices: &[SliceSample]) -> Result<(Tensor, Vec<f32>)> {
        let s = self.config.out_size;
        let mut images = Vec::with_capacity(slices.len());
        let mut labels = Vec::with_capacity(slices.len() * s * s);
        for x in slices {
            let p = self.patient(&x.patient_id)?;
            images.push(ingest::preprocess_slice(p, x.z, s)?);
            labels.extend(ingest::preprocess_label(p, x.z, s)?);
        }
        Ok((Tensor::stack(&images, 2, s, s)?, labels))
    }

    /// One optimizer step on `slices`; returns the combined loss.
    fn step(&mut self, epoch: usize, lr: f64, slices: &[SliceSample]) -> Result<f64> {
        let (input, labels) = self.batch(slices)?;
        let (logits, cache) = self.model.forward_train(&input)?;
        let f: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
        let s = self.config.out_size;
        let out = combined_loss(&f, &y, s * s, &self.weights).map_err(|e| Error::NonFiniteLoss {
            epoch,
            step: self.steps as usize,
            detail: e.to_string(),
        })?;
        if !out.total.is_finite() || out.grad_logits.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.steps as usize,
                detail: format!("total {} with s = {:?}", out.total, self.weights.s),
            });
        }
        let grad = Tensor::new(logits.shape, out.grad_logits.iter().map(|&g| g as f32).collect())?;
        self.model.zero_grad();
        self.model.backward(cache, &grad)?;
        self.optimizer.step(&mut self.model, lr);
        self.weight_optimizer.step(&mut self.weights.s, &out.grad_s);
        self.steps += 1;
        Ok(out.total)
    }

    /// Mean per-slice Dice over the lesion slices of the validation patients.
    pub fn validate(&self) -> Result<f64> {
        let slices: Vec<SliceSample> = self.val_patients.iter().flat_map(|p| p.lesion_samples()).collect();
        if slices.is_empty() {
            return Ok(0.0);
        }
        let s = self.config.out_size;
        let mut total = 0.0;
        for chunk in slices.chunks(self.config.batch_size) {
            let (input, labels) = self.batch(chunk)?;
            let logits = self.model.forward(&input)?;
            for b in 0..chunk.len() {
                total += slice_dice(logits.image(b), &labels[b * s * s..(b + 1) * s * s], self.config.threshold);
            }
        }
        Ok(total / slices.len() as f64)
    }

    /// Trains one epoch on the sampler's list for `epoch`, validates, and keeps the best
    /// checkpoint.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let plan = self.epoch_plan(epoch);
        if plan.slices.is_empty() {
            return Err(Error::InvalidArgument(format!("empty training list at epoch {epoch}")));
        }
        let lr = self.config.lr(epoch);
        let consumed: Vec<SliceSample> = plan.slices.into_iter().map(|p| p.sample).collect();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in consumed.chunks(self.config.batch_size) {
            loss_sum += self.step(epoch, lr, chunk)?;
            batches += 1;
        }
        self.last_consumed = consumed;
        let val_dice = self.validate()?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            s_dice: self.weights.s[0],
            s_lovasz: self.weights.s[1],
            s_bce: self.weights.s[2],
            val_dice,
        };
        self.history.records.push(record.clone());
        if self.best.as_ref().is_none_or(|b| val_dice > b.val_dice) {
            let ck = Checkpoint { model: self.model.clone(), loss_weights: self.weights, epoch, val_dice };
            if let Some(path) = &self.checkpoint_path {
                ck.save(path)?;
            }
            self.best = Some(ck);
        }
        Ok(record)
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: TrainHistory,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Full training run; `on_epoch` sees each record as it completes.
pub fn train(
    patients: &[PatientRecord],
    config: &TrainConfig,
    scheduler: &SchedulerConfig,
    model_config: &ModelConfig,
    checkpoint_path: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(patients, config, scheduler, model_config)?;
    if let Some(p) = checkpoint_path {
        trainer = trainer.with_checkpoint_path(p);
    }
    for epoch in 0..config.epochs {
        let rec = trainer.run_epoch(epoch)?;
        on_epoch(&rec);
    }
    let train_ids = trainer.train_patient_ids();
    let val_ids = trainer.val_patient_ids();
    let best = trainer.best.ok_or_else(|| Error::Config("training ran zero epochs".into()))?;
    Ok(TrainOutcome { best, history: trainer.history, train_ids, val_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn kfold_partition() {
        let folds = kfold_split(10, 5, 1).unwrap();
        let mut seen = HashSet::new();
        for f in &folds {
            assert_eq!(f.val.len(), 2);
            assert_eq!(f.train.len(), 8);
            for v in &f.val {
                assert!(seen.insert(*v));
                assert!(!f.train.contains(v));
            }
        }
        assert_eq!(seen.len(), 10);
        assert_eq!(kfold_split(10, 5, 1).unwrap(), folds);
        assert_ne!(kfold_split(10, 5, 2).unwrap(), folds);
        assert!(kfold_split(4, 5, 0).is_err());
        let sizes: Vec<usize> = kfold_split(12, 5, 0).unwrap().iter().map(|f| f.val.len()).collect();
        assert!(sizes.iter().all(|&s| s == 2 || s == 3));
        assert_eq!(sizes.iter().sum::<usize>(), 12);
    }

    #[test]
    fn schedule_defaults() {
        let c = TrainConfig::default();
        assert!((c.lr(0) - 1e-5).abs() < 1e-18);
        assert!((c.lr(100) - 1e-8).abs() < 1e-20);
        assert!(TrainConfig { lr_final: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { fold_index: 5, ..c }.validate().is_err());
    }

    #[test]
    fn slice_dice_thresholding() {
        assert_eq!(slice_dice(&[1.0, -1.0], &[1.0, 0.0], 0.5), 1.0);
        assert_eq!(slice_dice(&[-1.0, -1.0], &[0.0, 0.0], 0.5), 1.0);
        assert_eq!(slice_dice(&[-1.0, 1.0], &[1.0, 0.0], 0.5), 0.0);
    }
}
