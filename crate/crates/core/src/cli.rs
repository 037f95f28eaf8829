//! Command-line entry points. Each `cmd_*` function backs one subcommand and can
//! also be called directly.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, Modality, PatientRecord};
use crate::metrics::{self, EvalReport};
use crate::phantom;
use crate::sampler::{build_cycle_plan, dump_cycle_plan, dump_epoch_plan, epoch_training_list};
use crate::trainer::{self, split_patients};

pub const INDEX_FILE: &str = "index.csv";
pub const PLAN_FILE: &str = "plan.txt";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SPLIT_FILE: &str = "split.toml";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const PREDICTION_FILE: &str = "pred.vol";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.toml";

#[derive(Debug, Parser)]
#[command(name = "petseg", version, about = "Whole-body PET/CT lesion segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; they override values from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cross-validation fold used for training.
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    /// Lesion : whole-body slice ratio (`inf` for lesion-only).
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Epochs per whole-body batch.
    #[arg(long, global = true)]
    pub beta: Option<usize>,
    /// Output directory (or file, for `index`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        negatives: Option<usize>,
    },
    /// Write the slice index of all non-negative patients.
    Index {
        #[arg(long)]
        data: PathBuf,
    },
    /// Dump the sampler's cycle plan and the first epoch lists.
    Plan {
        #[arg(long)]
        data: PathBuf,
        /// Number of epoch lists to dump.
        #[arg(long, default_value_t = 1)]
        epochs: usize,
    },
    /// Train on one fold and keep the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict label volumes for every patient in a dataset.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score predicted volumes against ground truth.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
}

impl Common {
    /// Loads `--config` (or the defaults) and applies the flag overrides.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(f) = self.fold {
            cfg.train.fold_index = f;
        }
        if let Some(a) = self.alpha {
            cfg.scheduler.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.scheduler.beta = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut cfg = common.run_config()?;
    match cli.command {
        Command::Synth { patients, negatives } => {
            if let Some(n) = patients {
                cfg.phantom.n_patients = n;
            }
            if let Some(n) = negatives {
                cfg.phantom.n_negative = n;
            }
            cmd_synth(&cfg, &common.out("data"))
        }
        Command::Index { data } => cmd_index(&data, &common.out(INDEX_FILE)),
        Command::Plan { data, epochs } => cmd_plan(&cfg, &data, &common.out("plan"), epochs),
        Command::Train { data, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cmd_train(&cfg, &data, &common.out("run"))
        }
        Command::Predict { data, checkpoint } => cmd_predict(&cfg, &data, &checkpoint, &common.out("predictions")),
        Command::Evaluate { data, predictions } => cmd_evaluate(&data, &predictions, &common.out("eval")),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = phantom::generate_dataset(out, &cfg.phantom)?;
    let lesions: usize = manifest.patients.iter().map(|p| p.n_lesions).sum();
    println!("wrote {} patients ({} lesions) to {}", manifest.patients.len(), lesions, out.display());
    Ok(())
}

/// CSV `patient_id,z,has_lesion` over every slice of every non-negative patient.
pub fn cmd_index(data: &Path, out: &Path) -> Result<()> {
    let patients = ingest::load_patients(data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    let (mut kept, mut rows) = (0, 0);
    for p in patients.iter().filter(|p| !p.is_negative()) {
        kept += 1;
        for s in p.slice_samples() {
            w.serialize(&s)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    println!("indexed {rows} slices from {kept} patients ({} negative excluded)", patients.len() - kept);
    Ok(())
}

/// Writes `plan.txt` for the training part of the configured fold and
/// `epoch_<e>.txt` for the first `epochs` epochs.
pub fn cmd_plan(cfg: &RunConfig, data: &Path, out: &Path, epochs: usize) -> Result<()> {
    let patients = ingest::load_patients(data)?;
    let (train, _) = split_patients(&patients, &cfg.train)?;
    let train: Vec<PatientRecord> = train.into_iter().cloned().collect();
    let plan = build_cycle_plan(&train, &cfg.scheduler)?;
    create_dir(out)?;
    write_text(&out.join(PLAN_FILE), &dump_cycle_plan(&plan, &cfg.scheduler))?;
    for e in 0..epochs {
        let ep = epoch_training_list(&plan, e, &cfg.scheduler);
        write_text(&out.join(format!("epoch_{e}.txt")), &dump_epoch_plan(&ep))?;
    }
    println!(
        "{} lesion slices, {} whole-body batches of target {}{}",
        plan.lesion_base.len(),
        plan.batches.len(),
        plan.target_wb_count,
        if plan.degenerate { " (lesion-only)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    fold: usize,
    train: &'a [String],
    val: &'a [String],
}

/// Writes `best.ckpt`, `history.csv`, `split.toml` and the effective `run_config.toml`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let patients = ingest::load_patients(data)?;
    create_dir(out)?;
    cfg.save(&out.join(RUN_CONFIG_FILE))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let outcome = trainer::train(&patients, &cfg.train, &cfg.scheduler, &cfg.model, Some(&ckpt), &mut |r| {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  s [{:+.3} {:+.3} {:+.3}]  val dice {:.4}",
            r.epoch, r.lr, r.train_loss, r.s_dice, r.s_lovasz, r.s_bce, r.val_dice
        );
    })?;
    outcome.history.write_csv(&out.join(HISTORY_FILE))?;
    let split = SplitRecord { fold: cfg.train.fold_index, train: &outcome.train_ids, val: &outcome.val_ids };
    write_text(&out.join(SPLIT_FILE), &toml::to_string(&split).map_err(|e| Error::Config(e.to_string()))?)?;
    println!("best val dice {:.4} at epoch {}", outcome.best.val_dice, outcome.best.epoch);
    Ok(())
}

/// Writes `<out>/<patient_id>/pred.vol` for every patient under `data`.
pub fn cmd_predict(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let patients = ingest::load_patients(data)?;
    for p in &patients {
        let pred = metrics::predict_volume(&ck.model, p, cfg.train.out_size, cfg.train.threshold, cfg.train.batch_size)?;
        let dir = out.join(&p.patient_id);
        create_dir(&dir)?;
        ingest::write_volume(&dir.join(PREDICTION_FILE), &pred, 1.0)?;
    }
    println!("wrote predictions for {} patients to {}", patients.len(), out.display());
    Ok(())
}

/// Scores every patient that has a prediction; writes `eval.csv` and `summary.toml`.
pub fn cmd_evaluate(data: &Path, predictions: &Path, out: &Path) -> Result<()> {
    let patients = ingest::load_patients(data)?;
    let mut report = EvalReport::default();
    for p in &patients {
        let path = predictions.join(&p.patient_id).join(PREDICTION_FILE);
        if !path.exists() {
            continue;
        }
        let (pred, _) = ingest::read_volume(&path)?;
        if pred.modality != Modality::Label {
            return Err(Error::Format { path, reason: "prediction is not a label volume".into() });
        }
        report.rows.push(metrics::score_prediction(&pred, p)?);
    }
    if report.rows.is_empty() {
        return Err(Error::MissingFile(predictions.join(format!("<patient>/{PREDICTION_FILE}"))));
    }
    create_dir(out)?;
    report.write_csv(&out.join(EVAL_FILE))?;
    report.write_summary(&out.join(SUMMARY_FILE))?;
    let s = report.summary();
    println!(
        "{} patients: dice {:.4}  fpv {:.4} mL  fnv {:.4} mL",
        s.patients, s.mean_dice, s.mean_fpv_ml, s.mean_fnv_ml
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["petseg", "plan", "--data", "d", "--alpha", "inf", "--beta", "3", "--seed", "7"])
            .unwrap();
        let cfg = cli.common.run_config().unwrap();
        assert!(cfg.scheduler.alpha.is_infinite());
        assert_eq!(cfg.scheduler.beta, 3);
        assert_eq!(cfg.train.seed, 7);
        assert!(matches!(cli.command, Command::Plan { epochs: 1, .. }));
    }

    #[test]
    fn invalid_override_is_rejected() {
        let cli = Cli::try_parse_from(["petseg", "index", "--data", "d", "--fold", "9"]).unwrap();
        assert!(cli.common.run_config().is_err());
    }
}
