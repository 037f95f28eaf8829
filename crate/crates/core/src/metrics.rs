//! Volumetric evaluation: Dice, false-positive volume and false-negative volume.
//!
//! A predicted 26-connected component that touches no ground-truth voxel counts in
//! full toward the false-positive volume; a ground-truth component untouched by the
//! prediction counts toward the false-negative volume. Volumes are reported in mL.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, Modality, PatientRecord, Volume3D};
use crate::losses::sigmoid;
use crate::model::SlicePredictor;
use crate::nn::Tensor;

/// A binary volume indexed `(z, y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask3 {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} voxels for mask shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Voxels with value 1 (labels) or above 0.5 (anything else).
    pub fn from_volume(v: &Volume3D) -> Self {
        Self { shape: v.shape, data: v.data.iter().map(|&x| x > 0.5).collect() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn same_shape(a: &Mask3, b: &Mask3) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, and 1 when both masks are empty.
pub fn dice_score(pred: &Mask3, gt: &Mask3) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Component labelling: `labels[i]` is 0 for background, else a component id in `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `sizes[k-1]` is the voxel count of component `k`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass union-find labelling with 26-connectivity. Component ids follow the
/// raster order of each component's first voxel.
pub fn connected_components(mask: &Mask3) -> Components {
    let [nz, ny, nx] = mask.shape;
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut provisional = vec![0u32; mask.data.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.data[idx(z, y, x)] {
                    continue;
                }
                let mut best = 0u32;
                // the 13 neighbours already visited in raster order
                for dz in -1i32..=0 {
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            if dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)) {
                                continue;
                            }
                            let (zz, yy, xx) = (z as i32 + dz, y as i32 + dy, x as i32 + dx);
                            if zz < 0 || yy < 0 || xx < 0 || yy >= ny as i32 || xx >= nx as i32 {
                                continue;
                            }
                            let l = provisional[idx(zz as usize, yy as usize, xx as usize)];
                            if l == 0 {
                                continue;
                            }
                            let r = find(&mut parent, l);
                            if best == 0 {
                                best = r;
                            } else if r != best {
                                let (lo, hi) = if r < best { (r, best) } else { (best, r) };
                                parent[hi as usize] = lo;
                                best = lo;
                            }
                        }
                    }
                }
                if best == 0 {
                    best = parent.len() as u32;
                    parent.push(best);
                }
                provisional[idx(z, y, x)] = best;
            }
        }
    }
    let mut compact = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; mask.data.len()];
    for i in 0..labels.len() {
        let l = provisional[i];
        if l == 0 {
            continue;
        }
        let r = find(&mut parent, l) as usize;
        if compact[r] == 0 {
            sizes.push(0);
            compact[r] = sizes.len() as u32;
        }
        labels[i] = compact[r];
        sizes[compact[r] as usize - 1] += 1;
    }
    Components { labels, sizes }
}

/// Voxels of `a`-components that share no voxel with `b`.
fn untouched_voxels(a: &Mask3, b: &Mask3) -> usize {
    let comps = connected_components(a);
    let mut touched = vec![false; comps.len()];
    for (l, &hit) in comps.labels.iter().zip(&b.data) {
        if *l != 0 && hit {
            touched[*l as usize - 1] = true;
        }
    }
    comps.sizes.iter().zip(&touched).filter(|(_, t)| !**t).map(|(s, _)| *s).sum()
}

fn voxel_ml(spacing: [f64; 3]) -> f64 {
    spacing.iter().product::<f64>() / 1000.0
}

/// Volume (mL) of predicted components with no ground-truth overlap.
pub fn false_positive_volume(pred: &Mask3, gt: &Mask3, spacing: [f64; 3]) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(untouched_voxels(pred, gt) as f64 * voxel_ml(spacing))
}

/// Volume (mL) of ground-truth components with no predicted overlap.
pub fn false_negative_volume(pred: &Mask3, gt: &Mask3, spacing: [f64; 3]) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(untouched_voxels(gt, pred) as f64 * voxel_ml(spacing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub patient_id: String,
    pub dice: f64,
    pub fpv_ml: f64,
    pub fnv_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub patients: usize,
    pub mean_dice: f64,
    pub mean_fpv_ml: f64,
    pub mean_fnv_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        let n = self.rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        EvalSummary {
            patients: self.rows.len(),
            mean_dice: mean(|r| r.dice),
            mean_fpv_ml: mean(|r| r.fpv_ml),
            mean_fnv_ml: mean(|r| r.fnv_ml),
        }
    }

    /// Per-patient CSV: `patient_id,dice,fpv_ml,fnv_ml`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Aggregate summary as TOML.
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&self.summary()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Scores a predicted label volume against the patient's ground truth.
pub fn score_prediction(pred: &Volume3D, patient: &PatientRecord) -> Result<EvalRow> {
    if pred.shape != patient.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} differs from patient shape {:?}",
            pred.shape,
            patient.shape()
        )));
    }
    let p = Mask3::from_volume(pred);
    let g = Mask3::from_volume(&patient.label);
    let sp = patient.spacing();
    Ok(EvalRow {
        patient_id: patient.patient_id.clone(),
        dice: dice_score(&p, &g)?,
        fpv_ml: false_positive_volume(&p, &g, sp)?,
        fnv_ml: false_negative_volume(&p, &g, sp)?,
    })
}

/// Slice-by-slice inference restacked into a native-geometry label volume.
/// Slices are fed in `z` order, `batch_size` at a time.
pub fn predict_volume<P: SlicePredictor + ?Sized>(
    model: &P,
    patient: &PatientRecord,
    out_size: usize,
    threshold: f64,
    batch_size: usize,
) -> Result<Volume3D> {
    let [nz, ny, nx] = patient.shape();
    let mut data = Vec::with_capacity(nz * ny * nx);
    let zs: Vec<usize> = (0..nz).collect();
    for chunk in zs.chunks(batch_size.max(1)) {
        let images = chunk.iter().map(|&z| ingest::preprocess_slice(patient, z, out_size)).collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&images, 2, out_size, out_size)?;
        let logits = model.predict_logits(&batch)?;
        if logits.shape != [chunk.len(), 1, out_size, out_size] {
            return Err(Error::Shape(format!("predictor returned shape {:?}", logits.shape)));
        }
        for b in 0..chunk.len() {
            let canvas: Vec<f32> = logits
                .image(b)
                .iter()
                .map(|&f| if sigmoid(f as f64) > threshold { 1.0 } else { 0.0 })
                .collect();
            data.extend(ingest::uncrop_plane(&canvas, out_size, ny, nx, 0.0)?);
        }
    }
    Volume3D::new(data, [nz, ny, nx], patient.spacing(), Modality::Label)
}

/// Full-volume Dice, FPV and FNV for one patient.
pub fn evaluate_patient<P: SlicePredictor + ?Sized>(
    model: &P,
    patient: &PatientRecord,
    out_size: usize,
    threshold: f64,
) -> Result<EvalRow> {
    let pred = predict_volume(model, patient, out_size, threshold, 8)?;
    score_prediction(&pred, patient)
}
