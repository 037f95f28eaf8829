//! Synthetic whole-body PET/CT phantoms with known lesions.
//!
//! Each phantom is an ellipsoidal body in air with two hot but unlabeled organs
//! (a skull-capped brain near the top, a bladder near the bottom) and a set of
//! spherical lesions. Only lesion voxels are labeled.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, Modality, PatientRecord, Volume3D};
use crate::rng::{derived_rng, Stream};

const MAX_PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Grid `(Z, Y, X)`.
    pub grid: [usize; 3],
    /// Voxel spacing `(dz, dy, dx)` in mm.
    pub spacing: [f64; 3],
    pub n_lesions: usize,
    pub lesion_suv: (f64, f64),
    pub lesion_radius_mm: (f64, f64),
    pub brain_suv: f64,
    pub bladder_suv: f64,
    pub body_ct: f64,
    pub air_ct: f64,
    pub skull_ct: f64,
    pub background_suv: f64,
    /// Standard deviation of the multiplicative SUV noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [96, 64, 64],
            spacing: [4.0, 4.0, 4.0],
            n_lesions: 3,
            lesion_suv: (4.0, 10.0),
            lesion_radius_mm: (4.0, 15.0),
            brain_suv: 8.0,
            bladder_suv: 12.0,
            body_ct: 40.0,
            air_ct: -1000.0,
            skull_ct: 800.0,
            background_suv: 1.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrganKind {
    Brain,
    Bladder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedSphere {
    /// Center in mm, `(z, y, x)`, measured from the grid corner.
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub suv: f64,
    pub voxel_count: usize,
    /// First and last axial plane containing a voxel of the sphere.
    pub z_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedOrgan {
    pub kind: OrganKind,
    pub sphere: PlacedSphere,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub patient: PatientRecord,
    pub lesions: Vec<PlacedSphere>,
    pub organs: Vec<PlacedOrgan>,
}

struct Geometry {
    grid: [usize; 3],
    spacing: [f64; 3],
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Geometry {
    fn new(spec: &PhantomSpec) -> Self {
        let ext: Vec<f64> = (0..3).map(|a| spec.grid[a] as f64 * spec.spacing[a]).collect();
        Self {
            grid: spec.grid,
            spacing: spec.spacing,
            center: [ext[0] / 2.0, ext[1] / 2.0, ext[2] / 2.0],
            semi_axes: [0.55 * ext[0], 0.38 * ext[1], 0.45 * ext[2]],
        }
    }

    fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (idx[a] as f64 + 0.5) * self.spacing[a])
    }

    fn in_body(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Voxel indices whose centers fall inside the sphere.
    fn sphere_voxels(&self, center: [f64; 3], radius: f64) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        let lo: Vec<usize> = (0..3)
            .map(|a| (((center[a] - radius) / self.spacing[a]).floor().max(0.0)) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((((center[a] + radius) / self.spacing[a]).ceil()) as usize).min(self.grid[a]))
            .collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    let p = self.voxel_center([z, y, x]);
                    let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                    if d2 <= radius * radius {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }

    fn linear(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.grid[1] + y) * self.grid[2] + x
    }

    fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn placed(geom: &Geometry, center: [f64; 3], radius: f64, suv: f64) -> (PlacedSphere, Vec<[usize; 3]>) {
    let voxels = geom.sphere_voxels(center, radius);
    let zmin = voxels.iter().map(|v| v[0]).min().unwrap_or(0);
    let zmax = voxels.iter().map(|v| v[0]).max().unwrap_or(0);
    (
        PlacedSphere { center_mm: center, radius_mm: radius, suv, voxel_count: voxels.len(), z_range: (zmin, zmax) },
        voxels,
    )
}

fn validate_spec(spec: &PhantomSpec) -> Result<()> {
    if spec.grid.iter().any(|&n| n < 8) {
        return Err(Error::InvalidArgument(format!("phantom grid {:?} too small (min 8 per axis)", spec.grid)));
    }
    if spec.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Spacing(spec.spacing));
    }
    let (r0, r1) = spec.lesion_radius_mm;
    let (s0, s1) = spec.lesion_suv;
    if !(r0 > 0.0 && r0 <= r1) || !(s0 > 0.0 && s0 <= s1) {
        return Err(Error::InvalidArgument("lesion radius and SUV ranges must be positive and ordered".into()));
    }
    Ok(())
}

/// Generates one phantom patient. Deterministic in `spec.seed`.
pub fn generate_patient(spec: &PhantomSpec, patient_id: &str) -> Result<Phantom> {
    validate_spec(spec)?;
    let geom = Geometry::new(spec);
    let mut rng = derived_rng(spec.seed, Stream::Phantom, 0);
    let n: usize = spec.grid.iter().product();

    let min_semi = geom.semi_axes[1].min(geom.semi_axes[2]);
    let mut organs = Vec::new();
    let brain_r = 0.22 * min_semi;
    let brain_c = [0.14 * spec.grid[0] as f64 * spec.spacing[0], geom.center[1], geom.center[2]];
    let bladder_r = 0.18 * min_semi;
    let bladder_c = [0.86 * spec.grid[0] as f64 * spec.spacing[0], geom.center[1] + 0.2 * min_semi, geom.center[2]];
    let skull_thickness = 1.5 * geom.max_spacing();

    let (brain, brain_vox) = placed(&geom, brain_c, brain_r, spec.brain_suv);
    let (bladder, bladder_vox) = placed(&geom, bladder_c, bladder_r, spec.bladder_suv);
    let skull_vox: Vec<[usize; 3]> = geom
        .sphere_voxels(brain_c, brain_r + skull_thickness)
        .into_iter()
        .filter(|v| distance(geom.voxel_center(*v), brain_c) > brain_r)
        .collect();
    organs.push(PlacedOrgan { kind: OrganKind::Brain, sphere: brain });
    organs.push(PlacedOrgan { kind: OrganKind::Bladder, sphere: bladder });

    // Lesion placement: fully inside the body, clear of organs (including the skull) and
    // of each other by two voxels so each lesion stays its own 26-connected component.
    let margin = 2.0 * geom.max_spacing();
    let mut lesions: Vec<(PlacedSphere, Vec<[usize; 3]>)> = Vec::new();
    for li in 0..spec.n_lesions {
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let radius = rng.random_range(spec.lesion_radius_mm.0..=spec.lesion_radius_mm.1);
            let suv = rng.random_range(spec.lesion_suv.0..=spec.lesion_suv.1);
            let center = [0, 1, 2].map(|a| {
                let lo = geom.center[a] - geom.semi_axes[a];
                let hi = geom.center[a] + geom.semi_axes[a];
                rng.random_range(lo..hi)
            });
            let clear_of_organs = organs.iter().all(|o| {
                let extra = if o.kind == OrganKind::Brain { skull_thickness } else { 0.0 };
                distance(center, o.sphere.center_mm) > radius + o.sphere.radius_mm + extra + margin
            });
            let clear_of_lesions =
                lesions.iter().all(|(l, _)| distance(center, l.center_mm) > radius + l.radius_mm + margin);
            if !clear_of_organs || !clear_of_lesions {
                continue;
            }
            // Every point of the sphere inside the body: test the sphere's voxels and its 6 poles.
            let poles_inside = (0..3).all(|a| {
                [-1.0, 1.0].iter().all(|s| {
                    let mut p = center;
                    p[a] += s * radius;
                    geom.in_body(p)
                })
            });
            let (sphere, voxels) = placed(&geom, center, radius, suv);
            if poles_inside && !voxels.is_empty() && voxels.iter().all(|v| geom.in_body(geom.voxel_center(*v))) {
                ok = Some((sphere, voxels));
                break;
            }
        }
        match ok {
            Some(l) => lesions.push(l),
            None => {
                return Err(Error::Placement(format!(
                    "could not place lesion {} of {} after {MAX_PLACEMENT_TRIES} tries",
                    li + 1,
                    spec.n_lesions
                )))
            }
        }
    }

    let mut ct = vec![spec.air_ct as f32; n];
    let mut suv = vec![0.0f32; n];
    let mut label = vec![0.0f32; n];
    let mut lesion_floor = vec![0.0f32; n];
    for z in 0..spec.grid[0] {
        for y in 0..spec.grid[1] {
            for x in 0..spec.grid[2] {
                if geom.in_body(geom.voxel_center([z, y, x])) {
                    let i = geom.linear([z, y, x]);
                    ct[i] = spec.body_ct as f32;
                    suv[i] = spec.background_suv as f32;
                }
            }
        }
    }
    for v in &skull_vox {
        let i = geom.linear(*v);
        ct[i] = spec.skull_ct as f32;
        suv[i] = (0.5 * spec.background_suv) as f32;
    }
    for v in &brain_vox {
        suv[geom.linear(*v)] = spec.brain_suv as f32;
    }
    for v in &bladder_vox {
        let i = geom.linear(*v);
        suv[i] = spec.bladder_suv as f32;
        ct[i] = 10.0;
    }
    for (l, voxels) in &lesions {
        for v in voxels {
            let i = geom.linear(*v);
            suv[i] = l.suv as f32;
            label[i] = 1.0;
            lesion_floor[i] = spec.lesion_suv.0 as f32;
        }
    }
    // Multiplicative uptake noise; lesion voxels never drop below the lesion SUV floor.
    for i in 0..n {
        if suv[i] > 0.0 {
            let xi: f64 = rng.sample(StandardNormal);
            let noisy = (suv[i] as f64 * (1.0 + spec.noise_sigma * xi)).max(0.0) as f32;
            suv[i] = noisy.max(lesion_floor[i]);
        }
    }

    let sp = spec.spacing;
    let record = PatientRecord::new(
        patient_id,
        Volume3D::new(ct, spec.grid, sp, Modality::Ct)?,
        Volume3D::new(suv, spec.grid, sp, Modality::Pet)?,
        Volume3D::new(label, spec.grid, sp, Modality::Label)?,
    )?;
    Ok(Phantom { patient: record, lesions: lesions.into_iter().map(|(l, _)| l).collect(), organs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_patients: usize,
    /// The last `n_negative` patients are generated without lesions.
    #[serde(default)]
    pub n_negative: usize,
    #[serde(default)]
    pub template: PhantomSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub seed: u64,
    pub n_lesions: usize,
    pub lesion_voxels: usize,
    pub lesion_volume_ml: f64,
    pub lesion_slices: Vec<usize>,
    pub lesions: Vec<PlacedSphere>,
    pub organs: Vec<PlacedOrgan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub patients: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn patient_id(i: usize) -> String {
    format!("p{i:03}")
}

/// Spec for patient `i` of a dataset: the template with a per-patient seed and lesion count.
pub fn patient_spec(ds: &DatasetSpec, i: usize) -> PhantomSpec {
    let seed = derived_rng(ds.seed, Stream::Phantom, i as u64 + 1).next_u64();
    let n_lesions = if i + ds.n_negative >= ds.n_patients { 0 } else { ds.template.n_lesions };
    PhantomSpec { seed, n_lesions, ..ds.template.clone() }
}

/// Generates phantoms in memory (no disk IO).
pub fn generate_phantoms(ds: &DatasetSpec) -> Result<Vec<Phantom>> {
    (0..ds.n_patients).map(|i| generate_patient(&patient_spec(ds, i), &patient_id(i))).collect()
}

/// Writes `<root>/<patient_id>/...` for every phantom plus `<root>/manifest.toml`.
pub fn generate_dataset(root: &Path, ds: &DatasetSpec) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(ds.n_patients);
    for i in 0..ds.n_patients {
        let spec = patient_spec(ds, i);
        let ph = generate_patient(&spec, &patient_id(i))?;
        ingest::write_patient(&root.join(&ph.patient.patient_id), &ph.patient)?;
        let voxels: usize = ph.lesions.iter().map(|l| l.voxel_count).sum();
        entries.push(ManifestEntry {
            patient_id: ph.patient.patient_id.clone(),
            seed: spec.seed,
            n_lesions: ph.lesions.len(),
            lesion_voxels: voxels,
            lesion_volume_ml: voxels as f64 * ph.patient.label.voxel_volume_mm3() / 1000.0,
            lesion_slices: ph.patient.lesion_slices.clone(),
            lesions: ph.lesions,
            organs: ph.organs,
        });
    }
    let manifest = Manifest { seed: ds.seed, patients: entries };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format { path, reason: e.to_string() })
}
