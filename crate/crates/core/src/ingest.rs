//! Patient volumes, the on-disk volume format, SUV scaling and slice preprocessing.
//!
//! Volumes are stored as `(z, y, x)` grids with `z` the axial axis. A patient
//! directory holds `ct.vol`, `pet.vol`, `label.vol` and `meta.txt`.
//!
//! The `.vol` format is a short ASCII header terminated by an `end` line,
//! followed by the raw grid as little-endian `f32` in `z`-major order:
//!
//! ```text
//! PETSEG-VOL 1
//! modality PET
//! shape 96 64 64
//! spacing 4 4 4
//! suv_factor 1
//! dtype f32le
//! end
//! ```

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CT_WINDOW: (f32, f32) = (-1024.0, 1024.0);
pub const SUV_WINDOW: (f32, f32) = (0.0, 30.0);

const VOL_MAGIC: &str = "PETSEG-VOL";
const VOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// CT in Hounsfield units.
    Ct,
    /// PET, in SUV once loaded.
    Pet,
    Label,
}

impl Modality {
    fn tag(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Pet => "PET",
            Modality::Label => "LABEL",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "CT" => Some(Modality::Ct),
            "PET" => Some(Modality::Pet),
            "LABEL" => Some(Modality::Label),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A scalar grid indexed `(z, y, x)` with voxel spacing `(dz, dy, dx)` in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub data: Vec<f32>,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: Modality,
}

impl Volume3D {
    pub fn new(data: Vec<f32>, shape: [usize; 3], spacing: [f64; 3], modality: Modality) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "grid of {} values does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        check_spacing(spacing)?;
        Ok(Self { data, shape, spacing, modality })
    }

    pub fn filled(value: f32, shape: [usize; 3], spacing: [f64; 3], modality: Modality) -> Result<Self> {
        Self::new(vec![value; shape.iter().product()], shape, spacing, modality)
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn plane(&self, z: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Spacing(spacing))
    }
}

/// Reference to one axial slice of one patient.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceSample {
    pub patient_id: String,
    pub z: usize,
    pub has_lesion: bool,
}

/// One patient's co-registered CT, SUV and label volumes with the axial slice classification.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub ct: Volume3D,
    pub suv: Volume3D,
    pub label: Volume3D,
    pub lesion_slices: Vec<usize>,
    pub nonlesion_slices: Vec<usize>,
}

impl PatientRecord {
    /// Validates geometry and label values, then classifies every axial plane.
    pub fn new(patient_id: impl Into<String>, ct: Volume3D, suv: Volume3D, label: Volume3D) -> Result<Self> {
        for (name, v) in [("pet", &suv), ("label", &label)] {
            if v.shape != ct.shape {
                return Err(Error::Shape(format!("{name} shape {:?} differs from ct shape {:?}", v.shape, ct.shape)));
            }
            if v.spacing != ct.spacing {
                return Err(Error::Shape(format!(
                    "{name} spacing {:?} differs from ct spacing {:?}",
                    v.spacing, ct.spacing
                )));
            }
        }
        check_spacing(ct.spacing)?;
        if let Some((index, &value)) = label.data.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::NonBinaryLabel { index, value });
        }
        let (lesion_slices, nonlesion_slices) = classify_slices(&label);
        Ok(Self { patient_id: patient_id.into(), ct, suv, label, lesion_slices, nonlesion_slices })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.ct.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.ct.spacing
    }

    /// A patient is negative when no axial plane carries a lesion voxel.
    pub fn is_negative(&self) -> bool {
        self.lesion_slices.is_empty()
    }

    pub fn lesion_samples(&self) -> Vec<SliceSample> {
        self.lesion_slices.iter().map(|&z| self.sample(z, true)).collect()
    }

    pub fn nonlesion_samples(&self) -> Vec<SliceSample> {
        self.nonlesion_slices.iter().map(|&z| self.sample(z, false)).collect()
    }

    /// All axial slices in `z` order.
    pub fn slice_samples(&self) -> Vec<SliceSample> {
        let lesion: std::collections::HashSet<usize> = self.lesion_slices.iter().copied().collect();
        (0..self.shape()[0]).map(|z| self.sample(z, lesion.contains(&z))).collect()
    }

    fn sample(&self, z: usize, has_lesion: bool) -> SliceSample {
        SliceSample { patient_id: self.patient_id.clone(), z, has_lesion }
    }
}

/// Splits `0..Z` into planes that contain at least one label voxel equal to 1 and the rest.
pub fn classify_slices(label: &Volume3D) -> (Vec<usize>, Vec<usize>) {
    (0..label.shape[0]).partition(|&z| label.plane(z).contains(&1.0))
}

/// Multiplies a raw PET grid by its SUV conversion factor.
pub fn suv_scale(pet_raw: &[f32], factor: f64) -> Result<Vec<f32>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("SUV factor must be positive, got {factor}")));
    }
    Ok(pet_raw.iter().map(|&v| (v as f64 * factor) as f32).collect())
}

/// Writes a volume with its header. `suv_factor` is recorded verbatim; readers multiply by it.
pub fn write_volume(path: &Path, vol: &Volume3D, suv_factor: f64) -> Result<()> {
    let mut out = Vec::with_capacity(vol.data.len() * 4 + 128);
    let [z, y, x] = vol.shape;
    let [dz, dy, dx] = vol.spacing;
    write!(
        out,
        "{VOL_MAGIC} {VOL_VERSION}\nmodality {}\nshape {z} {y} {x}\nspacing {dz} {dy} {dx}\nsuv_factor {suv_factor}\ndtype f32le\nend\n",
        vol.modality
    )
    .expect("write to Vec");
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a volume and returns it together with the SUV factor stored in its header.
/// The grid is returned exactly as stored; no scaling is applied here.
pub fn read_volume(path: &Path) -> Result<(Volume3D, f64)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut modality = None;
    let mut shape = None;
    let mut spacing = None;
    let mut suv_factor = 1.0;
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad("header not terminated by `end`".into()));
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        if first {
            if key != VOL_MAGIC || rest.first().and_then(|v| v.parse::<u32>().ok()) != Some(VOL_VERSION) {
                return Err(bad(format!("unsupported header line {:?}", line.trim_end())));
            }
            first = false;
            continue;
        }
        match key {
            "end" => break,
            "modality" => {
                let tag = rest.first().copied().unwrap_or("");
                modality = Some(Modality::from_tag(tag).ok_or_else(|| bad(format!("unknown modality {tag:?}")))?);
            }
            "shape" => {
                let dims: Vec<usize> = rest
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(format!("bad shape value {v:?}"))))
                    .collect::<Result<_>>()?;
                let dims: [usize; 3] = dims.try_into().map_err(|_| bad("shape needs 3 values".into()))?;
                shape = Some(dims);
            }
            "spacing" => {
                let s: Vec<f64> = rest
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(format!("bad spacing value {v:?}"))))
                    .collect::<Result<_>>()?;
                spacing = Some(<[f64; 3]>::try_from(s).map_err(|_| bad("spacing needs 3 values".into()))?);
            }
            "suv_factor" => {
                suv_factor = rest
                    .first()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad suv_factor".into()))?;
            }
            "dtype" => {
                if rest.first() != Some(&"f32le") {
                    return Err(bad(format!("unsupported dtype {rest:?}")));
                }
            }
            "" => {}
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    let modality = modality.ok_or_else(|| bad("missing modality".into()))?;
    let shape = shape.ok_or_else(|| bad("missing shape".into()))?;
    let spacing = spacing.ok_or_else(|| bad("missing spacing".into()))?;

    let n: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(n * 4);
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", n * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Volume3D::new(data, shape, spacing, modality)?, suv_factor))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatientMeta {
    patient_id: String,
}

/// Loads `<dir>/{ct,pet,label}.vol` + `meta.txt`, converts PET to SUV and classifies slices.
pub fn load_patient(dir: &Path) -> Result<PatientRecord> {
    let meta_path = dir.join("meta.txt");
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PatientMeta = toml::from_str(&text)
        .map_err(|e| Error::Format { path: meta_path.clone(), reason: e.to_string() })?;

    let (ct, _) = read_volume(&dir.join("ct.vol"))?;
    let (pet_raw, factor) = read_volume(&dir.join("pet.vol"))?;
    let (label, _) = read_volume(&dir.join("label.vol"))?;
    let suv = Volume3D { data: suv_scale(&pet_raw.data, factor)?, ..pet_raw };
    PatientRecord::new(meta.patient_id, ct, suv, label)
}

/// Writes a patient directory readable by [`load_patient`]. PET is stored in SUV with factor 1.
pub fn write_patient(dir: &Path, patient: &PatientRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&dir.join("ct.vol"), &patient.ct, 1.0)?;
    write_volume(&dir.join("pet.vol"), &patient.suv, 1.0)?;
    write_volume(&dir.join("label.vol"), &patient.label, 1.0)?;
    let meta = toml::to_string(&PatientMeta { patient_id: patient.patient_id.clone() })
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
}

/// Loads every patient sub-directory (those containing `meta.txt`) under `root`, sorted by name.
pub fn load_patients(root: &Path) -> Result<Vec<PatientRecord>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_patient(d)).collect()
}

/// How one spatial axis maps between native geometry and the square network canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisWindow {
    pub src_start: usize,
    pub dst_start: usize,
    pub count: usize,
}

/// Center crop when `len >= out`, symmetric padding otherwise (odd remainder goes after).
pub fn axis_window(len: usize, out: usize) -> AxisWindow {
    if len >= out {
        AxisWindow { src_start: (len - out) / 2, dst_start: 0, count: out }
    } else {
        AxisWindow { src_start: 0, dst_start: (out - len) / 2, count: len }
    }
}

/// Crops/pads one `ny × nx` plane onto an `out × out` canvas filled with `fill`.
pub fn crop_plane(plane: &[f32], ny: usize, nx: usize, out: usize, fill: f32) -> Vec<f32> {
    let wy = axis_window(ny, out);
    let wx = axis_window(nx, out);
    let mut canvas = vec![fill; out * out];
    for i in 0..wy.count {
        let src = (wy.src_start + i) * nx + wx.src_start;
        let dst = (wy.dst_start + i) * out + wx.dst_start;
        canvas[dst..dst + wx.count].copy_from_slice(&plane[src..src + wx.count]);
    }
    canvas
}

/// Inverse of [`crop_plane`]: maps an `out × out` canvas back to `ny × nx`, filling
/// native pixels outside the crop window with `fill`.
pub fn uncrop_plane(canvas: &[f32], out: usize, ny: usize, nx: usize, fill: f32) -> Result<Vec<f32>> {
    if canvas.len() != out * out {
        return Err(Error::Shape(format!("canvas has {} values, expected {}", canvas.len(), out * out)));
    }
    let wy = axis_window(ny, out);
    let wx = axis_window(nx, out);
    let mut plane = vec![fill; ny * nx];
    for i in 0..wy.count {
        let dst = (wy.src_start + i) * nx + wx.src_start;
        let src = (wy.dst_start + i) * out + wx.dst_start;
        plane[dst..dst + wx.count].copy_from_slice(&canvas[src..src + wx.count]);
    }
    Ok(plane)
}

#[inline]
fn window_map(v: f32, (lo, hi): (f32, f32), fill: f32) -> f32 {
    
    if v.is_nan() { fill } else { v.clamp(lo, hi) }
}

/// Two-channel network input (CT, SUV) for one axial slice, channel-major `2 × out × out`.
///
/// CT is clipped to [-1024, 1024] HU and mapped to [-1, 1]; SUV is clipped to [0, 30]
/// and divided by 30. Padding uses -1024 HU and SUV 0 before normalization.
pub fn preprocess_slice(patient: &PatientRecord, z: usize, out_size: usize) -> Result<Vec<f32>> {
    if out_size == 0 {
        return Err(Error::InvalidArgument("out_size must be positive".into()));
    }
    let [nz, ny, nx] = patient.shape();
    if z >= nz {
        return Err(Error::InvalidArgument(format!("slice {z} out of range 0..{nz}")));
    }
    let ct: Vec<f32> = patient
        .ct
        .plane(z)
        .iter()
        .map(|&v| window_map(v, CT_WINDOW, CT_WINDOW.0) / CT_WINDOW.1)
        .collect();
    let suv: Vec<f32> = patient
        .suv
        .plane(z)
        .iter()
        .map(|&v| window_map(v, SUV_WINDOW, 0.0) / SUV_WINDOW.1)
        .collect();
    let mut image = crop_plane(&ct, ny, nx, out_size, -1.0);
    image.extend(crop_plane(&suv, ny, nx, out_size, 0.0));
    Ok(image)
}

/// Label plane `z` on the same canvas as [`preprocess_slice`], padded with 0.
pub fn preprocess_label(patient: &PatientRecord, z: usize, out_size: usize) -> Result<Vec<f32>> {
    let [nz, ny, nx] = patient.shape();
    if z >= nz {
        return Err(Error::InvalidArgument(format!("slice {z} out of range 0..{nz}")));
    }
    if out_size == 0 {
        return Err(Error::InvalidArgument("out_size must be positive".into()));
    }
    Ok(crop_plane(patient.label.plane(z), ny, nx, out_size, 0.0))
}
