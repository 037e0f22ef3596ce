//! Volume I/O: a minimal NIfTI-1 subset, JSON acquisition metadata, and
//! isotropic resampling.
//!
//! Voxel data is stored x-fastest (`data[x + nx*(y + ny*z)]`) as 32-bit
//! floats. Readers accept little-endian single-file NIfTI-1 with datatypes
//! uint8, int16 and float32, optionally gzip-compressed; `scl_slope = 0` is
//! treated as 1 and `scl_inter` is always added. Writers always emit plain
//! float32 with slope 1 / intercept 0, so write-read round-trips are
//! bit-exact. qform/sform orientation fields are carried through unmodified
//! and never applied to the data.

mod nifti;

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
pub use nifti::Orientation;

/// A 3-D scalar volume with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
    pub orient: Orientation,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(CoreError::shape(format!(
                "volume data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            orient: Orientation::default(),
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
            orient: Orientation::default(),
        }
    }

    /// A new volume on the same grid with the given data.
    pub fn like(&self, data: Vec<f32>) -> Result<Self> {
        let mut v = Volume::new(self.dims, self.spacing, data)?;
        v.orient = self.orient.clone();
        Ok(v)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        if !self.same_grid(other) {
            return Err(CoreError::shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Integer label volume: 0 = background, positive values are region labels
/// (for lesion maps, label k is the k-th lesion; for brain masks any
/// positive value is inside).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u16>,
    pub orient: Orientation,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u16>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(CoreError::shape(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            data,
            orient: Orientation::default(),
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Iterator over voxel indices with label > 0.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v > 0).map(|(i, _)| i)
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn ensure_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(CoreError::shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Acquisition metadata stored as a JSON sidecar (`meta.json`).
///
/// `dose` is the administered fraction of the standard dose, `field_strength`
/// is in tesla and `relaxivity` in L/(mmol·s). Optional fields are filled in
/// by pipeline stages (noise estimates, normalization scalars, logistic
/// parameters).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionMeta {
    pub dose: f64,
    pub field_strength: f64,
    pub relaxivity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_ld: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q95_pc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q95_ld: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q95_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_ld: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logistic_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logistic_b: Option<f64>,
}

impl AcquisitionMeta {
    pub fn new(dose: f64, field_strength: f64, relaxivity: f64) -> Self {
        AcquisitionMeta {
            dose,
            field_strength,
            relaxivity,
            noise_level: None,
            sigma_ld: None,
            sigma_sd: None,
            q95_pc: None,
            q95_ld: None,
            q95_sd: None,
            alpha_ld: None,
            alpha_sd: None,
            logistic_w: None,
            logistic_b: None,
        }
    }

    /// Hard validation plus advisory warnings (non-standard field strength).
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.dose > 0.0 && self.dose <= 1.0) {
            return Err(CoreError::validation(format!(
                "dose must be in (0, 1], got {}",
                self.dose
            )));
        }
        if !(self.relaxivity > 0.0) {
            return Err(CoreError::validation(format!(
                "relaxivity must be positive, got {}",
                self.relaxivity
            )));
        }
        if let Some(n) = self.noise_level {
            if !(n > 0.0) {
                return Err(CoreError::validation(format!(
                    "noise_level must be positive, got {n}"
                )));
            }
        }
        let mut warnings = Vec::new();
        let standard = [1.5, 3.0, 7.0];
        if !standard.iter().any(|&b| (self.field_strength - b).abs() < 1e-9) {
            warnings.push(format!(
                "field_strength {} T is outside the standard set {{1.5, 3, 7}}",
                self.field_strength
            ));
        }
        Ok(warnings)
    }

    /// Condition vector (dose, field strength, relaxivity, noise level).
    /// `sigma` overrides the stored `sigma_ld` when provided.
    pub fn condition(&self, sigma: Option<f64>) -> Result<[f64; 4]> {
        let s = sigma.or(self.sigma_ld).ok_or_else(|| {
            CoreError::validation("condition vector requires sigma_ld (run preprocessing first)")
        })?;
        Ok([self.dose, self.field_strength, self.relaxivity, s])
    }
}

pub fn read_meta(path: &Path) -> Result<AcquisitionMeta> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let meta: AcquisitionMeta = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(path.display().to_string(), format!("invalid meta JSON: {e}")))?;
    meta.validate()?;
    Ok(meta)
}

pub fn write_meta(path: &Path, meta: &AcquisitionMeta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta)
        .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_raw(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| CoreError::format(path.display().to_string(), format!("gzip error: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads a single-file NIfTI-1 volume (optionally gzipped), applying
/// `scl_slope`/`scl_inter` scaling to the supported integer datatypes.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let label = path.display().to_string();
    let buf = read_raw(path)?;
    let hdr = nifti::decode_header(&buf, &label)?;
    let n = hdr.dims[0] * hdr.dims[1] * hdr.dims[2];
    let bpv = nifti::bytes_per_voxel(hdr.datatype).expect("validated datatype");
    let need = hdr.vox_offset + n * bpv;
    if buf.len() < need {
        return Err(CoreError::format(
            &label,
            format!("truncated data section: expected {need} bytes, found {}", buf.len()),
        ));
    }
    let slope = if hdr.scl_slope.is_finite() && hdr.scl_slope != 0.0 {
        hdr.scl_slope
    } else {
        1.0
    };
    let inter = if hdr.scl_inter.is_finite() { hdr.scl_inter } else { 0.0 };
    let raw = &buf[hdr.vox_offset..need];
    let data: Vec<f32> = match hdr.datatype {
        nifti::DT_FLOAT32 => {
            let mut v = Vec::with_capacity(n);
            for c in raw.chunks_exact(4) {
                let x = f32::from_le_bytes(c.try_into().unwrap());
                v.push(if slope == 1.0 && inter == 0.0 { x } else { slope * x + inter });
            }
            v
        }
        nifti::DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| slope * i16::from_le_bytes(c.try_into().unwrap()) as f32 + inter)
            .collect(),
        nifti::DT_UINT8 => raw.iter().map(|&b| slope * b as f32 + inter).collect(),
        _ => unreachable!(),
    };
    let mut vol = Volume::new(hdr.dims, hdr.spacing, data)?;
    vol.orient = hdr.orient;
    Ok(vol)
}

fn write_raw(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().map(|e| e == "gz").unwrap_or(false);
    if gz {
        use std::io::Write;
        let file = fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)
            .and_then(|_| enc.finish().map(|_| ()))
            .map_err(|e| CoreError::io(path.display().to_string(), e))
    } else {
        fs::write(path, bytes).map_err(|e| CoreError::io(path.display().to_string(), e))
    }
}

fn assemble(header: Vec<u8>, data_bytes: Vec<u8>) -> Vec<u8> {
    let mut out = header;
    // extension flag: no extensions
    out.extend_from_slice(&[0, 0, 0, 0]);
    out.extend_from_slice(&data_bytes);
    out
}

/// Writes a volume as single-file float32 NIfTI-1 (gzipped when the path ends
/// in `.gz`). Values round-trip bit-exactly through `read_volume`.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let header = nifti::encode_header(vol.dims, vol.spacing, nifti::DT_FLOAT32, &vol.orient);
    let mut data = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        data.extend_from_slice(&v.to_le_bytes());
    }
    write_raw(path, &assemble(header, data))
}

/// Reads a label volume; voxel values must be non-negative integers.
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let vol = read_volume(path)?;
    let mut data = Vec::with_capacity(vol.data.len());
    for (i, &v) in vol.data.iter().enumerate() {
        let r = v.round();
        if !v.is_finite() || (v - r).abs() > 1e-3 || !(0.0..=65535.0).contains(&r) {
            return Err(CoreError::format(
                path.display().to_string(),
                format!("label volume has non-integer value {v} at linear index {i}"),
            ));
        }
        data.push(r as u16);
    }
    let mut lv = LabelVolume::new(vol.dims, vol.spacing, data)?;
    lv.orient = vol.orient;
    Ok(lv)
}

/// Writes labels as uint8 when they fit, otherwise int16.
pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let max = labels.max_label();
    if max <= u8::MAX as u16 {
        let header = nifti::encode_header(labels.dims, labels.spacing, nifti::DT_UINT8, &labels.orient);
        let data: Vec<u8> = labels.data.iter().map(|&v| v as u8).collect();
        write_raw(path, &assemble(header, data))
    } else if max <= i16::MAX as u16 {
        let header = nifti::encode_header(labels.dims, labels.spacing, nifti::DT_INT16, &labels.orient);
        let mut data = Vec::with_capacity(labels.data.len() * 2);
        for &v in &labels.data {
            data.extend_from_slice(&(v as i16).to_le_bytes());
        }
        write_raw(path, &assemble(header, data))
    } else {
        Err(CoreError::validation(format!(
            "label value {max} exceeds the int16 range"
        )))
    }
}

/// Result of [`resample_isotropic`]; `warning` is set when the target spacing
/// is more than 4x coarser than the coarsest input axis.
#[derive(Debug, Clone)]
pub struct Resampled {
    pub volume: Volume,
    pub warning: Option<String>,
}

/// Trilinear resampling onto an isotropic grid with `target` spacing.
///
/// Voxel centers are aligned: output center `(o + 0.5) * target` maps to
/// input coordinate `(o + 0.5) * target / spacing - 0.5`, clamped to the
/// edge. When `target` equals the input spacing on every axis the output is
/// an exact copy.
pub fn resample_isotropic(vol: &Volume, target: f32) -> Result<Resampled> {
    if !(target.is_finite() && target > 0.0) {
        return Err(CoreError::validation(format!(
            "target spacing must be positive, got {target}"
        )));
    }
    let [nx, ny, nz] = vol.dims;
    let mut out_dims = [0usize; 3];
    for i in 0..3 {
        let extent = vol.dims[i] as f64 * vol.spacing[i] as f64;
        out_dims[i] = ((extent / target as f64).round() as usize).max(1);
    }
    let coarsest = vol.spacing.iter().cloned().fold(f32::MIN, f32::max);
    let warning = if target > 4.0 * coarsest {
        Some(format!(
            "target spacing {target} is more than 4x the coarsest input spacing {coarsest}; \
             output will be heavily undersampled"
        ))
    } else {
        None
    };

    // Per-axis source index and interpolation weight.
    let prep = |n_out: usize, n_in: usize, sp: f32| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let u = ((o as f64 + 0.5) * target as f64 / sp as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (u - i0 as f64) as f32)
            })
            .collect()
    };
    let wx = prep(out_dims[0], nx, vol.spacing[0]);
    let wy = prep(out_dims[1], ny, vol.spacing[1]);
    let wz = prep(out_dims[2], nz, vol.spacing[2]);

    let mut data = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for &(z0, z1, fz) in &wz {
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let c00 = vol.at(x0, y0, z0) * (1.0 - fx) + vol.at(x1, y0, z0) * fx;
                let c10 = vol.at(x0, y1, z0) * (1.0 - fx) + vol.at(x1, y1, z0) * fx;
                let c01 = vol.at(x0, y0, z1) * (1.0 - fx) + vol.at(x1, y0, z1) * fx;
                let c11 = vol.at(x0, y1, z1) * (1.0 - fx) + vol.at(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                data.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    let mut out = Volume::new(out_dims, [target; 3], data)?;
    out.orient = vol.orient.clone();
    Ok(Resampled { volume: out, warning })
}
