//! Inference and evaluation: denormalization of network output, synthesis of
//! contrast-enhanced images, and the image-quality metrics used to judge
//! them (PSNR over several regions, SSIM, masked MAE, relative enhancement).

use crate::error::{CoreError, Result};
use crate::model::{bind_params, unet_forward};
use crate::tensor::{Scalar, Tape};
use crate::trainer::Checkpoint;
use crate::volio::{LabelVolume, Volume};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Dataset-level factor that maps normalized predictions back to subtraction
/// intensities: the mean over samples of the ratio of brain-masked sums of
/// the standard-dose and low-dose local noise fields.
pub fn compute_gamma(items: &[(&Volume, &Volume, &LabelVolume)]) -> Result<f64> {
    if items.is_empty() {
        return Err(CoreError::validation("compute_gamma needs >= 1 sample"));
    }
    let mut total = 0.0f64;
    for (i, (s_sd, s_ld, brain)) in items.iter().enumerate() {
        s_sd.ensure_same_grid(s_ld, "gamma volumes")?;
        brain.ensure_same_grid(s_sd, "gamma brain mask")?;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (j, &m) in brain.data.iter().enumerate() {
            if m > 0 {
                num += s_sd.data[j] as f64;
                den += s_ld.data[j] as f64;
            }
        }
        if den <= 0.0 {
            return Err(CoreError::numerical(format!(
                "sample {i}: low-dose noise-field sum over the brain is {den}, cannot form gamma"
            )));
        }
        total += num / den;
    }
    Ok(total / items.len() as f64)
}

/// Reverts the noise normalization: y_tilde = gamma * s_ld ⊙ y_hat.
pub fn denormalize(y_hat: &Volume, s_ld: &Volume, gamma: f64) -> Result<Volume> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(CoreError::validation(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    y_hat.ensure_same_grid(s_ld, "denormalize")?;
    let data = y_hat
        .data
        .iter()
        .zip(&s_ld.data)
        .map(|(&y, &s)| (gamma * s as f64 * y as f64) as f32)
        .collect();
    y_hat.like(data)
}

/// Adds the predicted contrast signal onto a base image. Base = pre-contrast
/// gives the synthesized standard-dose image; base = low-dose gives the
/// contrast-boosted variant.
pub fn synthesize(base: &Volume, y_tilde: &Volume) -> Result<Volume> {
    base.ensure_same_grid(y_tilde, "synthesize")?;
    let data = base
        .data
        .iter()
        .zip(&y_tilde.data)
        .map(|(&b, &y)| b + y)
        .collect();
    base.like(data)
}

/// Full-volume forward pass of a trained model. The three inputs are the
/// noise-normalized subtraction, the normalized low-dose image, and the
/// local noise std; `cond` must have the model's condition length.
pub fn predict<T: Scalar>(
    ckpt: &Checkpoint<T>,
    z_ld: &Volume,
    x_ld: &Volume,
    s_ld: &Volume,
    cond: &[f64],
) -> Result<Volume> {
    z_ld.ensure_same_grid(x_ld, "predict inputs")?;
    z_ld.ensure_same_grid(s_ld, "predict inputs")?;
    if cond.len() != ckpt.model.cond_dim {
        return Err(CoreError::validation(format!(
            "condition length {} does not match model cond_dim {}",
            cond.len(),
            ckpt.model.cond_dim
        )));
    }
    let d = z_ld.dims;
    let shape = [1usize, 1, d[2], d[1], d[0]];
    let cast = |v: &Volume| -> Vec<T> {
        // Volume data is x-fastest; the tensor layout [N, C, D, H, W] wants
        // the last axis fastest, so map x→W, y→H, z→D (identity copy).
        v.data.iter().map(|&f| T::from_f64c(f as f64)).collect()
    };
    let mut tape = Tape::<T>::new();
    let zt = tape.leaf(&shape, cast(z_ld), false)?;
    let xt = tape.leaf(&shape, cast(x_ld), false)?;
    let st = tape.leaf(&shape, cast(s_ld), false)?;
    let cvec: Vec<T> = cond.iter().map(|&c| T::from_f64c(c)).collect();
    let ct = tape.leaf(&[1, cond.len()], cvec, false)?;
    let bp = bind_params(&mut tape, &ckpt.params, false)?;
    let y = unet_forward(&mut tape, &ckpt.model, &bp, zt, xt, st, ct)?;
    let out: Vec<f32> = tape.value(y).iter().map(|&v| v.to_f64c() as f32).collect();
    z_ld.like(out)
}

fn masked_mse(x: &Volume, reference: &Volume, mask: Option<&LabelVolume>) -> Result<f64> {
    x.ensure_same_grid(reference, "psnr")?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    match mask {
        None => {
            for (&a, &b) in x.data.iter().zip(&reference.data) {
                let d = a as f64 - b as f64;
                sum += d * d;
            }
            count = x.voxel_count();
        }
        Some(m) => {
            m.ensure_same_grid(x, "psnr mask")?;
            for (i, &v) in m.data.iter().enumerate() {
                if v > 0 {
                    let d = x.data[i] as f64 - reference.data[i] as f64;
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(CoreError::validation("psnr region is empty"));
    }
    Ok(sum / count as f64)
}

/// Peak signal-to-noise ratio in dB over the whole volume (mask = None) or a
/// labeled region (any label > 0). A perfect match yields +infinity.
pub fn psnr(x: &Volume, reference: &Volume, mask: Option<&LabelVolume>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(CoreError::validation("psnr peak must be positive"));
    }
    let mse = masked_mse(x, reference, mask)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Per-lesion PSNR: one dB value per label present in `lesions`, ascending
/// by label.
pub fn psnr_lesions(
    x: &Volume,
    reference: &Volume,
    lesions: &LabelVolume,
    peak: f64,
) -> Result<Vec<(u16, f64)>> {
    lesions.ensure_same_grid(x, "lesion mask")?;
    let max = lesions.max_label();
    let mut out = Vec::new();
    for label in 1..=max {
        let data: Vec<u16> = lesions
            .data
            .iter()
            .map(|&v| if v == label { 1 } else { 0 })
            .collect();
        if data.iter().all(|&v| v == 0) {
            continue;
        }
        let one = LabelVolume::new(lesions.dims, lesions.spacing, data)?;
        out.push((label, psnr(x, reference, Some(&one), peak)?));
    }
    Ok(out)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_HALF: usize = 5;

fn ssim_taps() -> [f64; 2 * SSIM_HALF + 1] {
    let mut t = [0.0f64; 2 * SSIM_HALF + 1];
    let mut sum = 0.0;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - SSIM_HALF as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in t.iter_mut() {
        *v /= sum;
    }
    t
}

/// Separable Gaussian blur along one axis with zero padding (axis 0 = x,
/// fastest in memory).
fn blur_axis_zero(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0f64; data.len()];
    let half = taps.len() / 2;
    let n_axis = dims[axis];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis];
                let mut acc = 0.0;
                let lo = pos.saturating_sub(half);
                let hi = (pos + half).min(n_axis - 1);
                for p in lo..=hi {
                    let t = taps[p + half - pos];
                    let idx = match axis {
                        0 => p + nx * (y + ny * z),
                        1 => x + nx * (p + ny * z),
                        _ => x + nx * (y + ny * p),
                    };
                    acc += t * data[idx];
                }
                out[x + nx * (y + ny * z)] = acc;
            }
        }
    }
    out
}

fn blur3(data: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let a = blur_axis_zero(data, dims, 0, taps);
    let b = blur_axis_zero(&a, dims, 1, taps);
    blur_axis_zero(&b, dims, 2, taps)
}

/// Structural similarity with a 3-D Gaussian window (sigma 1.5, 11-cubed
/// support). Near the borders the window is renormalized over the in-bounds
/// taps. `peak` sets the dynamic range (default 1.0 in this pipeline).
pub fn ssim(x: &Volume, y: &Volume, peak: f64) -> Result<f64> {
    x.ensure_same_grid(y, "ssim")?;
    if !(peak > 0.0) {
        return Err(CoreError::validation("ssim peak must be positive"));
    }
    let dims = x.dims;
    let n = x.voxel_count();
    let xf: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let yf: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xf.iter().map(|&v| v * v).collect();
    let yy: Vec<f64> = yf.iter().map(|&v| v * v).collect();
    let xy: Vec<f64> = xf.iter().zip(&yf).map(|(&a, &b)| a * b).collect();
    let ones = vec![1.0f64; n];
    let taps = ssim_taps();
    let m = blur3(&ones, dims, &taps);
    let bx = blur3(&xf, dims, &taps);
    let by = blur3(&yf, dims, &taps);
    let bxx = blur3(&xx, dims, &taps);
    let byy = blur3(&yy, dims, &taps);
    let bxy = blur3(&xy, dims, &taps);
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut acc = 0.0f64;
    for i in 0..n {
        let mu_x = bx[i] / m[i];
        let mu_y = by[i] / m[i];
        let var_x = bxx[i] / m[i] - mu_x * mu_x;
        let var_y = byy[i] / m[i] - mu_y * mu_y;
        let cov = bxy[i] / m[i] - mu_x * mu_y;
        let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
        let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / n as f64)
}

/// Mean absolute error over contrast-enhancing brain voxels: the region is
/// gate > 0.5 intersected with the brain mask.
pub fn mae_ce(x: &Volume, reference: &Volume, ce_gate: &Volume, brain: &LabelVolume) -> Result<f64> {
    x.ensure_same_grid(reference, "mae_ce")?;
    x.ensure_same_grid(ce_gate, "mae_ce gate")?;
    brain.ensure_same_grid(x, "mae_ce brain")?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, &p) in ce_gate.data.iter().enumerate() {
        if p > 0.5 && brain.data[i] > 0 {
            sum += (x.data[i] as f64 - reference.data[i] as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::validation(
            "mae_ce region (gate > 0.5 within brain) is empty",
        ));
    }
    Ok(sum / count as f64)
}

/// Per-lesion relative enhancement of `x` against the pre-contrast baseline,
/// normalized by the standard-dose enhancement. Lesions whose standard-dose
/// enhancement is not positive (sum or max) are excluded and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enhancement {
    /// Labels with well-defined ratios, ascending.
    pub labels: Vec<u16>,
    /// Ratio of summed enhancements per label.
    pub c_mean: Vec<f64>,
    /// Ratio of maximal enhancements per label.
    pub c_max: Vec<f64>,
    /// Labels whose standard-dose enhancement was degenerate.
    pub excluded: Vec<u16>,
}

pub fn relative_enhancement(
    x: &Volume,
    x_pc: &Volume,
    x_sd: &Volume,
    lesions: &LabelVolume,
) -> Result<Enhancement> {
    x.ensure_same_grid(x_pc, "relative_enhancement")?;
    x.ensure_same_grid(x_sd, "relative_enhancement")?;
    lesions.ensure_same_grid(x, "lesion mask")?;
    let max = lesions.max_label();
    let mut out = Enhancement {
        labels: Vec::new(),
        c_mean: Vec::new(),
        c_max: Vec::new(),
        excluded: Vec::new(),
    };
    for label in 1..=max {
        let mut num_sum = 0.0f64;
        let mut den_sum = 0.0f64;
        let mut num_max = f64::NEG_INFINITY;
        let mut den_max = f64::NEG_INFINITY;
        let mut seen = false;
        for (i, &v) in lesions.data.iter().enumerate() {
            if v != label {
                continue;
            }
            seen = true;
            let dn = x.data[i] as f64 - x_pc.data[i] as f64;
            let dd = x_sd.data[i] as f64 - x_pc.data[i] as f64;
            num_sum += dn;
            den_sum += dd;
            num_max = num_max.max(dn);
            den_max = den_max.max(dd);
        }
        if !seen {
            continue;
        }
        if den_sum <= 0.0 || den_max <= 0.0 {
            out.excluded.push(label);
            continue;
        }
        out.labels.push(label);
        out.c_mean.push(num_sum / den_sum);
        out.c_max.push(num_max / den_max);
    }
    Ok(out)
}

/// A dB quantity that serializes +infinity as the string "+inf" (perfect
/// reconstructions) and any finite value as a plain number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t == "+inf" => Ok(Db(f64::INFINITY)),
            Raw::Text(t) => Err(D::Error::custom(format!("invalid dB value {t:?}"))),
        }
    }
}

impl std::fmt::Display for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() && self.0 > 0.0 {
            write!(f, "+inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Per-case evaluation summary. Lesion-indexed lists share one ordering
/// (ascending label) and one length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_image: Db,
    pub psnr_brain: Db,
    pub psnr_lesions: Vec<Db>,
    pub psnr_lesion_mean: Db,
    pub ssim: f64,
    pub mae_ce: f64,
    pub lesion_labels: Vec<u16>,
    pub c_mean: Vec<f64>,
    pub c_max: Vec<f64>,
    pub excluded_lesions: Vec<u16>,
}

impl MetricsReport {
    pub fn c_mean_avg(&self) -> Option<f64> {
        if self.c_mean.is_empty() {
            None
        } else {
            Some(self.c_mean.iter().sum::<f64>() / self.c_mean.len() as f64)
        }
    }

    pub fn c_max_avg(&self) -> Option<f64> {
        if self.c_max.is_empty() {
            None
        } else {
            Some(self.c_max.iter().sum::<f64>() / self.c_max.len() as f64)
        }
    }

    pub fn csv_header() -> &'static str {
        "case,psnr_image,psnr_brain,psnr_lesion_mean,ssim,mae_ce,c_mean_avg,c_max_avg,n_lesions,n_excluded"
    }

    pub fn csv_row(&self, case: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            case,
            self.psnr_image,
            self.psnr_brain,
            self.psnr_lesion_mean,
            self.ssim,
            self.mae_ce,
            opt(self.c_mean_avg()),
            opt(self.c_max_avg()),
            self.lesion_labels.len(),
            self.excluded_lesions.len()
        )
    }

    pub fn lesion_csv_header() -> &'static str {
        "case,label,psnr,c_mean,c_max"
    }

    pub fn lesion_csv_rows(&self, case: &str) -> Vec<String> {
        self.lesion_labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                format!(
                    "{},{},{},{},{}",
                    case, label, self.psnr_lesions[i], self.c_mean[i], self.c_max[i]
                )
            })
            .collect()
    }
}

/// Everything needed to evaluate one synthesized volume against a reference.
pub struct ReportInputs<'a> {
    /// The volume under evaluation.
    pub output: &'a Volume,
    /// Clean reference the output is compared against.
    pub reference: &'a Volume,
    /// Pre-contrast baseline for enhancement ratios.
    pub x_pc: &'a Volume,
    /// Standard-dose image defining unit enhancement.
    pub x_sd: &'a Volume,
    pub brain: &'a LabelVolume,
    pub lesions: &'a LabelVolume,
    /// Soft contrast gate; > 0.5 defines the MAE region.
    pub ce_gate: &'a Volume,
    pub peak: f64,
}

/// Computes the full metric suite for one case. Lesion PSNR values are
/// restricted to the labels with valid enhancement ratios so all
/// lesion-indexed lists stay aligned.
pub fn metrics_report(inp: &ReportInputs<'_>) -> Result<MetricsReport> {
    let psnr_image = Db(psnr(inp.output, inp.reference, None, inp.peak)?);
    let psnr_brain = Db(psnr(inp.output, inp.reference, Some(inp.brain), inp.peak)?);
    let enh = relative_enhancement(inp.output, inp.x_pc, inp.x_sd, inp.lesions)?;
    let per_lesion = psnr_lesions(inp.output, inp.reference, inp.lesions, inp.peak)?;
    let mut psnr_list = Vec::with_capacity(enh.labels.len());
    for &label in &enh.labels {
        let v = per_lesion
            .iter()
            .find(|(l, _)| *l == label)
            .map(|&(_, v)| v)
            .ok_or_else(|| CoreError::validation(format!("lesion {label} missing from mask")))?;
        psnr_list.push(Db(v));
    }
    let mean = if psnr_list.is_empty() {
        Db(f64::NAN)
    } else {
        Db(psnr_list.iter().map(|d| d.0).sum::<f64>() / psnr_list.len() as f64)
    };
    Ok(MetricsReport {
        psnr_image,
        psnr_brain,
        psnr_lesions: psnr_list,
        psnr_lesion_mean: mean,
        ssim: ssim(inp.output, inp.reference, inp.peak)?,
        mae_ce: mae_ce(inp.output, inp.reference, inp.ce_gate, inp.brain)?,
        lesion_labels: enh.labels,
        c_mean: enh.c_mean,
        c_max: enh.c_max,
        excluded_lesions: enh.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::trainer::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    fn labels(dims: [usize; 3], data: Vec<u16>) -> LabelVolume {
        LabelVolume::new(dims, [1.0; 3], data).unwrap()
    }

    /// Random volume quantized to multiples of 1/1024 so affine remaps with
    /// power-of-two coefficients stay exact in f32.
    fn quantized(dims: [usize; 3], lo: f64, hi: f64, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n)
            .map(|_| {
                let k = rng.gen_range((lo * 1024.0) as i64..(hi * 1024.0) as i64);
                k as f32 / 1024.0
            })
            .collect();
        vol(dims, data)
    }

    #[test]
    fn test_gamma_identity_and_scaling() {
        let d = [4, 4, 4];
        let s = vol(d, vec![0.3; 64]);
        let s2 = vol(d, vec![0.6; 64]);
        let b = labels(d, vec![1; 64]);
        assert_eq!(compute_gamma(&[(&s, &s, &b)]).unwrap(), 1.0);
        assert!((compute_gamma(&[(&s2, &s, &b)]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn test_gamma_averages_sample_ratios() {
        let d = [2, 2, 2];
        let one = vol(d, vec![1.0; 8]);
        let three = vol(d, vec![3.0; 8]);
        let b = labels(d, vec![1; 8]);
        let g = compute_gamma(&[(&one, &one, &b), (&three, &one, &b)]).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
    }

    #[test]
    fn test_gamma_rejects_zero_denominator_and_empty() {
        let d = [2, 2, 2];
        let z = vol(d, vec![0.0; 8]);
        let o = vol(d, vec![1.0; 8]);
        let b = labels(d, vec![1; 8]);
        assert!(compute_gamma(&[(&o, &z, &b)]).is_err());
        assert!(compute_gamma(&[]).is_err());
        // Empty brain mask also yields a zero denominator.
        let none = labels(d, vec![0; 8]);
        assert!(compute_gamma(&[(&o, &o, &none)]).is_err());
    }

    #[test]
    fn test_denormalize_identity_zero_and_ratio() {
        let d = [3, 3, 3];
        let ones = vol(d, vec![1.0; 27]);
        let y = quantized(d, 0.0, 1.0, 1);
        let out = denormalize(&y, &ones, 1.0).unwrap();
        assert_eq!(out.data, y.data);

        let zero = vol(d, vec![0.0; 27]);
        let out = denormalize(&zero, &y, 2.5).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));

        let s = quantized(d, 0.5, 1.5, 2);
        let gamma = 1.75;
        let out = denormalize(&y, &s, gamma).unwrap();
        for i in 0..27 {
            let expect = gamma * s.data[i] as f64 * y.data[i] as f64;
            assert!((out.data[i] as f64 - expect).abs() < 1e-6);
        }

        assert!(denormalize(&y, &s, 0.0).is_err());
        assert!(denormalize(&y, &s, -1.0).is_err());
    }

    #[test]
    fn test_synthesize_zero_signal_keeps_base() {
        let d = [3, 3, 3];
        let base = quantized(d, 0.0, 1.0, 3);
        let zero = vol(d, vec![0.0; 27]);
        let out = synthesize(&base, &zero).unwrap();
        assert_eq!(out.data, base.data);
        let small = vol([2, 2, 2], vec![0.0; 8]);
        assert!(synthesize(&base, &small).is_err());
    }

    #[test]
    fn test_predict_untrained_is_zero_and_matches_forward() {
        let cfg = ModelConfig {
            scales: 2,
            base_channels: 2,
            embed_dim: 4,
            in_channels: 3,
            out_channels: 1,
            cond_dim: 1,
        };
        let params = init_params::<f32>(&cfg, 9).unwrap();
        let ckpt = Checkpoint {
            model: cfg,
            train: TrainConfig::default(),
            gamma: 1.0,
            seed: 9,
            params,
        };
        let d = [6, 4, 4];
        let z = quantized(d, -1.0, 1.0, 4);
        let x = quantized(d, 0.0, 1.0, 5);
        let s = quantized(d, 0.5, 1.5, 6);
        let out = predict(&ckpt, &z, &x, &s, &[0.3]).unwrap();
        assert_eq!(out.dims, d);
        assert!(out.data.iter().all(|&v| v == 0.0));

        assert!(predict(&ckpt, &z, &x, &s, &[0.3, 0.4]).is_err());
    }

    #[test]
    fn test_psnr_exact_match_and_twenty_db() {
        let d = [4, 4, 4];
        let x = quantized(d, 0.0, 1.0, 7);
        assert_eq!(psnr(&x, &x, None, 1.0).unwrap(), f64::INFINITY);

        let shifted = x.like(x.data.iter().map(|&v| v + 0.1).collect()).unwrap();
        let p = psnr(&shifted, &x, None, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "got {p}");
    }

    #[test]
    fn test_psnr_matches_naive_loop() {
        let d = [5, 4, 3];
        let x = quantized(d, 0.0, 1.0, 8);
        let r = quantized(d, 0.0, 1.0, 9);
        let mine = psnr(&x, &r, None, 1.0).unwrap();
        let mut sum = 0.0f64;
        for i in 0..x.voxel_count() {
            let e = x.data[i] as f64 - r.data[i] as f64;
            sum += e * e;
        }
        let naive = 10.0 * (1.0 / (sum / x.voxel_count() as f64)).log10();
        assert!((mine - naive).abs() < 1e-9);
    }

    #[test]
    fn test_psnr_translation_consistent() {
        let d = [4, 4, 4];
        let x = quantized(d, 0.0, 1.0, 10);
        let r = quantized(d, 0.0, 1.0, 11);
        let p0 = psnr(&x, &r, None, 1.0).unwrap();
        let shift = |v: &Volume| v.like(v.data.iter().map(|&a| a + 0.25).collect()).unwrap();
        let p1 = psnr(&shift(&x), &shift(&r), None, 1.0).unwrap();
        assert_eq!(p0.to_bits(), p1.to_bits());
    }

    #[test]
    fn test_psnr_region_and_errors() {
        let d = [4, 4, 4];
        let x = quantized(d, 0.0, 1.0, 12);
        let mut rdata = x.data.clone();
        // Perturb only voxels outside the mask; masked PSNR stays infinite.
        let mask: Vec<u16> = (0..64).map(|i| if i < 32 { 1 } else { 0 }).collect();
        for (i, v) in rdata.iter_mut().enumerate() {
            if i >= 32 {
                *v += 0.5;
            }
        }
        let r = x.like(rdata).unwrap();
        let m = labels(d, mask);
        assert_eq!(psnr(&x, &r, Some(&m), 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&x, &r, None, 1.0).unwrap() < f64::INFINITY);

        let empty = labels(d, vec![0; 64]);
        assert!(psnr(&x, &r, Some(&empty), 1.0).is_err());
        assert!(psnr(&x, &r, None, 0.0).is_err());
    }

    #[test]
    fn test_psnr_lesions_per_label() {
        let d = [4, 4, 4];
        let x = quantized(d, 0.0, 1.0, 13);
        let mut rdata = x.data.clone();
        let mut lab = vec![0u16; 64];
        for i in 0..8 {
            lab[i] = 1;
        }
        for i in 16..24 {
            lab[i] = 3; // label 2 intentionally absent
            rdata[i] += 0.1;
        }
        let r = x.like(rdata).unwrap();
        let les = labels(d, lab);
        let per = psnr_lesions(&x, &r, &les, 1.0).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].0, 1);
        assert_eq!(per[0].1, f64::INFINITY);
        assert_eq!(per[1].0, 3);
        assert!((per[1].1 - 20.0).abs() < 1e-4);
    }

    #[test]
    fn test_ssim_self_is_exactly_one_and_symmetric() {
        let d = [6, 5, 4];
        let x = quantized(d, 0.0, 1.0, 14);
        let y = quantized(d, 0.0, 1.0, 15);
        assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
        let a = ssim(&x, &y, 1.0).unwrap();
        let b = ssim(&y, &x, 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a < 1.0);
    }

    #[test]
    fn test_ssim_large_shift_collapses() {
        let d = [6, 6, 6];
        let x = quantized(d, 0.0, 1.0, 16);
        let y = x.like(x.data.iter().map(|&v| v + 10.0).collect()).unwrap();
        let s = ssim(&x, &y, 1.0).unwrap();
        assert!(s < 0.5, "luminance collapse expected, got {s}");
    }

    #[test]
    fn test_ssim_matches_naive_windowed_reference() {
        // Independent implementation: direct 11-cubed window per voxel with
        // in-bounds renormalization, straight from the definition.
        let d = [8, 8, 8];
        let x = quantized(d, 0.0, 1.0, 17);
        let y = quantized(d, 0.0, 1.0, 18);
        let mine = ssim(&x, &y, 1.0).unwrap();

        let g = ssim_taps();
        let c1 = (0.01f64).powi(2);
        let c2 = (0.03f64).powi(2);
        let mut acc = 0.0f64;
        for cz in 0..8i64 {
            for cy in 0..8i64 {
                for cx in 0..8i64 {
                    let mut wsum = 0.0;
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for oz in -5..=5i64 {
                        for oy in -5..=5i64 {
                            for ox in -5..=5i64 {
                                let (px, py, pz) = (cx + ox, cy + oy, cz + oz);
                                if px < 0 || py < 0 || pz < 0 || px >= 8 || py >= 8 || pz >= 8 {
                                    continue;
                                }
                                let w = g[(ox + 5) as usize]
                                    * g[(oy + 5) as usize]
                                    * g[(oz + 5) as usize];
                                let i = (px + 8 * (py + 8 * pz)) as usize;
                                let (a, b) = (x.data[i] as f64, y.data[i] as f64);
                                wsum += w;
                                sx += w * a;
                                sy += w * b;
                                sxx += w * a * a;
                                syy += w * b * b;
                                sxy += w * a * b;
                            }
                        }
                    }
                    let mx = sx / wsum;
                    let my = sy / wsum;
                    let vx = sxx / wsum - mx * mx;
                    let vy = syy / wsum - my * my;
                    let cv = sxy / wsum - mx * my;
                    acc += ((2.0 * mx * my + c1) * (2.0 * cv + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
            }
        }
        let naive = acc / 512.0;
        assert!((mine - naive).abs() < 1e-6, "{mine} vs {naive}");
    }

    #[test]
    fn test_mae_ce_basic_and_offset() {
        let d = [4, 4, 4];
        let x = quantized(d, 0.0, 1.0, 19);
        let gate = vol(d, vec![1.0; 64]);
        let brain = labels(d, vec![1; 64]);
        assert_eq!(mae_ce(&x, &x, &gate, &brain).unwrap(), 0.0);

        let r = x.like(x.data.iter().map(|&v| v + 0.28).collect()).unwrap();
        let m = mae_ce(&r, &x, &gate, &brain).unwrap();
        assert!((m - 0.28).abs() < 1e-6);

        let empty = vol(d, vec![0.0; 64]);
        assert!(mae_ce(&x, &x, &empty, &brain).is_err());
    }

    #[test]
    fn test_mae_ce_region_intersection() {
        let d = [2, 2, 2];
        let x = vol(d, vec![0.0; 8]);
        let r = vol(d, vec![1.0, 1.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        // Gate only over the first four voxels, brain only over the first two:
        // region = first two voxels, error 1.0 each.
        let gate = vol(d, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let brain = labels(d, vec![1, 1, 0, 0, 1, 1, 1, 1]);
        assert_eq!(mae_ce(&x, &r, &gate, &brain).unwrap(), 1.0);
    }

    fn enhancement_fixture() -> (Volume, Volume, LabelVolume, [usize; 3]) {
        let d = [4, 4, 4];
        let x_pc = quantized(d, 0.2, 0.8, 20);
        let mut sd = x_pc.data.clone();
        let mut lab = vec![0u16; 64];
        for i in 0..6 {
            lab[i] = 1;
            sd[i] += 0.5;
        }
        for i in 20..28 {
            lab[i] = 2;
            sd[i] += 0.25;
        }
        let x_sd = x_pc.like(sd).unwrap();
        (x_pc, x_sd, labels(d, lab), d)
    }

    #[test]
    fn test_enhancement_endpoints() {
        let (x_pc, x_sd, les, _) = enhancement_fixture();
        let e = relative_enhancement(&x_sd, &x_pc, &x_sd, &les).unwrap();
        assert_eq!(e.labels, vec![1, 2]);
        for (&m, &mx) in e.c_mean.iter().zip(&e.c_max) {
            assert!((m - 1.0).abs() < 1e-9);
            assert!((mx - 1.0).abs() < 1e-9);
        }
        let e0 = relative_enhancement(&x_pc, &x_pc, &x_sd, &les).unwrap();
        for (&m, &mx) in e0.c_mean.iter().zip(&e0.c_max) {
            assert_eq!(m, 0.0);
            assert_eq!(mx, 0.0);
        }
        assert!(e.excluded.is_empty());
    }

    #[test]
    fn test_enhancement_linear_dose() {
        let (x_pc, x_sd, les, _) = enhancement_fixture();
        let dose = 0.33f64;
        let x_ld = x_pc
            .like(
                x_pc.data
                    .iter()
                    .zip(&x_sd.data)
                    .map(|(&p, &s)| p + dose as f32 * (s - p))
                    .collect(),
            )
            .unwrap();
        let e = relative_enhancement(&x_ld, &x_pc, &x_sd, &les).unwrap();
        for (&m, &mx) in e.c_mean.iter().zip(&e.c_max) {
            assert!((m - dose).abs() < 1e-6);
            assert!((mx - dose).abs() < 1e-6);
        }
    }

    #[test]
    fn test_enhancement_affine_invariance_exact() {
        let (x_pc, x_sd, les, _) = enhancement_fixture();
        let x = quantized([4, 4, 4], 0.2, 1.2, 21);
        let base = relative_enhancement(&x, &x_pc, &x_sd, &les).unwrap();
        // Power-of-two scale and dyadic offset keep f32 arithmetic exact.
        let remap = |v: &Volume| v.like(v.data.iter().map(|&a| 2.0 * a + 0.25).collect()).unwrap();
        let mapped =
            relative_enhancement(&remap(&x), &remap(&x_pc), &remap(&x_sd), &les).unwrap();
        assert_eq!(base, mapped);
    }

    #[test]
    fn test_enhancement_degenerate_lesion_excluded() {
        let (x_pc, x_sd, les, d) = enhancement_fixture();
        // Flatten lesion 2's standard-dose enhancement to zero.
        let mut sd = x_sd.data.clone();
        for (i, &l) in les.data.iter().enumerate() {
            if l == 2 {
                sd[i] = x_pc.data[i];
            }
        }
        let x_sd2 = x_pc.like(sd).unwrap();
        let x = quantized(d, 0.0, 1.0, 22);
        let e = relative_enhancement(&x, &x_pc, &x_sd2, &les).unwrap();
        assert_eq!(e.labels, vec![1]);
        assert_eq!(e.excluded, vec![2]);
        assert_eq!(e.c_mean.len(), 1);
    }

    #[test]
    fn test_db_serialization() {
        assert_eq!(serde_json::to_string(&Db(20.5)).unwrap(), "20.5");
        assert_eq!(serde_json::to_string(&Db(f64::INFINITY)).unwrap(), "\"+inf\"");
        let back: Db = serde_json::from_str("\"+inf\"").unwrap();
        assert_eq!(back.0, f64::INFINITY);
        let back: Db = serde_json::from_str("12.25").unwrap();
        assert_eq!(back.0, 12.25);
        assert!(serde_json::from_str::<Db>("\"fast\"").is_err());
    }

    #[test]
    fn test_metrics_report_assembly_and_serialization() {
        let (x_pc, x_sd, les, d) = enhancement_fixture();
        let brain = labels(d, vec![1; 64]);
        let gate = x_pc
            .like(
                les.data
                    .iter()
                    .map(|&l| if l > 0 { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap();
        let rep = metrics_report(&ReportInputs {
            output: &x_sd,
            reference: &x_sd,
            x_pc: &x_pc,
            x_sd: &x_sd,
            brain: &brain,
            lesions: &les,
            ce_gate: &gate,
            peak: 1.0,
        })
        .unwrap();
        assert_eq!(rep.psnr_image.0, f64::INFINITY);
        assert_eq!(rep.psnr_lesion_mean.0, f64::INFINITY);
        assert_eq!(rep.ssim, 1.0);
        assert_eq!(rep.mae_ce, 0.0);
        assert_eq!(rep.lesion_labels, vec![1, 2]);
        assert_eq!(rep.psnr_lesions.len(), 2);
        assert!((rep.c_mean_avg().unwrap() - 1.0).abs() < 1e-9);

        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"+inf\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);

        let row = rep.csv_row("case7");
        assert!(row.starts_with("case7,+inf,"));
        assert_eq!(row.split(',').count(), MetricsReport::csv_header().split(',').count());
        let lrows = rep.lesion_csv_rows("case7");
        assert_eq!(lrows.len(), 2);
        assert!(lrows[0].starts_with("case7,1,"));
    }
}
