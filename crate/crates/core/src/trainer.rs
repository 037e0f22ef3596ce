//! Patch-based training of the contrast-signal network.
//!
//! A training sample couples the preprocessed low-dose subtraction bundle
//! with its clean target, gating mask, brain mask, and acquisition metadata.
//! Each optimization step draws random patches (with lesion oversampling),
//! runs the network, and minimizes a weighted Huber loss that ignores a
//! border margin. Checkpoints serialize configuration, the denormalization
//! factor gamma, and every parameter tensor in a versioned binary container.

use crate::error::{CoreError, Result};
use crate::model::{
    bind_params, init_params, param_shapes, unet_forward, ModelConfig, ParamEntry, ParamStore,
};
use crate::preprocess::SubtractionBundle;
use crate::tensor::{adam_step, cosine_lr, AdamConfig, AdamState, Dtype, Scalar, Tape, TensorRef};
use crate::volio::{AcquisitionMeta, LabelVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;

/// One preprocessed case ready for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Preprocessed low-dose pair (noise-normalized subtraction and stats).
    pub bundle_ld: SubtractionBundle,
    /// Clean training target (gated standard-dose subtraction).
    pub target: Volume,
    /// Soft contrast-enhancement gate in [0, 1].
    pub ce_mask: Volume,
    pub brain: LabelVolume,
    pub meta: AcquisitionMeta,
    /// Percentile-normalized low-dose image (second network input).
    pub x_ld: Volume,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        let z = &self.bundle_ld.z_norm;
        z.ensure_same_grid(&self.target, "target")?;
        z.ensure_same_grid(&self.ce_mask, "ce_mask")?;
        z.ensure_same_grid(&self.x_ld, "x_ld")?;
        z.ensure_same_grid(&self.bundle_ld.local_std, "local_std")?;
        self.brain.ensure_same_grid(z, "brain")?;
        self.meta.validate()?;
        if self.ce_mask.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::validation("ce_mask values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Condition vector for this sample: full (dose, field, relaxivity,
    /// noise) or reduced (noise only). The noise entry is the estimated
    /// subtraction noise level of the low-dose pair.
    pub fn condition(&self, cond_dim: usize) -> Result<Vec<f64>> {
        let full = self.meta.condition(Some(self.bundle_ld.sigma))?;
        match cond_dim {
            4 => Ok(full.to_vec()),
            1 => Ok(vec![full[3]]),
            other => Err(CoreError::validation(format!(
                "cond_dim must be 4 or 1, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Cubic patch edge length in voxels.
    pub patch: usize,
    /// Initial and final learning rate of the cosine schedule.
    pub lr0: f64,
    pub lr1: f64,
    /// Uniform loss-weight floor.
    pub lambda1: f64,
    /// Extra weight on contrast-enhancing voxels.
    pub lambda2: f64,
    pub huber_eps: f64,
    /// Voxels this close to a patch face are excluded from the loss.
    pub margin: usize,
    pub seed: u64,
    /// Progress-reporting interval in steps.
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 4,
            patch: 32,
            lr0: 1e-4,
            lr1: 1e-6,
            lambda1: 0.01,
            lambda2: 1.0,
            huber_eps: 0.1,
            margin: 8,
            seed: 0,
            log_every: 50,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        if self.batch == 0 {
            return Err(CoreError::validation("batch must be >= 1"));
        }
        if self.patch == 0 || self.patch % model.dim_multiple() != 0 {
            return Err(CoreError::validation(format!(
                "patch {} must be a positive multiple of {}",
                self.patch,
                model.dim_multiple()
            )));
        }
        if 2 * self.margin >= self.patch {
            return Err(CoreError::validation(format!(
                "margin {} must be smaller than half the patch {}",
                self.margin, self.patch
            )));
        }
        if !(self.lr0 > 0.0 && self.lr1 >= 0.0 && self.lr0 >= self.lr1) {
            return Err(CoreError::validation("need lr0 >= lr1 >= 0 and lr0 > 0"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(CoreError::validation("lambda1 and lambda2 must be >= 0"));
        }
        if !(self.huber_eps > 0.0) {
            return Err(CoreError::validation("huber_eps must be positive"));
        }
        if self.log_every == 0 {
            return Err(CoreError::validation("log_every must be >= 1"));
        }
        self.adam.validate()
    }
}

/// Aligned cubic crops of every member volume of one sample.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub corner: [usize; 3],
    pub z: Vec<f32>,
    pub x: Vec<f32>,
    pub s: Vec<f32>,
    pub target: Vec<f32>,
    pub ce: Vec<f32>,
    pub brain: Vec<f32>,
}

fn crop_f32(data: &[f32], dims: [usize; 3], corner: [usize; 3], patch: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(patch * patch * patch);
    for dz in 0..patch {
        for dy in 0..patch {
            let row = corner[0] + dims[0] * ((corner[1] + dy) + dims[1] * (corner[2] + dz));
            out.extend_from_slice(&data[row..row + patch]);
        }
    }
    out
}

fn patch_has_ce(ce: &Volume, corner: [usize; 3], patch: usize) -> bool {
    for dz in 0..patch {
        for dy in 0..patch {
            let row = corner[0]
                + ce.dims[0] * ((corner[1] + dy) + ce.dims[1] * (corner[2] + dz));
            if ce.data[row..row + patch].iter().any(|&v| v > 0.5) {
                return true;
            }
        }
    }
    false
}

fn draw_corner(dims: [usize; 3], patch: usize, rng: &mut ChaCha8Rng) -> [usize; 3] {
    let cx = rng.gen_range(0..=dims[0] - patch);
    let cy = rng.gen_range(0..=dims[1] - patch);
    let cz = rng.gen_range(0..=dims[2] - patch);
    [cx, cy, cz]
}

/// Draws one aligned random patch. With probability one half, the corner is
/// redrawn (up to 10 times) until the patch holds at least one voxel with
/// gate value above 0.5, oversampling the rare enhancing regions.
pub fn sample_patch(
    sample: &TrainSample,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSet> {
    let dims = sample.bundle_ld.z_norm.dims;
    if patch == 0 || dims.iter().any(|&d| d < patch) {
        return Err(CoreError::validation(format!(
            "patch {patch} does not fit into volume dims {dims:?}"
        )));
    }
    let mut corner = draw_corner(dims, patch, rng);
    if rng.gen_bool(0.5) && !patch_has_ce(&sample.ce_mask, corner, patch) {
        for _ in 0..10 {
            corner = draw_corner(dims, patch, rng);
            if patch_has_ce(&sample.ce_mask, corner, patch) {
                break;
            }
        }
    }
    let brain_f: Vec<f32> = {
        let mut out = Vec::with_capacity(patch * patch * patch);
        let d = sample.brain.dims;
        for dz in 0..patch {
            for dy in 0..patch {
                let row = corner[0] + d[0] * ((corner[1] + dy) + d[1] * (corner[2] + dz));
                out.extend(
                    sample.brain.data[row..row + patch]
                        .iter()
                        .map(|&v| if v > 0 { 1.0 } else { 0.0 }),
                );
            }
        }
        out
    };
    Ok(PatchSet {
        corner,
        z: crop_f32(&sample.bundle_ld.z_norm.data, dims, corner, patch),
        x: crop_f32(&sample.x_ld.data, dims, corner, patch),
        s: crop_f32(&sample.bundle_ld.local_std.data, dims, corner, patch),
        target: crop_f32(&sample.target.data, dims, corner, patch),
        ce: crop_f32(&sample.ce_mask.data, dims, corner, patch),
        brain: brain_f,
    })
}

/// Weighted Huber objective: per counted voxel the residual penalty is
/// scaled by (brain + lambda1 + lambda2 * gate) and voxels within `margin`
/// of any patch face are excluded; the result is the mean over counted
/// voxels and batch entries.
pub fn weighted_huber_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_hat: TensorRef,
    target: &[T],
    brain: &[T],
    ce: &[T],
    cfg: &TrainConfig,
) -> Result<TensorRef> {
    let n = tape.shape(y_hat).iter().product::<usize>();
    if brain.len() != n || ce.len() != n || target.len() != n {
        return Err(CoreError::shape(format!(
            "loss inputs must all have {n} entries"
        )));
    }
    let l1 = T::from_f64c(cfg.lambda1);
    let l2 = T::from_f64c(cfg.lambda2);
    let weight: Vec<T> = brain
        .iter()
        .zip(ce)
        .map(|(&b, &p)| b + l1 + l2 * p)
        .collect();
    tape.weighted_huber(y_hat, target, &weight, cfg.margin, cfg.huber_eps)
}

/// One training-log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Writes the training log as CSV with header `step,lr,loss`.
pub fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Trained model plus its provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Denormalization factor mapping normalized predictions back to
    /// subtraction intensities (see `infer::compute_gamma`).
    pub gamma: f64,
    pub seed: u64,
    pub params: ParamStore<T>,
}

pub struct TrainOutcome<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<LossRow>,
}

/// Runs the full optimization loop. Initialization draws from RNG stream 0
/// of `cfg.seed`, patch sampling from stream 1, so the two are independent
/// but jointly reproducible. `gamma` is the dataset-level denormalization
/// factor recorded in the checkpoint for inference.
pub fn train<T: Scalar>(
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    gamma: f64,
) -> Result<TrainOutcome<T>> {
    cfg.validate(model_cfg)?;
    if dataset.is_empty() {
        return Err(CoreError::validation("training dataset is empty"));
    }
    for (i, s) in dataset.iter().enumerate() {
        s.validate()
            .map_err(|e| CoreError::validation(format!("sample {i}: {e}")))?;
        let dims = s.bundle_ld.z_norm.dims;
        if dims.iter().any(|&d| d < cfg.patch) {
            return Err(CoreError::validation(format!(
                "sample {i}: dims {dims:?} smaller than patch {}",
                cfg.patch
            )));
        }
    }
    let conds: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| s.condition(model_cfg.cond_dim))
        .collect::<Result<_>>()?;

    let mut store = init_params::<T>(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut states: Vec<AdamState<T>> = store
        .entries()
        .iter()
        .map(|e| AdamState::new(e.data.len()))
        .collect();
    let mut log = Vec::with_capacity(cfg.iterations);
    let p3 = cfg.patch * cfg.patch * cfg.patch;

    for step in 0..cfg.iterations {
        let lr = cosine_lr(step as u64, cfg.iterations as u64, cfg.lr0, cfg.lr1);

        let mut ids = Vec::with_capacity(cfg.batch);
        let mut z = Vec::with_capacity(cfg.batch * p3);
        let mut x = Vec::with_capacity(cfg.batch * p3);
        let mut s = Vec::with_capacity(cfg.batch * p3);
        let mut target = Vec::with_capacity(cfg.batch * p3);
        let mut ce = Vec::with_capacity(cfg.batch * p3);
        let mut brain = Vec::with_capacity(cfg.batch * p3);
        let mut cond = Vec::with_capacity(cfg.batch * model_cfg.cond_dim);
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..dataset.len());
            ids.push(idx);
            let ps = sample_patch(&dataset[idx], cfg.patch, &mut rng)?;
            z.extend(ps.z.iter().map(|&v| T::from_f64c(v as f64)));
            x.extend(ps.x.iter().map(|&v| T::from_f64c(v as f64)));
            s.extend(ps.s.iter().map(|&v| T::from_f64c(v as f64)));
            target.extend(ps.target.iter().map(|&v| T::from_f64c(v as f64)));
            ce.extend(ps.ce.iter().map(|&v| T::from_f64c(v as f64)));
            brain.extend(ps.brain.iter().map(|&v| T::from_f64c(v as f64)));
            cond.extend(conds[idx].iter().map(|&v| T::from_f64c(v)));
        }

        let shape = [cfg.batch, 1, cfg.patch, cfg.patch, cfg.patch];
        let mut tape = Tape::<T>::new();
        let zt = tape.leaf(&shape, z, false)?;
        let xt = tape.leaf(&shape, x, false)?;
        let st = tape.leaf(&shape, s, false)?;
        let ct = tape.leaf(&[cfg.batch, model_cfg.cond_dim], cond, false)?;
        let bp = bind_params(&mut tape, &store, true)?;
        let y = unet_forward(&mut tape, model_cfg, &bp, zt, xt, st, ct)?;
        let loss = weighted_huber_loss(&mut tape, y, &target, &brain, &ce, cfg)?;
        let loss_val = loss_scalar(&tape, loss);
        if !loss_val.is_finite() {
            return Err(CoreError::numerical(format!(
                "non-finite loss {loss_val} at step {step} (lr {lr}, batch samples {ids:?})"
            )));
        }
        tape.backward(loss)?;

        for (i, state) in states.iter_mut().enumerate() {
            let name = store.entries()[i].name.clone();
            let grad = tape
                .grad(bp.get(&name)?)
                .ok_or_else(|| CoreError::numerical(format!("missing gradient for {name}")))?
                .to_vec();
            adam_step(
                &mut store.entry_mut(i).data,
                &grad,
                state,
                (step + 1) as u64,
                lr,
                &cfg.adam,
            )?;
        }
        log.push(LossRow {
            step,
            lr,
            loss: loss_val,
        });
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.iterations {
            eprintln!(
                "step {}/{} lr {:.3e} loss {:.6}",
                step + 1,
                cfg.iterations,
                lr,
                loss_val
            );
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: *model_cfg,
            train: *cfg,
            gamma,
            seed: cfg.seed,
            params: store,
        },
        log,
    })
}

fn loss_scalar<T: Scalar>(tape: &Tape<T>, loss: TensorRef) -> f64 {
    tape.value(loss)[0].to_f64c()
}

const CKPT_MAGIC: &[u8; 4] = b"CFCK";
const CKPT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    gamma: f64,
    seed: u64,
    param_count: usize,
}

/// Serializes a checkpoint: magic, format version, element-type code, a JSON
/// header (configs, gamma, seed, scalar count), then every tensor as
/// name / rank / dims / little-endian data, in canonical order.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let label = path.display().to_string();
    let header = CheckpointHeader {
        model: ckpt.model,
        train: ckpt.train,
        gamma: ckpt.gamma,
        seed: ckpt.seed,
        param_count: ckpt.params.scalar_count(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::format(label.clone(), e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for e in ckpt.params.entries() {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CoreError::format(label.clone(), "tensor name too long"));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.data {
            v.write_le(&mut buf);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(label.clone(), e))?;
    f.write_all(&buf).map_err(|e| CoreError::io(label, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::io(
                self.label.to_string(),
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "checkpoint file truncated",
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads and validates a checkpoint. The element type must match `T`, and
/// every tensor's name and shape must agree with the configuration's
/// canonical parameter list.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let label = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| CoreError::io(label.clone(), e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        label: &label,
    };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(CoreError::format(label.clone(), "not a checkpoint file (bad magic)"));
    }
    let version = cur.u32le()?;
    if version != CKPT_VERSION {
        return Err(CoreError::format(
            label.clone(),
            format!("unsupported checkpoint version {version} (expected {CKPT_VERSION})"),
        ));
    }
    let code = cur.take(1)?[0];
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| CoreError::format(label.clone(), format!("unknown element-type code {code}")))?;
    if dtype != T::DTYPE {
        return Err(CoreError::format(
            label.clone(),
            format!(
                "checkpoint stores {} but {} was requested",
                dtype.name(),
                T::DTYPE.name()
            ),
        ));
    }
    let hlen = cur.u64le()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| CoreError::format(label.clone(), format!("invalid header JSON: {e}")))?;
    header.model.validate()?;

    let expected = param_shapes(&header.model);
    let mut entries = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let nlen = cur.u16le()? as usize;
        let got_name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| CoreError::format(label.clone(), "tensor name is not UTF-8"))?
            .to_string();
        if &got_name != name {
            return Err(CoreError::format(
                label.clone(),
                format!("tensor order mismatch: expected {name}, found {got_name}"),
            ));
        }
        let ndim = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64le()? as usize);
        }
        if &dims != shape {
            return Err(CoreError::format(
                label.clone(),
                format!("tensor {name}: stored shape {dims:?} does not match expected {shape:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * std::mem::size_of::<T>())?;
        let mut data = Vec::with_capacity(n);
        let w = std::mem::size_of::<T>();
        for i in 0..n {
            data.push(T::read_le(&raw[i * w..(i + 1) * w]));
        }
        entries.push(ParamEntry {
            name: got_name,
            shape: dims,
            data,
        });
    }
    if cur.pos != buf.len() {
        return Err(CoreError::format(
            label.clone(),
            "trailing bytes after the last tensor",
        ));
    }
    let store = ParamStore::from_entries_checked(entries)?;
    if store.scalar_count() != header.param_count {
        return Err(CoreError::format(
            label.clone(),
            format!(
                "header claims {} parameters, tensors hold {}",
                header.param_count,
                store.scalar_count()
            ),
        ));
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        gamma: header.gamma,
        seed: header.seed,
        params: store,
    })
}
