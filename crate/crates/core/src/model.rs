//! Metadata-conditioned 3-D U-Net for contrast-signal prediction.
//!
//! The network consumes three aligned single-channel volumes (noise-normalized
//! subtraction, normalized low-dose image, local noise std) plus a per-sample
//! condition vector (dose, field strength, relaxivity, noise level — or just
//! the noise level in reduced mode). The condition is embedded by a two-layer
//! MLP and injected into every conditional residual block (CRB) as a
//! channel-wise bias. Downsampling is a widening convolution followed by an
//! anti-aliasing blur-pool; upsampling is trilinear, fused with the skip path
//! through learned sigmoid gates. The output convolution is zero-initialized
//! so an untrained model predicts exactly zero, and a final ReLU keeps the
//! predicted contrast signal nonnegative.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tape, TensorRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of resolution levels; `scales - 1` downsampling steps.
    pub scales: usize,
    /// Channels at full resolution; doubled at every coarser level.
    pub base_channels: usize,
    /// Width of the condition embedding (and of the MLP hidden layer).
    pub embed_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Length of the condition vector: 4 (dose, field, relaxivity, noise)
    /// or 1 (noise only).
    pub cond_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 4,
            base_channels: 32,
            embed_dim: 128,
            in_channels: 3,
            out_channels: 1,
            cond_dim: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(CoreError::validation("scales must be >= 1"));
        }
        if self.base_channels == 0 || self.embed_dim == 0 {
            return Err(CoreError::validation(
                "base_channels and embed_dim must be >= 1",
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::validation("channel counts must be >= 1"));
        }
        if self.cond_dim != 1 && self.cond_dim != 4 {
            return Err(CoreError::validation(format!(
                "cond_dim must be 4 (full) or 1 (reduced), got {}",
                self.cond_dim
            )));
        }
        Ok(())
    }

    /// Channels at resolution level `k` (0 = full resolution).
    pub fn channels_at(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Spatial divisibility the forward pass pads to.
    pub fn dim_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of all model parameters. Order is the canonical build
/// order and doubles as the initialization draw order and the checkpoint
/// tensor order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry<T> {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    fn from_entries(entries: Vec<ParamEntry<T>>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        ParamStore { entries, index }
    }

    /// Builds a store from externally produced entries, checking that names
    /// are unique and data lengths match the declared shapes.
    pub fn from_entries_checked(entries: Vec<ParamEntry<T>>) -> Result<Self> {
        for e in &entries {
            let n: usize = e.shape.iter().product();
            if e.data.len() != n {
                return Err(CoreError::shape(format!(
                    "tensor {}: {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                )));
            }
        }
        let store = ParamStore::from_entries(entries);
        if store.index.len() != store.entries.len() {
            return Err(CoreError::validation("duplicate tensor names"));
        }
        Ok(store)
    }
}

fn conv_shape(co: usize, ci: usize, k: usize) -> Vec<usize> {
    vec![co, ci, k, k, k]
}

fn push_crb(shapes: &mut Vec<(String, Vec<usize>)>, prefix: &str, ch: usize, embed: usize) {
    shapes.push((format!("{prefix}.conv_a.w"), conv_shape(ch, ch, 3)));
    shapes.push((format!("{prefix}.conv_a.b"), vec![ch]));
    shapes.push((format!("{prefix}.proj.w"), vec![ch, embed]));
    shapes.push((format!("{prefix}.proj.b"), vec![ch]));
    shapes.push((format!("{prefix}.conv_b.w"), conv_shape(ch, ch, 3)));
    shapes.push((format!("{prefix}.conv_b.b"), vec![ch]));
}

/// Canonical (name, shape) list; the single source of truth for construction,
/// initialization, parameter counting, and checkpoint validation.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = cfg.embed_dim;
    let mut shapes = Vec::new();
    shapes.push(("embed.fc1.w".into(), vec![e, cfg.cond_dim]));
    shapes.push(("embed.fc1.b".into(), vec![e]));
    shapes.push(("embed.fc2.w".into(), vec![e, e]));
    shapes.push(("embed.fc2.b".into(), vec![e]));
    shapes.push(("stem.w".into(), conv_shape(cfg.channels_at(0), cfg.in_channels, 3)));
    shapes.push(("stem.b".into(), vec![cfg.channels_at(0)]));
    for k in 0..cfg.scales - 1 {
        let ch = cfg.channels_at(k);
        push_crb(&mut shapes, &format!("enc{k}.crb0"), ch, e);
        push_crb(&mut shapes, &format!("enc{k}.crb1"), ch, e);
        shapes.push((format!("down{k}.w"), conv_shape(cfg.channels_at(k + 1), ch, 3)));
        shapes.push((format!("down{k}.b"), vec![cfg.channels_at(k + 1)]));
    }
    let mid_ch = cfg.channels_at(cfg.scales - 1);
    push_crb(&mut shapes, "mid.crb0", mid_ch, e);
    push_crb(&mut shapes, "mid.crb1", mid_ch, e);
    for k in (0..cfg.scales - 1).rev() {
        let ch = cfg.channels_at(k);
        let coarse = cfg.channels_at(k + 1);
        shapes.push((format!("up{k}.reduce.w"), conv_shape(ch, coarse, 1)));
        shapes.push((format!("up{k}.reduce.b"), vec![ch]));
        shapes.push((format!("up{k}.gate_u.w"), conv_shape(ch, 2 * ch, 1)));
        shapes.push((format!("up{k}.gate_u.b"), vec![ch]));
        shapes.push((format!("up{k}.lin_u.w"), conv_shape(ch, ch, 1)));
        shapes.push((format!("up{k}.lin_u.b"), vec![ch]));
        shapes.push((format!("up{k}.gate_s.w"), conv_shape(ch, 2 * ch, 1)));
        shapes.push((format!("up{k}.gate_s.b"), vec![ch]));
        shapes.push((format!("up{k}.lin_s.w"), conv_shape(ch, ch, 1)));
        shapes.push((format!("up{k}.lin_s.b"), vec![ch]));
        push_crb(&mut shapes, &format!("dec{k}.crb0"), ch, e);
        push_crb(&mut shapes, &format!("dec{k}.crb1"), ch, e);
    }
    shapes.push(("out.w".into(), conv_shape(cfg.out_channels, cfg.channels_at(0), 3)));
    shapes.push(("out.b".into(), vec![cfg.out_channels]));
    shapes
}

/// Total scalar parameter count for a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    param_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Initializes parameters: weight tensors draw from a uniform distribution
/// with bound sqrt(6 / fan_in) (seeded, in canonical order), biases start at
/// zero, and the output convolution is fully zero so the untrained model
/// predicts an all-zero volume.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        // Biases, the output head, and the per-block condition projections
        // start at zero: the head keeps the untrained residual at zero, and
        // neutral projections keep early activations in the well-scaled
        // range regardless of the raw condition magnitudes (field strength
        // and relaxivity are a few units, so Kaiming projections would
        // inject channel biases of ~10 and saturate every activation).
        let data = if shape.len() == 1 || name == "out.w" || name.ends_with(".proj.w") {
            vec![T::zero(); n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64c(rng.gen_range(-bound..bound)))
                .collect()
        };
        entries.push(ParamEntry { name, shape, data });
    }
    Ok(ParamStore::from_entries(entries))
}

/// Tape handles for every parameter of one forward pass.
pub struct BoundParams {
    refs: BTreeMap<String, TensorRef>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<TensorRef> {
        self.refs
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::validation(format!("unknown parameter {name}")))
    }
}

/// Registers all parameters as tape leaves. `trainable` controls gradient
/// tracking.
pub fn bind_params<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    trainable: bool,
) -> Result<BoundParams> {
    let mut refs = BTreeMap::new();
    for e in store.entries() {
        let t = tape.leaf(&e.shape, e.data.clone(), trainable)?;
        refs.insert(e.name.clone(), t);
    }
    Ok(BoundParams { refs })
}

/// Two-layer MLP embedding of the condition vector: [N, cond_dim] -> [N, embed_dim].
pub fn embed_condition<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cond: TensorRef,
) -> Result<TensorRef> {
    let h = tape.linear(cond, params.get("embed.fc1.w")?, Some(params.get("embed.fc1.b")?))?;
    let h = tape.silu(h);
    tape.linear(h, params.get("embed.fc2.w")?, Some(params.get("embed.fc2.b")?))
}

/// Conditional residual block: pre-activation convolutions with the projected
/// embedding added as a per-channel bias between them; no normalization.
pub fn crb_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    f: TensorRef,
    e: TensorRef,
) -> Result<TensorRef> {
    let a = tape.silu(f);
    let h = tape.conv3d(
        a,
        params.get(&format!("{prefix}.conv_a.w"))?,
        Some(params.get(&format!("{prefix}.conv_a.b"))?),
        1,
        1,
    )?;
    let bias = tape.linear(
        e,
        params.get(&format!("{prefix}.proj.w"))?,
        Some(params.get(&format!("{prefix}.proj.b"))?),
    )?;
    let h = tape.add_channel_bias(h, bias)?;
    let h = tape.silu(h);
    let h = tape.conv3d(
        h,
        params.get(&format!("{prefix}.conv_b.w"))?,
        Some(params.get(&format!("{prefix}.conv_b.b"))?),
        1,
        1,
    )?;
    tape.add(f, h)
}

/// Gated fusion of the upsampled path `u` and the skip path `s`:
/// sigmoid-gated 1x1x1 projections of both, gates driven by their
/// concatenation.
pub fn gated_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    u: TensorRef,
    s: TensorRef,
) -> Result<TensorRef> {
    let cat = tape.concat_channels(u, s)?;
    let gu = tape.conv3d(
        cat,
        params.get(&format!("{prefix}.gate_u.w"))?,
        Some(params.get(&format!("{prefix}.gate_u.b"))?),
        1,
        0,
    )?;
    let gu = tape.sigmoid(gu);
    let gs = tape.conv3d(
        cat,
        params.get(&format!("{prefix}.gate_s.w"))?,
        Some(params.get(&format!("{prefix}.gate_s.b"))?),
        1,
        0,
    )?;
    let gs = tape.sigmoid(gs);
    let lu = tape.conv3d(
        u,
        params.get(&format!("{prefix}.lin_u.w"))?,
        Some(params.get(&format!("{prefix}.lin_u.b"))?),
        1,
        0,
    )?;
    let ls = tape.conv3d(
        s,
        params.get(&format!("{prefix}.lin_s.w"))?,
        Some(params.get(&format!("{prefix}.lin_s.b"))?),
        1,
        0,
    )?;
    let a = tape.mul(gu, lu)?;
    let b = tape.mul(gs, ls)?;
    tape.add(a, b)
}

/// Full forward pass. Inputs are three aligned [N, 1, D, H, W] volumes and a
/// [N, cond_dim] condition matrix; output is [N, out_channels, D, H, W] with
/// nonnegative entries. Spatial dims not divisible by 2^(scales-1) are
/// reflect-padded internally and cropped on output.
pub fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &BoundParams,
    z_ld: TensorRef,
    x_ld: TensorRef,
    s_ld: TensorRef,
    cond: TensorRef,
) -> Result<TensorRef> {
    cfg.validate()?;
    if cfg.in_channels != 3 {
        return Err(CoreError::validation(
            "unet_forward takes exactly three input volumes; in_channels must be 3",
        ));
    }
    let zs = tape.shape(z_ld).to_vec();
    if zs.len() != 5 || zs[1] != 1 {
        return Err(CoreError::shape(format!(
            "inputs must be [N, 1, D, H, W], got {zs:?}"
        )));
    }
    if tape.shape(x_ld) != zs || tape.shape(s_ld) != zs {
        return Err(CoreError::shape("input volumes must share one shape"));
    }
    let cs = tape.shape(cond);
    if cs != [zs[0], cfg.cond_dim] {
        return Err(CoreError::shape(format!(
            "condition must be [N, {}], got {cs:?}",
            cfg.cond_dim
        )));
    }

    let zx = tape.concat_channels(z_ld, x_ld)?;
    let mut f = tape.concat_channels(zx, s_ld)?;

    let m = cfg.dim_multiple();
    let orig = [zs[2], zs[3], zs[4]];
    let extra = [
        (m - orig[0] % m) % m,
        (m - orig[1] % m) % m,
        (m - orig[2] % m) % m,
    ];
    let padded = extra.iter().any(|&e| e > 0);
    if padded {
        for a in 0..3 {
            if extra[a] >= orig[a] {
                return Err(CoreError::validation(format!(
                    "spatial extent {} too small to pad to a multiple of {m}",
                    orig[a]
                )));
            }
        }
        f = tape.pad_reflect_high(f, extra)?;
    }

    let e = embed_condition(tape, params, cond)?;
    f = tape.conv3d(f, params.get("stem.w")?, Some(params.get("stem.b")?), 1, 1)?;

    let mut skips = Vec::with_capacity(cfg.scales - 1);
    for k in 0..cfg.scales - 1 {
        f = crb_forward(tape, params, &format!("enc{k}.crb0"), f, e)?;
        f = crb_forward(tape, params, &format!("enc{k}.crb1"), f, e)?;
        skips.push(f);
        f = tape.conv3d(
            f,
            params.get(&format!("down{k}.w"))?,
            Some(params.get(&format!("down{k}.b"))?),
            1,
            1,
        )?;
        f = tape.blurpool3d(f)?;
    }

    f = crb_forward(tape, params, "mid.crb0", f, e)?;
    f = crb_forward(tape, params, "mid.crb1", f, e)?;

    for k in (0..cfg.scales - 1).rev() {
        let up = tape.upsample_trilinear(f)?;
        let u = tape.conv3d(
            up,
            params.get(&format!("up{k}.reduce.w"))?,
            Some(params.get(&format!("up{k}.reduce.b"))?),
            1,
            0,
        )?;
        f = gated_fuse(tape, params, &format!("up{k}"), u, skips[k])?;
        f = crb_forward(tape, params, &format!("dec{k}.crb0"), f, e)?;
        f = crb_forward(tape, params, &format!("dec{k}.crb1"), f, e)?;
    }

    let y = tape.conv3d(f, params.get("out.w")?, Some(params.get("out.b")?), 1, 1)?;
    let mut y = tape.relu(y);
    if padded {
        y = tape.crop_spatial(y, orig)?;
    }
    Ok(y)
}

/// Theoretical receptive-field radius in input voxels, from the layer
/// recurrence: a 3-cubed convolution at level stride `s` adds `s`; the
/// blur-pool adds `2s` before halving; trilinear upsampling adds the coarse
/// spacing when returning to a finer level.
pub fn receptive_field_radius(cfg: &ModelConfig) -> usize {
    let mut r = 1; // stem
    let mut scale = 1;
    for _ in 0..cfg.scales - 1 {
        r += 4 * scale; // two CRBs, two convolutions each
        r += scale; // widening convolution
        r += 2 * scale; // blur taps
        scale *= 2;
    }
    r += 4 * scale; // bottleneck CRBs
    for _ in 0..cfg.scales - 1 {
        r += scale; // interpolation reads one coarse neighbor
        scale /= 2;
        r += 4 * scale; // two CRBs
    }
    r + 1 // output convolution
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            scales: 2,
            base_channels: 2,
            embed_dim: 4,
            in_channels: 3,
            out_channels: 1,
            cond_dim: 1,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Overwrites every tensor (including the zero-initialized output conv)
    /// with small random values so the network output is generically nonzero.
    fn randomize<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..store.len() {
            let e = store.entry_mut(i);
            for v in e.data.iter_mut() {
                *v = T::from_f64c(rng.gen_range(-scale..scale));
            }
        }
    }

    fn forward_with<T: Scalar>(
        cfg: &ModelConfig,
        store: &ParamStore<T>,
        dims: [usize; 3],
        cond: Vec<T>,
        input_seed: u64,
    ) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
        let vol = dims[0] * dims[1] * dims[2];
        let shape = [1usize, 1, dims[0], dims[1], dims[2]];
        let mut tape = Tape::<T>::new();
        let mk = |tape: &mut Tape<T>, rng: &mut ChaCha8Rng| {
            let data: Vec<T> = (0..vol).map(|_| T::from_f64c(rng.gen_range(-1.0..1.0))).collect();
            tape.leaf(&shape, data, false).unwrap()
        };
        let z = mk(&mut tape, &mut rng);
        let x = mk(&mut tape, &mut rng);
        let s = mk(&mut tape, &mut rng);
        let c = tape.leaf(&[1, cond.len()], cond, false).unwrap();
        let bp = bind_params(&mut tape, store, false).unwrap();
        let y = unet_forward(&mut tape, cfg, &bp, z, x, s, c).unwrap();
        assert_eq!(tape.shape(y), &[1, cfg.out_channels, dims[0], dims[1], dims[2]]);
        tape.value(y).to_vec()
    }

    #[test]
    fn test_param_count_scales1_hand_computed() {
        let cfg = ModelConfig {
            scales: 1,
            base_channels: 4,
            embed_dim: 8,
            in_channels: 3,
            out_channels: 1,
            cond_dim: 4,
        };
        // embed: (8*4 + 8) + (8*8 + 8) = 112
        // stem: 4*3*27 + 4 = 328
        // each bottleneck CRB: (4*4*27 + 4) + (4*8 + 4) + (4*4*27 + 4) = 908
        // out: 1*4*27 + 1 = 109
        let hand = 112 + 328 + 2 * 908 + 109;
        assert_eq!(count_params(&cfg), hand);
    }

    #[test]
    fn test_param_count_deterministic_and_quadratic_scaling() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            base_channels: 2 * a.base_channels,
            ..a
        };
        assert_eq!(count_params(&a), count_params(&a));
        let weights = |cfg: &ModelConfig| -> usize {
            param_shapes(cfg)
                .iter()
                .filter(|(_, s)| s.len() > 1)
                .map(|(_, s)| s.iter().product::<usize>())
                .sum()
        };
        let ratio = weights(&b) as f64 / weights(&a) as f64;
        assert!(
            (ratio - 4.0).abs() / 4.0 < 0.05,
            "weight count ratio {ratio} not ~4"
        );
    }

    #[test]
    fn test_store_matches_declared_shapes() {
        let cfg = micro_cfg();
        let store = init_params::<f32>(&cfg, 7).unwrap();
        let shapes = param_shapes(&cfg);
        assert_eq!(store.len(), shapes.len());
        for (e, (name, shape)) in store.entries().iter().zip(&shapes) {
            assert_eq!(&e.name, name);
            assert_eq!(&e.shape, shape);
            assert_eq!(e.data.len(), shape.iter().product::<usize>());
        }
        assert_eq!(store.scalar_count(), count_params(&cfg));
        // Distinct names.
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn test_init_is_seed_deterministic() {
        let cfg = micro_cfg();
        let a = init_params::<f64>(&cfg, 42).unwrap();
        let b = init_params::<f64>(&cfg, 42).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.data, y.data);
        }
        let c = init_params::<f64>(&cfg, 43).unwrap();
        let differs = a
            .entries()
            .iter()
            .zip(c.entries())
            .any(|(x, y)| x.data != y.data);
        assert!(differs);
    }

    #[test]
    fn test_zero_initialized_output() {
        let cfg = micro_cfg();
        let store = init_params::<f64>(&cfg, 3).unwrap();
        let y = forward_with(&cfg, &store, [4, 4, 4], vec![0.37], 11);
        assert!(y.iter().all(|&v| v == 0.0), "untrained output must be zero");
    }

    #[test]
    fn test_output_nonnegative_for_random_params() {
        let cfg = micro_cfg();
        for seed in 0..5 {
            let mut store = init_params::<f64>(&cfg, seed).unwrap();
            randomize(&mut store, 100 + seed, 0.5);
            let y = forward_with(&cfg, &store, [4, 4, 4], vec![0.2], seed);
            assert!(y.iter().all(|&v| v >= 0.0));
            assert!(y.iter().any(|&v| v > 0.0), "generic output should be nonzero");
        }
    }

    #[test]
    fn test_shape_preserved_with_internal_padding() {
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 5).unwrap();
        randomize(&mut store, 55, 0.4);
        // 5x7x6 is not divisible by 2; forward pads and crops back.
        let y = forward_with(&cfg, &store, [5, 7, 6], vec![0.1], 9);
        assert_eq!(y.len(), 5 * 7 * 6);
    }

    #[test]
    fn test_distinct_conditions_change_output() {
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 8).unwrap();
        randomize(&mut store, 88, 0.4);
        let y1 = forward_with(&cfg, &store, [4, 4, 4], vec![0.1], 21);
        let y2 = forward_with(&cfg, &store, [4, 4, 4], vec![0.9], 21);
        let diff: f64 = y1.iter().zip(&y2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "condition must influence the output");
    }

    #[test]
    fn test_distinct_conditions_distinct_embeddings() {
        let cfg = ModelConfig { cond_dim: 4, ..micro_cfg() };
        let mut store = init_params::<f64>(&cfg, 9).unwrap();
        randomize(&mut store, 99, 0.4);
        let mut tape = Tape::<f64>::new();
        let bp = bind_params(&mut tape, &store, false).unwrap();
        let c = tape
            .leaf(&[2, 4], vec![0.33, 3.0, 4.5, 0.05, 0.10, 3.0, 4.5, 0.05], false)
            .unwrap();
        let e = embed_condition(&mut tape, &bp, c).unwrap();
        let v = tape.value(e);
        let (e1, e2) = v.split_at(cfg.embed_dim);
        let dist: f64 = e1.iter().zip(e2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn test_embedding_with_zero_weights_is_bias() {
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 1).unwrap();
        for i in 0..store.len() {
            let e = store.entry_mut(i);
            if e.name == "embed.fc1.w" || e.name == "embed.fc2.w" {
                e.data.iter_mut().for_each(|v| *v = 0.0);
            }
            if e.name == "embed.fc2.b" {
                for (j, v) in e.data.iter_mut().enumerate() {
                    *v = j as f64 + 1.0;
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let bp = bind_params(&mut tape, &store, false).unwrap();
        let c = tape.leaf(&[2, 1], vec![0.2, 0.9], false).unwrap();
        let e = embed_condition(&mut tape, &bp, c).unwrap();
        let v = tape.value(e);
        for row in 0..2 {
            for j in 0..cfg.embed_dim {
                assert!((v[row * cfg.embed_dim + j] - (j as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_crb_identity_when_zeroed() {
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 2).unwrap();
        for i in 0..store.len() {
            let e = store.entry_mut(i);
            if e.name.starts_with("enc0.crb0") {
                e.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::<f64>::new();
        let bp = bind_params(&mut tape, &store, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fdata = randn(&mut rng, 2 * 2 * 64);
        let f = tape.leaf(&[2, 2, 4, 4, 4], fdata.clone(), false).unwrap();
        let e = tape.leaf(&[2, 4], randn(&mut rng, 8), false).unwrap();
        let out = crb_forward(&mut tape, &bp, "enc0.crb0", f, e).unwrap();
        assert_eq!(tape.value(out), &fdata[..]);
    }

    #[test]
    fn test_crb_embedding_bias_is_spatially_uniform() {
        // conv_a = 0 and conv_b = identity kernel: the residual equals
        // silu(projected embedding bias), constant over space per channel.
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 6).unwrap();
        for i in 0..store.len() {
            let e = store.entry_mut(i);
            if e.name == "enc0.crb0.conv_a.w" || e.name == "enc0.crb0.conv_a.b" {
                e.data.iter_mut().for_each(|v| *v = 0.0);
            }
            if e.name == "enc0.crb0.conv_b.w" {
                e.data.iter_mut().for_each(|v| *v = 0.0);
                // Center tap of channel c -> channel c.
                let ch = e.shape[0];
                for c in 0..ch {
                    let idx = ((c * ch + c) * 3 + 1) * 3 * 3 + 1 * 3 + 1;
                    e.data[idx] = 1.0;
                }
            }
            if e.name == "enc0.crb0.conv_b.b" {
                e.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::<f64>::new();
        let bp = bind_params(&mut tape, &store, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fdata = randn(&mut rng, 2 * 64);
        let f = tape.leaf(&[1, 2, 4, 4, 4], fdata.clone(), false).unwrap();
        let e = tape.leaf(&[1, 4], randn(&mut rng, 4), false).unwrap();
        let out = crb_forward(&mut tape, &bp, "enc0.crb0", f, e).unwrap();
        let v = tape.value(out);
        // But: the identity kernel has zero padding, so edge voxels see the
        // center tap only — output - input is exactly the silu'd bias at every
        // voxel, because a center-tap-only kernel is padding-independent.
        for c in 0..2 {
            let delta0 = v[c * 64] - fdata[c * 64];
            for j in 0..64 {
                let d = v[c * 64 + j] - fdata[c * 64 + j];
                assert!((d - delta0).abs() < 1e-12, "channel bias not uniform");
            }
        }
    }

    #[test]
    fn test_gated_fuse_saturated_gate_selects_branch() {
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 12).unwrap();
        for i in 0..store.len() {
            let e = store.entry_mut(i);
            match e.name.as_str() {
                // Open the u-gate hard, close the s-gate hard.
                "up0.gate_u.b" => e.data.iter_mut().for_each(|v| *v = 50.0),
                "up0.gate_s.b" => e.data.iter_mut().for_each(|v| *v = -50.0),
                "up0.gate_u.w" | "up0.gate_s.w" => e.data.iter_mut().for_each(|v| *v = 0.0),
                // lin_u = identity, bias 0.
                "up0.lin_u.w" => {
                    e.data.iter_mut().for_each(|v| *v = 0.0);
                    let ch = e.shape[0];
                    for c in 0..ch {
                        e.data[c * ch + c] = 1.0;
                    }
                }
                "up0.lin_u.b" => e.data.iter_mut().for_each(|v| *v = 0.0),
                _ => {}
            }
        }
        let mut tape = Tape::<f64>::new();
        let bp = bind_params(&mut tape, &store, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let udata = randn(&mut rng, 2 * 27);
        let u = tape.leaf(&[1, 2, 3, 3, 3], udata.clone(), false).unwrap();
        let s = tape.leaf(&[1, 2, 3, 3, 3], randn(&mut rng, 54), false).unwrap();
        let out = gated_fuse(&mut tape, &bp, "up0", u, s).unwrap();
        for (a, b) in tape.value(out).iter().zip(&udata) {
            assert!((a - b).abs() < 1e-9, "saturated gate must pass u through");
        }
    }

    #[test]
    fn test_full_model_gradient_check() {
        // Micro network, 4-cubed input, double precision; checks a fixed
        // subset of entries in every parameter tensor at < 1e-4 relative.
        let cfg = micro_cfg();
        let mut store = init_params::<f64>(&cfg, 21).unwrap();
        randomize(&mut store, 210, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let vol = 64;
        let shape = [1usize, 1, 4, 4, 4];
        let z = randn(&mut rng, vol);
        let x = randn(&mut rng, vol);
        let s = randn(&mut rng, vol);
        let cond = vec![0.4];
        let wsum = randn(&mut rng, vol);

        let eval = |st: &ParamStore<f64>| -> (f64, Option<Vec<Vec<f64>>>) {
            let mut tape = Tape::<f64>::new();
            let zt = tape.leaf(&shape, z.clone(), false).unwrap();
            let xt = tape.leaf(&shape, x.clone(), false).unwrap();
            let st_ = tape.leaf(&shape, s.clone(), false).unwrap();
            let ct = tape.leaf(&[1, 1], cond.clone(), false).unwrap();
            let bp = bind_params(&mut tape, st, true).unwrap();
            let y = unet_forward(&mut tape, &cfg, &bp, zt, xt, st_, ct).unwrap();
            let wt = tape.leaf(&[1, 1, 4, 4, 4], wsum.clone(), false).unwrap();
            let p = tape.mul(y, wt).unwrap();
            let loss = tape.sum(p);
            tape.backward(loss).unwrap();
            let grads = st
                .entries()
                .iter()
                .map(|e| tape.grad(bp.get(&e.name).unwrap()).unwrap().to_vec())
                .collect();
            (tape.value(loss)[0], Some(grads))
        };
        let (_, grads) = eval(&store);
        let grads = grads.unwrap();

        let value_only = |st: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let zt = tape.leaf(&shape, z.clone(), false).unwrap();
            let xt = tape.leaf(&shape, x.clone(), false).unwrap();
            let st_ = tape.leaf(&shape, s.clone(), false).unwrap();
            let ct = tape.leaf(&[1, 1], cond.clone(), false).unwrap();
            let bp = bind_params(&mut tape, st, false).unwrap();
            let y = unet_forward(&mut tape, &cfg, &bp, zt, xt, st_, ct).unwrap();
            let wt = tape.leaf(&[1, 1, 4, 4, 4], wsum.clone(), false).unwrap();
            let p = tape.mul(y, wt).unwrap();
            let loss = tape.sum(p);
            tape.value(loss)[0]
        };

        let h = 1e-5;
        let mut checked = 0usize;
        let snapshot = store.clone();
        for (ti, entry) in snapshot.entries().iter().enumerate() {
            let n = entry.data.len();
            let picks: Vec<usize> = if n <= 4 {
                (0..n).collect()
            } else {
                (0..4).map(|j| j * (n - 1) / 3).collect()
            };
            for &pi in &picks {
                let orig = store.entries()[ti].data[pi];
                store.entry_mut(ti).data[pi] = orig + h;
                let fp = value_only(&store);
                store.entry_mut(ti).data[pi] = orig - h;
                let fm = value_only(&store);
                store.entry_mut(ti).data[pi] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[ti][pi];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{} [{}]: analytic {an} vs fd {fd}",
                    entry.name,
                    pi
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn test_receptive_field_radius_recurrence() {
        let mk = |scales| ModelConfig { scales, ..ModelConfig::default() };
        assert_eq!(receptive_field_radius(&mk(1)), 6);
        assert_eq!(receptive_field_radius(&mk(2)), 23);
        assert_eq!(receptive_field_radius(&mk(3)), 57);
        assert_eq!(receptive_field_radius(&mk(4)), 125);
    }

    #[test]
    fn test_locality_respects_receptive_field() {
        // Four-level network on a long thin volume: flipping one input voxel
        // must leave voxels beyond the receptive-field radius bit-identical.
        let cfg = ModelConfig {
            scales: 4,
            base_channels: 1,
            embed_dim: 2,
            in_channels: 3,
            out_channels: 1,
            cond_dim: 1,
        };
        let mut store = init_params::<f32>(&cfg, 31).unwrap();
        randomize(&mut store, 310, 0.4);
        let dims = [16usize, 16, 288];
        let vol: usize = dims.iter().product();
        let shape = [1usize, 1, dims[0], dims[1], dims[2]];
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let zbase: Vec<f32> = (0..vol).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x: Vec<f32> = (0..vol).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let s: Vec<f32> = (0..vol).map(|_| rng.gen_range(0.5f32..1.5)).collect();

        let run = |zdata: Vec<f32>| -> Vec<f32> {
            let mut tape = Tape::<f32>::new();
            let zt = tape.leaf(&shape, zdata, false).unwrap();
            let xt = tape.leaf(&shape, x.clone(), false).unwrap();
            let st = tape.leaf(&shape, s.clone(), false).unwrap();
            let ct = tape.leaf(&[1, 1], vec![0.3], false).unwrap();
            let bp = bind_params(&mut tape, &store, false).unwrap();
            let y = unet_forward(&mut tape, &cfg, &bp, zt, xt, st, ct).unwrap();
            tape.value(y).to_vec()
        };

        let base = run(zbase.clone());
        let impulse_x = 40usize;
        let mut zmod = zbase.clone();
        let idx = (8 * dims[1] + 8) * dims[2] + impulse_x;
        zmod[idx] += 10.0;
        let out = run(zmod);

        let radius = receptive_field_radius(&cfg);
        let mut changed_max_dist = 0usize;
        let mut any_changed = false;
        for zd in 0..dims[0] {
            for yh in 0..dims[1] {
                for xw in 0..dims[2] {
                    let i = (zd * dims[1] + yh) * dims[2] + xw;
                    if base[i].to_bits() != out[i].to_bits() {
                        any_changed = true;
                        let dist = xw.abs_diff(impulse_x);
                        changed_max_dist = changed_max_dist.max(dist);
                        assert!(
                            dist <= radius,
                            "voxel at axis distance {dist} changed; radius {radius}"
                        );
                    }
                }
            }
        }
        assert!(any_changed, "impulse must influence nearby outputs");
        assert!(changed_max_dist > 0);
    }

    #[test]
    fn test_validation_errors() {
        let bad = ModelConfig { cond_dim: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { scales: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());

        // Condition length mismatch at forward time.
        let cfg = micro_cfg();
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&[1, 1, 4, 4, 4], vec![0.0; 64], false).unwrap();
        let c = tape.leaf(&[1, 2], vec![0.0, 1.0], false).unwrap();
        let bp = bind_params(&mut tape, &store, false).unwrap();
        let err = unet_forward(&mut tape, &cfg, &bp, z, z, z, c).unwrap_err();
        assert!(err.to_string().contains("condition"));
    }
}
