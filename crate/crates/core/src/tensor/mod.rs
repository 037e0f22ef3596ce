//! Minimal reverse-mode autodiff over dense tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass; operations
//! append nodes and [`Tape::backward`] walks the recorded program in reverse,
//! accumulating gradients. Tensors are row-major with convolutional data in
//! N x C x D x H x W order. The element type is generic over [`Scalar`]
//! (f32 for training and inference, f64 for gradient verification).
//!
//! Forward and backward execute single-threaded in program order, so results
//! are bit-reproducible for a fixed program and inputs. Repeated backward
//! calls accumulate into existing gradients.

mod conv;
mod optim;
mod pool;

pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};

use crate::error::{CoreError, Result};

/// Element type of a tape: IEEE-754 single or double precision.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    /// Appends this value to `buf` in little-endian byte order.
    fn write_le(self, buf: &mut Vec<u8>);
    /// Reads one value from a little-endian byte slice of exactly this
    /// type's width.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
    #[inline]
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
    #[inline]
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_code(c: u8) -> Option<Dtype> {
        match c {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Silu,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BlurPool3d {
        x: usize,
    },
    UpsampleTrilinear {
        x: usize,
    },
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddChannelBias {
        x: usize,
        bias: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    PadReflectHigh {
        x: usize,
        extra: [usize; 3],
    },
    CropSpatial {
        x: usize,
        keep: [usize; 3],
    },
    WeightedHuber {
        pred: usize,
        target: Vec<T>,
        weight: Vec<T>,
        margin: usize,
        eps: f64,
        norm: f64,
    },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    if shape.len() != 5 {
        return Err(CoreError::shape(format!(
            "{what} expects a 5-D (N,C,D,H,W) tensor, got shape {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2], shape[3], shape[4]])
}

/// The recorded program of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorRef {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<TensorRef> {
        if numel(shape) != data.len() {
            return Err(CoreError::shape(format!(
                "leaf data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.0].data
    }

    /// Gradient of the last backward pass, if this tensor participated.
    pub fn grad(&self, t: TensorRef) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn req(&self, t: usize) -> bool {
        self.nodes[t].requires_grad
    }

    /// 3-D convolution with zero padding.
    ///
    /// `x`: [N, Ci, D, H, W], `w`: [Co, Ci, kd, kh, kw], optional bias [Co].
    pub fn conv3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let xs = dims5(self.shape(x), "conv3d input")?;
        let ws = dims5(self.shape(w), "conv3d weight")?;
        if xs[1] != ws[1] {
            return Err(CoreError::shape(format!(
                "conv3d channel mismatch: input {} vs weight {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(CoreError::validation("conv3d stride must be >= 1"));
        }
        if let Some(bb) = b {
            let bs = self.shape(bb);
            if bs != [ws[0]] {
                return Err(CoreError::shape(format!(
                    "conv3d bias shape {bs:?} does not match {} output channels",
                    ws[0]
                )));
            }
        }
        for a in 0..3 {
            if xs[2 + a] + 2 * pad < ws[2 + a] {
                return Err(CoreError::shape(format!(
                    "conv3d kernel {:?} larger than padded input {:?}",
                    &ws[2..],
                    &xs[2..]
                )));
            }
        }
        let (data, oshape) = conv::forward(
            self.value(x),
            xs,
            self.value(w),
            ws,
            b.map(|bb| self.value(bb)),
            stride,
            pad,
        );
        let requires = self.req(x.0) || self.req(w.0) || b.map(|bb| self.req(bb.0)).unwrap_or(false);
        Ok(self.push(
            oshape.to_vec(),
            data,
            requires,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.map(|bb| bb.0),
                stride,
                pad,
            },
        ))
    }

    /// Anti-aliased downsampling: separable binomial blur [1,4,6,4,1]/16 per
    /// axis with clamp-to-edge padding, then stride-2 subsampling.
    pub fn blurpool3d(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = dims5(self.shape(x), "blurpool3d")?;
        let (data, oshape) = pool::blurpool_forward(self.value(x), xs);
        let requires = self.req(x.0);
        Ok(self.push(oshape.to_vec(), data, requires, Op::BlurPool3d { x: x.0 }))
    }

    /// Factor-2 trilinear upsampling with half-voxel center alignment
    /// (`align_corners = false` convention) and edge clamping.
    pub fn upsample_trilinear(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = dims5(self.shape(x), "upsample_trilinear")?;
        let (data, oshape) = pool::upsample_forward(self.value(x), xs);
        let requires = self.req(x.0);
        Ok(self.push(oshape.to_vec(), data, requires, Op::UpsampleTrilinear { x: x.0 }))
    }

    fn unary(&mut self, x: TensorRef, kind: UnaryKind) -> TensorRef {
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| match kind {
                UnaryKind::Silu => v * sigmoid_scalar(v),
                UnaryKind::Sigmoid => sigmoid_scalar(v),
                UnaryKind::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let requires = self.req(x.0);
        self.push(shape, data, requires, Op::Unary { x: x.0, kind })
    }

    pub fn silu(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, UnaryKind::Sigmoid)
    }

    /// Rectifier max(x, 0). The backward pass uses subgradient 1 at x = 0 so
    /// zero-initialized layers directly upstream are trainable.
    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, UnaryKind::Relu)
    }

    /// Fully connected layer: `x` [N, K] times `w` [M, K] (+ bias [M]) -> [N, M].
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: Option<TensorRef>) -> Result<TensorRef> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(CoreError::shape(format!(
                "linear expects x [N,K] and w [M,K], got {xs:?} and {ws:?}"
            )));
        }
        let (n, k) = (xs[0], xs[1]);
        let m = ws[0];
        if let Some(bb) = b {
            if self.shape(bb) != [m] {
                return Err(CoreError::shape("linear bias shape mismatch"));
            }
        }
        let mut out = vec![T::zero(); n * m];
        {
            use ndarray::ArrayView2;
            let xv = ArrayView2::from_shape((n, k), self.value(x)).unwrap();
            let wv = ArrayView2::from_shape((m, k), self.value(w)).unwrap();
            let mut ov = ndarray::ArrayViewMut2::from_shape((n, m), &mut out[..]).unwrap();
            ndarray::linalg::general_mat_mul(T::one(), &xv, &wv.t(), T::zero(), &mut ov);
        }
        if let Some(bb) = b {
            let bias = self.value(bb).to_vec();
            for row in out.chunks_exact_mut(m) {
                for (o, &bv) in row.iter_mut().zip(&bias) {
                    *o = *o + bv;
                }
            }
        }
        let requires = self.req(x.0) || self.req(w.0) || b.map(|bb| self.req(bb.0)).unwrap_or(false);
        Ok(self.push(
            vec![n, m],
            out,
            requires,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|bb| bb.0),
            },
        ))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let requires = self.req(a.0) || self.req(b.0);
        Ok(self.push(shape, data, requires, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let requires = self.req(a.0) || self.req(b.0);
        Ok(self.push(shape, data, requires, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: TensorRef, c: T) -> TensorRef {
        let data: Vec<T> = self.value(x).iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let requires = self.req(x.0);
        self.push(shape, data, requires, Op::Scale { x: x.0, c })
    }

    /// Adds a per-sample, per-channel bias [N, C] to a feature map [N, C, D, H, W].
    pub fn add_channel_bias(&mut self, x: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let xs = dims5(self.shape(x), "add_channel_bias")?;
        let bs = self.shape(bias);
        if bs != [xs[0], xs[1]] {
            return Err(CoreError::shape(format!(
                "bias shape {bs:?} does not match [N, C] = [{}, {}]",
                xs[0], xs[1]
            )));
        }
        let vol = xs[2] * xs[3] * xs[4];
        let mut data = self.value(x).to_vec();
        let bv = self.value(bias).to_vec();
        for (chunk, &b) in data.chunks_exact_mut(vol).zip(&bv) {
            for v in chunk {
                *v = *v + b;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let requires = self.req(x.0) || self.req(bias.0);
        Ok(self.push(
            shape,
            data,
            requires,
            Op::AddChannelBias {
                x: x.0,
                bias: bias.0,
            },
        ))
    }

    /// Concatenates two feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let sa = dims5(self.shape(a), "concat_channels")?;
        let sb = dims5(self.shape(b), "concat_channels")?;
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(CoreError::shape(format!(
                "concat_channels mismatch: {sa:?} vs {sb:?}"
            )));
        }
        let vol = sa[2] * sa[3] * sa[4];
        let (ca, cb) = (sa[1], sb[1]);
        let mut data = Vec::with_capacity(sa[0] * (ca + cb) * vol);
        for n in 0..sa[0] {
            data.extend_from_slice(&self.value(a)[n * ca * vol..(n + 1) * ca * vol]);
            data.extend_from_slice(&self.value(b)[n * cb * vol..(n + 1) * cb * vol]);
        }
        let shape = vec![sa[0], ca + cb, sa[2], sa[3], sa[4]];
        let requires = self.req(a.0) || self.req(b.0);
        Ok(self.push(shape, data, requires, Op::ConcatChannels { a: a.0, b: b.0 }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let mut acc = 0.0f64;
        for &v in self.value(x) {
            acc += v.to_f64c();
        }
        let requires = self.req(x.0);
        self.push(vec![], vec![T::from_f64c(acc)], requires, Op::Sum { x: x.0 })
    }

    /// Pads the three spatial axes at the high side by reflection
    /// (mirror without repeating the edge voxel). `extra[a] < dim[a]` required.
    pub fn pad_reflect_high(&mut self, x: TensorRef, extra: [usize; 3]) -> Result<TensorRef> {
        let xs = dims5(self.shape(x), "pad_reflect_high")?;
        for a in 0..3 {
            if extra[a] >= xs[2 + a] {
                return Err(CoreError::shape(format!(
                    "reflect padding {} must be smaller than the axis extent {}",
                    extra[a],
                    xs[2 + a]
                )));
            }
        }
        let od = [xs[2] + extra[0], xs[3] + extra[1], xs[4] + extra[2]];
        let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
        let mut data = Vec::with_capacity(xs[0] * xs[1] * od[0] * od[1] * od[2]);
        let src = self.value(x);
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        for nc in 0..xs[0] * xs[1] {
            let base = nc * d * h * w;
            for zd in 0..od[0] {
                let sz = mirror(zd, d);
                for yh in 0..od[1] {
                    let sy = mirror(yh, h);
                    let row = base + (sz * h + sy) * w;
                    for xw in 0..od[2] {
                        data.push(src[row + mirror(xw, w)]);
                    }
                }
            }
        }
        let shape = vec![xs[0], xs[1], od[0], od[1], od[2]];
        let requires = self.req(x.0);
        Ok(self.push(shape, data, requires, Op::PadReflectHigh { x: x.0, extra }))
    }

    /// Keeps the leading `keep` voxels of each spatial axis.
    pub fn crop_spatial(&mut self, x: TensorRef, keep: [usize; 3]) -> Result<TensorRef> {
        let xs = dims5(self.shape(x), "crop_spatial")?;
        for a in 0..3 {
            if keep[a] == 0 || keep[a] > xs[2 + a] {
                return Err(CoreError::shape(format!(
                    "crop {} out of range for axis extent {}",
                    keep[a],
                    xs[2 + a]
                )));
            }
        }
        let src = self.value(x);
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        let mut data = Vec::with_capacity(xs[0] * xs[1] * keep[0] * keep[1] * keep[2]);
        for nc in 0..xs[0] * xs[1] {
            let base = nc * d * h * w;
            for zd in 0..keep[0] {
                for yh in 0..keep[1] {
                    let row = base + (zd * h + yh) * w;
                    data.extend_from_slice(&src[row..row + keep[2]]);
                }
            }
        }
        let shape = vec![xs[0], xs[1], keep[0], keep[1], keep[2]];
        let requires = self.req(x.0);
        Ok(self.push(shape, data, requires, Op::CropSpatial { x: x.0, keep }))
    }

    /// Weighted Huber loss restricted to voxels at least `margin` away from
    /// every patch face, mean-reduced over counted voxels and batch.
    ///
    /// `target` and `weight` are constants with the prediction's shape. The
    /// pointwise distance is quadratic (`r^2/2`) for `|r| <= eps`, linear
    /// (`eps*(|r| - eps/2)`) beyond.
    pub fn weighted_huber(
        &mut self,
        pred: TensorRef,
        target: &[T],
        weight: &[T],
        margin: usize,
        eps: f64,
    ) -> Result<TensorRef> {
        let ps = dims5(self.shape(pred), "weighted_huber")?;
        let n = numel(self.shape(pred));
        if target.len() != n || weight.len() != n {
            return Err(CoreError::shape(format!(
                "target/weight length {}/{} does not match prediction ({n})",
                target.len(),
                weight.len()
            )));
        }
        if !(eps > 0.0) {
            return Err(CoreError::validation("huber eps must be positive"));
        }
        let (d, h, w) = (ps[2], ps[3], ps[4]);
        for (axis, &ext) in [d, h, w].iter().enumerate() {
            if 2 * margin >= ext {
                return Err(CoreError::validation(format!(
                    "margin {margin} leaves no counted voxels on axis {axis} of extent {ext}"
                )));
            }
        }
        let counted = (d - 2 * margin) * (h - 2 * margin) * (w - 2 * margin);
        let norm = (ps[0] * counted) as f64;
        let mut acc = 0.0f64;
        let pv = self.value(pred);
        let vol = d * h * w;
        for nc in 0..ps[0] * ps[1] {
            let base = nc * vol;
            for zd in margin..d - margin {
                for yh in margin..h - margin {
                    let row = base + (zd * h + yh) * w;
                    for xw in margin..w - margin {
                        let i = row + xw;
                        let r = (pv[i] - target[i]).to_f64c();
                        let dist = if r.abs() <= eps {
                            0.5 * r * r
                        } else {
                            eps * (r.abs() - 0.5 * eps)
                        };
                        acc += weight[i].to_f64c() * dist;
                    }
                }
            }
        }
        let value = T::from_f64c(acc / norm);
        let requires = self.req(pred.0);
        Ok(self.push(
            vec![],
            vec![value],
            requires,
            Op::WeightedHuber {
                pred: pred.0,
                target: target.to_vec(),
                weight: weight.to_vec(),
                margin,
                eps,
                norm,
            },
        ))
    }

    fn ensure_grad(&mut self, idx: usize) {
        if self.nodes[idx].grad.is_none() {
            let n = self.nodes[idx].data.len();
            self.nodes[idx].grad = Some(vec![T::zero(); n]);
        }
    }

    fn add_grad(&mut self, idx: usize, contribution: Vec<T>) {
        debug_assert_eq!(contribution.len(), self.nodes[idx].data.len());
        match self.nodes[idx].grad.as_mut() {
            // First contribution: adopt the buffer instead of zero-filling
            // a fresh one and adding into it.
            None => self.nodes[idx].grad = Some(contribution),
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(contribution) {
                    *gv = *gv + c;
                }
            }
        }
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls (intermediate gradients are recomputed each pass).
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(CoreError::validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for i in 0..=loss.0 {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = None;
            }
        }
        self.ensure_grad(loss.0);
        {
            let g = self.nodes[loss.0].grad.as_mut().unwrap();
            g[0] = g[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            // (parent index, contribution) pairs computed without mutation.
            let contribs: Vec<(usize, Vec<T>)> = {
                let node = &self.nodes[i];
                let g = node.grad.as_ref().unwrap();
                match &node.op {
                    Op::Leaf => Vec::new(),
                    Op::Conv3d { x, w, b, stride, pad } => {
                        let xs = dims5(&self.nodes[*x].shape, "conv3d").unwrap();
                        let ws = dims5(&self.nodes[*w].shape, "conv3d").unwrap();
                        let (dx, dw, db) = conv::backward(
                            &self.nodes[*x].data,
                            xs,
                            &self.nodes[*w].data,
                            ws,
                            g,
                            *stride,
                            *pad,
                            self.nodes[*x].requires_grad,
                            self.nodes[*w].requires_grad,
                            b.map(|bi| self.nodes[bi].requires_grad).unwrap_or(false),
                        );
                        let mut out = Vec::new();
                        if let Some(dx) = dx {
                            out.push((*x, dx));
                        }
                        if let Some(dw) = dw {
                            out.push((*w, dw));
                        }
                        if let (Some(bi), Some(db)) = (b, db) {
                            out.push((*bi, db));
                        }
                        out
                    }
                    Op::BlurPool3d { x } => {
                        let xs = dims5(&self.nodes[*x].shape, "blurpool3d").unwrap();
                        vec![(*x, pool::blurpool_backward(g, xs))]
                    }
                    Op::UpsampleTrilinear { x } => {
                        let xs = dims5(&self.nodes[*x].shape, "upsample").unwrap();
                        vec![(*x, pool::upsample_backward(g, xs))]
                    }
                    Op::Unary { x, kind } => {
                        let xv = &self.nodes[*x].data;
                        let yv = &node.data;
                        let dx: Vec<T> = match kind {
                            UnaryKind::Silu => xv
                                .iter()
                                .zip(g)
                                .map(|(&v, &gv)| {
                                    let s = sigmoid_scalar(v);
                                    gv * s * (T::one() + v * (T::one() - s))
                                })
                                .collect(),
                            UnaryKind::Sigmoid => yv
                                .iter()
                                .zip(g)
                                .map(|(&s, &gv)| gv * s * (T::one() - s))
                                .collect(),
                            // Subgradient 1 at exactly 0: a zero-initialized
                            // layer feeding this activation still receives
                            // gradient, so such a model can start learning.
                            UnaryKind::Relu => xv
                                .iter()
                                .zip(g)
                                .map(|(&v, &gv)| if v >= T::zero() { gv } else { T::zero() })
                                .collect(),
                        };
                        vec![(*x, dx)]
                    }
                    Op::Linear { x, w, b } => {
                        let (n, k) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                        let m = self.nodes[*w].shape[0];
                        use ndarray::{ArrayView2, ArrayViewMut2};
                        let gv = ArrayView2::from_shape((n, m), &g[..]).unwrap();
                        let mut out = Vec::new();
                        if self.nodes[*x].requires_grad {
                            let wv = ArrayView2::from_shape((m, k), &self.nodes[*w].data[..]).unwrap();
                            let mut dx = vec![T::zero(); n * k];
                            let mut dxv = ArrayViewMut2::from_shape((n, k), &mut dx[..]).unwrap();
                            ndarray::linalg::general_mat_mul(T::one(), &gv, &wv, T::zero(), &mut dxv);
                            out.push((*x, dx));
                        }
                        if self.nodes[*w].requires_grad {
                            let xv = ArrayView2::from_shape((n, k), &self.nodes[*x].data[..]).unwrap();
                            let mut dw = vec![T::zero(); m * k];
                            let mut dwv = ArrayViewMut2::from_shape((m, k), &mut dw[..]).unwrap();
                            ndarray::linalg::general_mat_mul(T::one(), &gv.t(), &xv, T::zero(), &mut dwv);
                            out.push((*w, dw));
                        }
                        if let Some(bi) = b {
                            if self.nodes[*bi].requires_grad {
                                let mut db = vec![T::zero(); m];
                                for row in g.chunks_exact(m) {
                                    for (d, &gv) in db.iter_mut().zip(row) {
                                        *d = *d + gv;
                                    }
                                }
                                out.push((*bi, db));
                            }
                        }
                        out
                    }
                    Op::Add { a, b } => {
                        let mut out = Vec::new();
                        if self.nodes[*a].requires_grad {
                            out.push((*a, g.clone()));
                        }
                        if self.nodes[*b].requires_grad {
                            out.push((*b, g.clone()));
                        }
                        out
                    }
                    Op::Mul { a, b } => {
                        let mut out = Vec::new();
                        if self.nodes[*a].requires_grad {
                            let da: Vec<T> = g
                                .iter()
                                .zip(&self.nodes[*b].data)
                                .map(|(&gv, &bv)| gv * bv)
                                .collect();
                            out.push((*a, da));
                        }
                        if self.nodes[*b].requires_grad {
                            let db: Vec<T> = g
                                .iter()
                                .zip(&self.nodes[*a].data)
                                .map(|(&gv, &av)| gv * av)
                                .collect();
                            out.push((*b, db));
                        }
                        out
                    }
                    Op::Scale { x, c } => {
                        vec![(*x, g.iter().map(|&gv| gv * *c).collect())]
                    }
                    Op::AddChannelBias { x, bias } => {
                        let xs = dims5(&node.shape, "add_channel_bias").unwrap();
                        let vol = xs[2] * xs[3] * xs[4];
                        let mut out = Vec::new();
                        if self.nodes[*x].requires_grad {
                            out.push((*x, g.clone()));
                        }
                        if self.nodes[*bias].requires_grad {
                            let mut db = vec![T::zero(); xs[0] * xs[1]];
                            for (d, chunk) in db.iter_mut().zip(g.chunks_exact(vol)) {
                                for &gv in chunk {
                                    *d = *d + gv;
                                }
                            }
                            out.push((*bias, db));
                        }
                        out
                    }
                    Op::ConcatChannels { a, b } => {
                        let sa = dims5(&self.nodes[*a].shape, "concat").unwrap();
                        let sb = dims5(&self.nodes[*b].shape, "concat").unwrap();
                        let vol = sa[2] * sa[3] * sa[4];
                        let (ca, cb) = (sa[1], sb[1]);
                        let stride_out = (ca + cb) * vol;
                        let mut out = Vec::new();
                        if self.nodes[*a].requires_grad {
                            let mut da = vec![T::zero(); sa[0] * ca * vol];
                            for n in 0..sa[0] {
                                da[n * ca * vol..(n + 1) * ca * vol]
                                    .copy_from_slice(&g[n * stride_out..n * stride_out + ca * vol]);
                            }
                            out.push((*a, da));
                        }
                        if self.nodes[*b].requires_grad {
                            let mut db = vec![T::zero(); sb[0] * cb * vol];
                            for n in 0..sb[0] {
                                db[n * cb * vol..(n + 1) * cb * vol].copy_from_slice(
                                    &g[n * stride_out + ca * vol..(n + 1) * stride_out],
                                );
                            }
                            out.push((*b, db));
                        }
                        out
                    }
                    Op::Sum { x } => {
                        let n = self.nodes[*x].data.len();
                        vec![(*x, vec![g[0]; n])]
                    }
                    Op::PadReflectHigh { x, extra } => {
                        let xs = dims5(&self.nodes[*x].shape, "pad").unwrap();
                        let (d, h, w) = (xs[2], xs[3], xs[4]);
                        let od = [d + extra[0], h + extra[1], w + extra[2]];
                        let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
                        let mut dx = vec![T::zero(); xs[0] * xs[1] * d * h * w];
                        let mut gi = 0usize;
                        for nc in 0..xs[0] * xs[1] {
                            let base = nc * d * h * w;
                            for zd in 0..od[0] {
                                let sz = mirror(zd, d);
                                for yh in 0..od[1] {
                                    let sy = mirror(yh, h);
                                    let row = base + (sz * h + sy) * w;
                                    for xw in 0..od[2] {
                                        let j = row + mirror(xw, w);
                                        dx[j] = dx[j] + g[gi];
                                        gi += 1;
                                    }
                                }
                            }
                        }
                        vec![(*x, dx)]
                    }
                    Op::CropSpatial { x, keep } => {
                        let xs = dims5(&self.nodes[*x].shape, "crop").unwrap();
                        let (d, h, w) = (xs[2], xs[3], xs[4]);
                        let mut dx = vec![T::zero(); xs[0] * xs[1] * d * h * w];
                        let mut gi = 0usize;
                        for nc in 0..xs[0] * xs[1] {
                            let base = nc * d * h * w;
                            for zd in 0..keep[0] {
                                for yh in 0..keep[1] {
                                    let row = base + (zd * h + yh) * w;
                                    for xw in 0..keep[2] {
                                        dx[row + xw] = g[gi];
                                        gi += 1;
                                    }
                                }
                            }
                        }
                        vec![(*x, dx)]
                    }
                    Op::WeightedHuber {
                        pred,
                        target,
                        weight,
                        margin,
                        eps,
                        norm,
                    } => {
                        let ps = dims5(&self.nodes[*pred].shape, "weighted_huber").unwrap();
                        let (d, h, w) = (ps[2], ps[3], ps[4]);
                        let vol = d * h * w;
                        let pv = &self.nodes[*pred].data;
                        let g0 = g[0].to_f64c();
                        let mut dp = vec![T::zero(); pv.len()];
                        for nc in 0..ps[0] * ps[1] {
                            let base = nc * vol;
                            for zd in *margin..d - margin {
                                for yh in *margin..h - margin {
                                    let row = base + (zd * h + yh) * w;
                                    for xw in *margin..w - margin {
                                        let i = row + xw;
                                        let r = (pv[i] - target[i]).to_f64c();
                                        let dd = if r.abs() <= *eps { r } else { eps * r.signum() };
                                        dp[i] = T::from_f64c(
                                            g0 * weight[i].to_f64c() * dd / norm,
                                        );
                                    }
                                }
                            }
                        }
                        vec![(*pred, dp)]
                    }
                }
            };
            for (p, c) in contribs {
                self.add_grad(p, c);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}
