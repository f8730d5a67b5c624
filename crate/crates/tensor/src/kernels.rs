//! Forward and backward kernels on plain tensors.
//!
//! These functions never touch a tape; [`Tape`](crate::Tape) records calls
//! to them and replays the matching backward kernel. Keeping the forward
//! path identical whether or not gradients are tracked makes recorded and
//! unrecorded results bit-identical.

use crate::element::gemm;
use crate::{Element, Result, Tensor, TensorError};

/// Geometry of a 3-D convolution, resolved from input/kernel shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub k_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv3d";
        if input.len() != 5 || kernel.len() != 5 {
            return Err(TensorError::shape(
                OP,
                format!("expected 5-d input and kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(TensorError::shape(
                OP,
                format!(
                    "input has {} channels but kernel {kernel:?} expects {}",
                    input[1], kernel[1]
                ),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape(OP, "stride must be at least 1"));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = input[2 + a] + 2 * pad;
            if kernel[2 + a] > padded {
                return Err(TensorError::shape(
                    OP,
                    format!("kernel {kernel:?} larger than padded input {input:?} (pad {pad})"),
                ));
            }
            out_dims[a] = (padded - kernel[2 + a]) / stride + 1;
        }
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            c_out: kernel[0],
            in_dims: [input[2], input[3], input[4]],
            k_dims: [kernel[2], kernel[3], kernel[4]],
            out_dims,
            stride,
            pad,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.c_out,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k_dims.iter().product::<usize>()
    }

    /// A 1×1×1 unpadded unit-stride convolution is a plain matmul over the
    /// input; no unfolding is needed.
    fn is_pointwise(&self) -> bool {
        self.k_dims == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }
}

/// Source coordinate along one axis, or `None` inside the zero padding.
#[inline]
fn src_index(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (out * stride + k).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// Output positions `lo..hi` whose source coordinate along an axis of
/// length `extent` falls inside the input for kernel offset `k`.
#[inline]
fn valid_range(out_len: usize, k: usize, stride: usize, pad: usize, extent: usize) -> (usize, usize) {
    // out * stride + k - pad in [0, extent)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one batch item into a `[c_in·kd·kh·kw, od·oh·ow]` column matrix.
fn im2col<T: Element>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.k_dims;
    let [od, oh, ow] = g.out_dims;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let chan = &input[c * d * h * w..(c + 1) * d * h * w];
        for i in 0..kd {
            for j in 0..kh {
                for l in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let Some(iz) = src_index(oz, i, g.stride, g.pad, d) else {
                            dst[oz * oh * ow..(oz + 1) * oh * ow].fill(T::zero());
                            continue;
                        };
                        for oy in 0..oh {
                            let seg = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let Some(iy) = src_index(oy, j, g.stride, g.pad, h) else {
                                seg.fill(T::zero());
                                continue;
                            };
                            let src = &chan[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let (lo, hi) = valid_range(ow, l, g.stride, g.pad, w);
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            if g.stride == 1 {
                                let start = lo + l - g.pad;
                                seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                    *v = src[ox * g.stride + l - g.pad];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Element>(g: &ConvGeom, col: &[T], grad_in: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.k_dims;
    let [od, oh, ow] = g.out_dims;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let chan = &mut grad_in[c * d * h * w..(c + 1) * d * h * w];
        for i in 0..kd {
            for j in 0..kh {
                for l in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let Some(iz) = src_index(oz, i, g.stride, g.pad, d) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = src_index(oy, j, g.stride, g.pad, h) else {
                                continue;
                            };
                            let seg = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst = &mut chan[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let (lo, hi) = valid_range(ow, l, g.stride, g.pad, w);
                            for (ox, &v) in seg.iter().enumerate().take(hi).skip(lo) {
                                let ix = ox * g.stride + l - g.pad;
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_bias<T: Element>(op: &'static str, bias: &Tensor<T>, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return Err(TensorError::shape(
            op,
            format!("bias shape {:?}, expected [{n}]", bias.shape()),
        ));
    }
    Ok(())
}

pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    check_bias("conv3d", bias, g.c_out)?;
    let p = g.out_volume();
    let ck = g.patch_len();
    let in_block = g.c_in * g.in_volume();
    let out_block = g.c_out * p;
    let mut out = vec![T::zero(); g.batch * out_block];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    for n in 0..g.batch {
        let x = &input.data()[n * in_block..(n + 1) * in_block];
        let rhs: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        let y = &mut out[n * out_block..(n + 1) * out_block];
        gemm(false, false, g.c_out, p, ck, kernel.data(), rhs, y, false);
        for (co, &b) in bias.data().iter().enumerate() {
            y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *v + b);
        }
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gradients of [`conv3d`]: `(d input, d kernel, d bias)`.
///
/// The input gradient is only computed when `want_input` is set.
pub fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.shape() != g.out_shape().as_slice() {
        return Err(TensorError::shape(
            "conv3d_backward",
            format!("grad shape {:?}, expected {:?}", grad_out.shape(), g.out_shape()),
        ));
    }
    let p = g.out_volume();
    let ck = g.patch_len();
    let in_block = g.c_in * g.in_volume();
    let out_block = g.c_out * p;
    let mut gk = vec![T::zero(); kernel.numel()];
    let mut gb = vec![T::zero(); g.c_out];
    let mut gi = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    let mut gcol = if want_input && !g.is_pointwise() {
        vec![T::zero(); ck * p]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let x = &input.data()[n * in_block..(n + 1) * in_block];
        let gy = &grad_out.data()[n * out_block..(n + 1) * out_block];
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        gemm(false, true, g.c_out, ck, p, gy, cols, &mut gk, true);
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc = gy[co * p..(co + 1) * p]
                .iter()
                .fold(*acc, |s, &v| s + v);
        }
        if let Some(gi) = gi.as_mut() {
            let gx = &mut gi[n * in_block..(n + 1) * in_block];
            if g.is_pointwise() {
                gemm(true, false, ck, p, g.c_out, kernel.data(), gy, gx, true);
            } else {
                gemm(true, false, ck, p, g.c_out, kernel.data(), gy, &mut gcol, false);
                col2im(&g, &gcol, gx);
            }
        }
    }
    Ok((
        gi.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![g.c_out], gb),
    ))
}

fn linear_dims<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    match (input.shape(), weight.shape()) {
        (&[b, n], &[m, n2]) if n == n2 => Ok((b, n, m)),
        (i, w) => Err(TensorError::shape(
            "fully_connected",
            format!("input {i:?} incompatible with weight {w:?}"),
        )),
    }
}

/// `out[b, m] = Σ_n weight[m, n] · input[b, n] + bias[m]`.
pub fn fully_connected<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, n, m) = linear_dims(input, weight)?;
    check_bias("fully_connected", bias, m)?;
    let mut out = vec![T::zero(); b * m];
    gemm(false, true, b, m, n, input.data(), weight.data(), &mut out, false);
    for row in out.chunks_exact_mut(m) {
        for (v, &bb) in row.iter_mut().zip(bias.data()) {
            *v = *v + bb;
        }
    }
    Ok(Tensor::from_parts(vec![b, m], out))
}

pub fn fully_connected_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, n, m) = linear_dims(input, weight)?;
    let mut gi = vec![T::zero(); b * n];
    gemm(false, false, b, n, m, grad_out.data(), weight.data(), &mut gi, false);
    let mut gw = vec![T::zero(); m * n];
    gemm(true, false, m, n, b, grad_out.data(), input.data(), &mut gw, false);
    let mut gb = vec![T::zero(); m];
    for row in grad_out.data().chunks_exact(m) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::from_parts(vec![b, n], gi),
        Tensor::from_parts(vec![m, n], gw),
        Tensor::from_parts(vec![m], gb),
    ))
}

fn pool_dims<T: Element>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.ndim() < 3 {
        return Err(TensorError::shape(
            "global_avg_pool",
            format!("expected [B, C, spatial..], got {:?}", input.shape()),
        ));
    }
    let s = input.shape()[2..].iter().product();
    Ok((input.shape()[0], input.shape()[1], s))
}

/// Mean over every axis after the channel axis.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, s) = pool_dims(input)?;
    let inv = T::from_f64(1.0 / s as f64);
    let out = input
        .data()
        .chunks_exact(s)
        .map(|chunk| chunk.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], out))
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let s: usize = input_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / s as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat(g * inv).take(s))
        .collect();
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// `[B, C]` against `[B, C, spatial..]`: one value per channel.
    Channel,
    /// `[B, 1, spatial..]` against `[B, C, spatial..]`: one map shared by
    /// every channel.
    Spatial,
}

impl Broadcast {
    pub fn resolve(lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        if lhs.len() >= 3 && rhs == &lhs[..2] {
            return Ok(Broadcast::Channel);
        }
        if lhs.len() >= 3
            && rhs.len() == lhs.len()
            && rhs[0] == lhs[0]
            && rhs[1] == 1
            && rhs[2..] == lhs[2..]
        {
            return Ok(Broadcast::Spatial);
        }
        Err(TensorError::shape(
            "broadcast",
            format!("cannot broadcast {rhs:?} against {lhs:?}"),
        ))
    }

    /// Maps a flat index of the left operand to the matching right index.
    /// `channels` and `spatial` describe the left operand.
    #[inline]
    fn rhs_index(self, i: usize, channels: usize, spatial: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Channel => i / spatial,
            Broadcast::Spatial => (i / (channels * spatial)) * spatial + i % spatial,
        }
    }
}

fn lhs_layout(shape: &[usize]) -> (usize, usize) {
    if shape.len() >= 3 {
        (shape[1], shape[2..].iter().product())
    } else {
        (1, 1)
    }
}

pub fn binary<T: Element>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Tensor<T>, Broadcast)> {
    let kind = Broadcast::resolve(lhs.shape(), rhs.shape())?;
    let (c, s) = lhs_layout(lhs.shape());
    let r = rhs.data();
    let data = lhs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| f(a, r[kind.rhs_index(i, c, s)]))
        .collect();
    Ok((Tensor::from_parts(lhs.shape().to_vec(), data), kind))
}

/// Sums a left-shaped gradient down to the right operand's shape.
pub fn reduce_to_rhs<T: Element>(
    grad: &[T],
    lhs_shape: &[usize],
    rhs_shape: &[usize],
    kind: Broadcast,
) -> Tensor<T> {
    if kind == Broadcast::Same {
        return Tensor::from_parts(rhs_shape.to_vec(), grad.to_vec());
    }
    let (c, s) = lhs_layout(lhs_shape);
    let n: usize = rhs_shape.iter().product();
    let mut out = vec![T::zero(); n];
    for (i, &g) in grad.iter().enumerate() {
        let j = kind.rhs_index(i, c, s);
        out[j] = out[j] + g;
    }
    Tensor::from_parts(rhs_shape.to_vec(), out)
}

/// Gathers the right operand up to the left operand's shape.
pub fn expand_rhs<T: Element>(rhs: &Tensor<T>, lhs_shape: &[usize], kind: Broadcast) -> Vec<T> {
    let (c, s) = lhs_layout(lhs_shape);
    let n: usize = lhs_shape.iter().product();
    (0..n).map(|i| rhs.data()[kind.rhs_index(i, c, s)]).collect()
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean absolute difference; shapes must match.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::shape(
            "l1_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = T::from_f64(pred.numel() as f64);
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t).abs());
    Ok(Tensor::scalar(total / n))
}

/// Subgradient of the L1 loss w.r.t. the prediction; zero where `p == t`.
pub fn l1_loss_grad<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream / T::from_f64(pred.numel() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p > t {
                scale
            } else if p < t {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_parts(pred.shape().to_vec(), data)
}
