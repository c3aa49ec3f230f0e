//! Forward compute kernels shared by plain tensor math and the tape.

use super::{numel, strides_of, Elem, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!("cannot broadcast {:?} with {:?}", a, b)));
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if it had `out_shape`,
/// with stride 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

pub(crate) fn bcast_zip<E: Elem>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let mut data = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..n {
        data.push(f(a.data()[oa], b.data()[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `grad` down to `shape` over broadcast axes; inverse of broadcasting.
pub(crate) fn reduce_to_shape<E: Elem>(grad: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let strides = broadcast_strides(shape, &out_shape);
    let mut out = Tensor::zeros(shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        out.data_mut()[off] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * out_shape[d];
        }
    }
    out
}

/// Expand (broadcast) to a larger shape by repetition.
pub(crate) fn expand<E: Elem>(t: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    bcast_zip(t, &Tensor::zeros(shape), |x, _| x)
}

pub(crate) fn log_checked<E: Elem>(t: &Tensor<E>) -> Result<Tensor<E>> {
    if t.data().iter().any(|v| *v <= E::zero()) {
        return Err(Error::Domain("log of non-positive input".into()));
    }
    Ok(t.map(|v| v.ln()))
}

pub(crate) fn sqrt_checked<E: Elem>(t: &Tensor<E>) -> Result<Tensor<E>> {
    if t.data().iter().any(|v| *v < E::zero()) {
        return Err(Error::Domain("sqrt of negative input".into()));
    }
    Ok(t.map(|v| v.sqrt()))
}

pub(crate) fn sigmoid<E: Elem>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

// ---------------------------------------------------------------------------
// Axis-wise reductions and normalizations
// ---------------------------------------------------------------------------

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

/// Sum over `axes`, keeping reduced axes as size 1.
pub(crate) fn sum_axes<E: Elem>(t: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
    for &a in axes {
        check_axis(a, t.rank())?;
    }
    let mut out_shape = t.shape().to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out = reduce_to_shape(t, &out_shape);
    Ok(out)
}

pub(crate) fn sum_all<E: Elem>(t: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::zero();
    for &v in t.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Decompose a shape around one axis into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax<E: Elem>(t: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    check_axis(axis, t.rank())?;
    if t.shape()[axis] == 0 {
        return Err(Error::Domain("softmax over zero-length axis".into()));
    }
    Ok(lane_softmax(t, axis, false))
}

pub(crate) fn log_softmax<E: Elem>(t: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    check_axis(axis, t.rank())?;
    if t.shape()[axis] == 0 {
        return Err(Error::Domain("softmax over zero-length axis".into()));
    }
    Ok(lane_softmax(t, axis, true))
}

fn lane_softmax<E: Elem>(t: &Tensor<E>, axis: usize, log: bool) -> Tensor<E> {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = t.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = E::neg_infinity();
            for j in 0..len {
                let v = out.data()[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..len {
                sum += (out.data()[base + j * inner] - max).exp();
            }
            let log_sum = sum.ln() + max;
            for j in 0..len {
                let v = out.data()[base + j * inner];
                out.data_mut()[base + j * inner] = if log {
                    v - log_sum
                } else {
                    (v - log_sum).exp()
                };
            }
        }
    }
    out
}

/// Per-index normalization over `axes` (mean 0, variance 1, before affine).
pub(crate) fn layer_norm<E: Elem>(t: &Tensor<E>, axes: &[usize], eps: f64) -> Result<Tensor<E>> {
    let (mean, inv_std) = layer_norm_stats(t, axes, eps)?;
    let centered = bcast_zip(t, &mean, |x, m| x - m)?;
    bcast_zip(&centered, &inv_std, |x, s| x * s)
}

pub(crate) fn layer_norm_stats<E: Elem>(
    t: &Tensor<E>,
    axes: &[usize],
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let count: usize = axes.iter().map(|&a| t.shape()[a]).product();
    let inv_n = E::from_f64(1.0 / count as f64);
    let mean = sum_axes(t, axes)?.map(|v| v * inv_n);
    let centered = bcast_zip(t, &mean, |x, m| x - m)?;
    let var = sum_axes(&centered.map(|v| v * v), axes)?.map(|v| v * inv_n);
    let eps = E::from_f64(eps);
    let inv_std = var.map(|v| E::one() / (v + eps).sqrt());
    Ok((mean, inv_std))
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

pub(crate) fn concat<E: Elem>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    check_axis(axis, first.rank())?;
    let mut out_shape = first.shape().to_vec();
    for p in &parts[1..] {
        if p.rank() != first.rank() {
            return Err(Error::shape("concat rank mismatch"));
        }
        for d in 0..first.rank() {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::shape(format!(
                    "concat non-axis extent mismatch: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(out_shape, data)
}

/// Split a concat gradient back into per-part gradients.
pub(crate) fn concat_backward<E: Elem>(
    grad: &Tensor<E>,
    part_shapes: &[Vec<usize>],
    axis: usize,
) -> Vec<Tensor<E>> {
    let (outer, _, inner) = axis_split(grad.shape(), axis);
    let mut grads: Vec<Tensor<E>> = part_shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let total_chunk: usize = part_shapes.iter().map(|s| s[axis] * inner).sum();
    for o in 0..outer {
        let mut off = o * total_chunk;
        for (g, s) in grads.iter_mut().zip(part_shapes) {
            let chunk = s[axis] * inner;
            g.data_mut()[o * chunk..(o + 1) * chunk]
                .copy_from_slice(&grad.data()[off..off + chunk]);
            off += chunk;
        }
    }
    grads
}

/// Nearest-neighbor x2 upsample of the last two axes.
pub(crate) fn upsample2x<E: Elem>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::shape("upsample2x requires rank >= 2"));
    }
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch: usize = t.shape()[..r - 2].iter().product();
    let mut out_shape = t.shape().to_vec();
    out_shape[r - 2] = h * 2;
    out_shape[r - 1] = w * 2;
    let mut data = Vec::with_capacity(numel(&out_shape));
    for b in 0..batch {
        let plane = &t.data()[b * h * w..(b + 1) * h * w];
        for oh in 0..h * 2 {
            let row = &plane[(oh / 2) * w..(oh / 2 + 1) * w];
            for ow in 0..w * 2 {
                data.push(row[ow / 2]);
            }
        }
    }
    Tensor::new(out_shape, data)
}

pub(crate) fn upsample2x_backward<E: Elem>(grad: &Tensor<E>, in_shape: &[usize]) -> Tensor<E> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let batch: usize = in_shape[..r - 2].iter().product();
    let mut out = Tensor::zeros(in_shape);
    for b in 0..batch {
        for oh in 0..h * 2 {
            for ow in 0..w * 2 {
                let g = grad.data()[b * h * w * 4 + oh * w * 2 + ow];
                out.data_mut()[b * h * w + (oh / 2) * w + ow / 2] += g;
            }
        }
    }
    out
}

/// Stride-2 subsample of the last two axes (keeps the top-left of each 2x2).
pub(crate) fn downsample2x<E: Elem>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::shape("downsample2x requires rank >= 2"));
    }
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "downsample2x requires even spatial extents, got {}x{}",
            h, w
        )));
    }
    let batch: usize = t.shape()[..r - 2].iter().product();
    let mut out_shape = t.shape().to_vec();
    out_shape[r - 2] = h / 2;
    out_shape[r - 1] = w / 2;
    let mut data = Vec::with_capacity(numel(&out_shape));
    for b in 0..batch {
        let plane = &t.data()[b * h * w..(b + 1) * h * w];
        for oh in 0..h / 2 {
            for ow in 0..w / 2 {
                data.push(plane[oh * 2 * w + ow * 2]);
            }
        }
    }
    Tensor::new(out_shape, data)
}

pub(crate) fn downsample2x_backward<E: Elem>(grad: &Tensor<E>, in_shape: &[usize]) -> Tensor<E> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let batch: usize = in_shape[..r - 2].iter().product();
    let mut out = Tensor::zeros(in_shape);
    for b in 0..batch {
        for oh in 0..h / 2 {
            for ow in 0..w / 2 {
                out.data_mut()[b * h * w + oh * 2 * w + ow * 2] +=
                    grad.data()[b * (h / 2) * (w / 2) + oh * (w / 2) + ow];
            }
        }
    }
    out
}

pub(crate) fn permute<E: Elem>(t: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
    let rank = t.rank();
    if axes.len() != rank {
        return Err(Error::shape("permutation length mismatch"));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        check_axis(a, rank)?;
        if seen[a] {
            return Err(Error::shape("duplicate axis in permutation"));
        }
        seen[a] = true;
    }
    let in_strides = strides_of(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let read_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += read_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= read_strides[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, data)
}

pub(crate) fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

/// Batched matmul: `[.., m, k] x [.., k, n] -> [.., m, n]` with equal
/// leading extents.
pub(crate) fn matmul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank() {
        return Err(Error::shape("matmul requires equal rank >= 2"));
    }
    let r = a.rank();
    let (m, ka) = (a.shape()[r - 2], a.shape()[r - 1]);
    let (kb, n) = (b.shape()[r - 2], b.shape()[r - 1]);
    if ka != kb || a.shape()[..r - 2] != b.shape()[..r - 2] {
        return Err(Error::shape(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch: usize = a.shape()[..r - 2].iter().product();
    let mut out_shape = a.shape().to_vec();
    out_shape[r - 1] = n;
    let mut out = Tensor::zeros(&out_shape);
    for bi in 0..batch {
        let pa = &a.data()[bi * m * ka..(bi + 1) * m * ka];
        let pb = &b.data()[bi * ka * n..(bi + 1) * ka * n];
        let po = &mut out.data_mut()[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for kk in 0..ka {
                let av = pa[i * ka + kk];
                let brow = &pb[kk * n..kk * n + n];
                let orow = &mut po[i * n..i * n + n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub(crate) struct ConvGeom {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn conv2d_geometry(
    in_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if in_shape.len() != 4 || kernel_shape.len() != 4 {
        return Err(Error::shape("conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernel"));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if in_shape[1] != kernel_shape[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {} vs kernel {}",
            in_shape[1], kernel_shape[1]
        )));
    }
    let (h, w) = (in_shape[2], in_shape[3]);
    let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape("conv2d kernel larger than input"));
            }
            Ok(ConvGeom {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            if kh > h + pad_h || kw > w + pad_w {
                return Err(Error::shape("conv2d kernel larger than padded input"));
            }
            Ok(ConvGeom {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

pub(crate) fn conv2d<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<E>> {
    let g = conv2d_geometry(input.shape(), kernel.shape(), stride, padding)?;
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (o, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w]);
    let in_plane = h * w;
    let out_plane = g.out_h * g.out_w;
    for ni in 0..n {
        for oi in 0..o {
            let out_base = (ni * o + oi) * out_plane;
            for ci in 0..c {
                let in_base = (ni * c + ci) * in_plane;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let kv = kernel.data()[((oi * c + ci) * kh + khi) * kw + kwi];
                        if kv == E::zero() {
                            continue;
                        }
                        for oh in 0..g.out_h {
                            let ih = (oh * stride + khi) as isize - g.pad_top as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let in_row = in_base + ih as usize * w;
                            let out_row = out_base + oh * g.out_w;
                            for ow in 0..g.out_w {
                                let iw = (ow * stride + kwi) as isize - g.pad_left as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let v = input.data()[in_row + iw as usize] * kv;
                                out.data_mut()[out_row + ow] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv2d_backward<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g = conv2d_geometry(input.shape(), kernel.shape(), stride, padding)?;
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (o, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let in_plane = h * w;
    let out_plane = g.out_h * g.out_w;
    for ni in 0..n {
        for oi in 0..o {
            let out_base = (ni * o + oi) * out_plane;
            for ci in 0..c {
                let in_base = (ni * c + ci) * in_plane;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let kidx = ((oi * c + ci) * kh + khi) * kw + kwi;
                        let kv = kernel.data()[kidx];
                        let mut kacc = E::zero();
                        for oh in 0..g.out_h {
                            let ih = (oh * stride + khi) as isize - g.pad_top as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let in_row = in_base + ih as usize * w;
                            let out_row = out_base + oh * g.out_w;
                            for ow in 0..g.out_w {
                                let iw = (ow * stride + kwi) as isize - g.pad_left as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let go = grad_out.data()[out_row + ow];
                                kacc += go * input.data()[in_row + iw as usize];
                                d_input.data_mut()[in_row + iw as usize] += go * kv;
                            }
                        }
                        d_kernel.data_mut()[kidx] += kacc;
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernel))
}
