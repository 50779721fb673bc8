//! Pure forward kernels. These never touch a tape; [`super::Tape`] wraps
//! them and adds the reverse pass.

use super::{Result, Tensor, TensorError};

/// Guard added under the square root in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Guard added to the norm product of the cosine cost.
pub const COSINE_EPS: f64 = 1e-8;

/// Right-aligned numpy broadcasting of two shapes.
pub fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank {
            a[k + a.len() - rank]
        } else {
            1
        };
        let db = if k + b.len() >= rank {
            b[k + b.len() - rank]
        } else {
            1
        };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides into `input` for iterating over `out`, zero on broadcast axes.
pub fn broadcast_strides(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut stride = 1;
    for k in (0..input.len()).rev() {
        let ok = k + rank - input.len();
        strides[ok] = if input[k] == 1 && out[ok] != 1 {
            0
        } else {
            stride
        };
        stride *= input[k];
    }
    strides
}

/// Calls `f` with the input offset of every output element in row-major order.
pub fn for_each_offset(dims: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let numel: usize = dims.iter().product();
    let rank = dims.len();
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        f(offset);
        for k in (0..rank).rev() {
            index[k] += 1;
            offset += strides[k];
            if index[k] < dims[k] {
                break;
            }
            offset -= strides[k] * dims[k];
            index[k] = 0;
        }
    }
}

fn for_each_offset2(dims: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = dims.iter().product();
    let rank = dims.len();
    let mut index = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel {
        f(oa, ob);
        for k in (0..rank).rev() {
            index[k] += 1;
            oa += sa[k];
            ob += sb[k];
            if index[k] < dims[k] {
                break;
            }
            oa -= sa[k] * dims[k];
            ob -= sb[k] * dims[k];
            index[k] = 0;
        }
    }
}

pub fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.dims() == b.dims() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.dims(), data);
    }
    let dims = broadcast_dims(op, a.dims(), b.dims())?;
    let sa = broadcast_strides(&dims, a.dims());
    let sb = broadcast_strides(&dims, b.dims());
    let mut data = Vec::with_capacity(dims.iter().product());
    let (da, db) = (a.data(), b.data());
    for_each_offset2(&dims, &sa, &sb, |oa, ob| data.push(f(da[oa], db[ob])));
    Tensor::new(&dims, data)
}

/// Sums a broadcast gradient back down to `dims`.
pub fn reduce_to(grad: &Tensor, dims: &[usize]) -> Tensor {
    if grad.dims() == dims {
        return grad.clone();
    }
    let strides = broadcast_strides(grad.dims(), dims);
    let mut out = vec![0.0; dims.iter().product()];
    let g = grad.data();
    let mut i = 0;
    for_each_offset(grad.dims(), &strides, |off| {
        out[off] += g[i];
        i += 1;
    });
    Tensor::new(dims, out).expect("reduce_to dims")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b, |x, y| x / y)
}

fn finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub fn exp(t: &Tensor) -> Result<Tensor> {
    finite("exp", t)?;
    Ok(t.map(f64::exp))
}

pub fn ln(t: &Tensor) -> Result<Tensor> {
    finite("ln", t)?;
    if t.data().iter().any(|&x| x <= 0.0) {
        return Err(TensorError::invalid("ln", "input must be positive"));
    }
    Ok(t.map(f64::ln))
}

pub fn sqrt(t: &Tensor) -> Result<Tensor> {
    if t.data().iter().any(|&x| x < 0.0) {
        return Err(TensorError::invalid("sqrt", "input must be non-negative"));
    }
    Ok(t.map(f64::sqrt))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu(t: &Tensor) -> Tensor {
    t.map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

/// `C = op(A) * op(B)` for row-major buffers, `op` being an optional transpose.
/// `a` holds `m x k` (or `k x m` when `ta`), `b` holds `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths match the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
        return Err(TensorError::shape("matmul", a.dims(), b.dims()));
    }
    let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(&[m, n], out)
}

pub fn transpose(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(TensorError::invalid(
            "transpose",
            format!("needs a matrix, got dims {:?}", t.dims()),
        ));
    }
    let (r, c) = (t.dims()[0], t.dims()[1]);
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

/// `(outer, axis length, inner)` decomposition of `dims` around `axis`.
pub(crate) fn axis_layout(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for dims {:?}", t.dims()),
        ));
    }
    Ok(())
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    check_axis("concat", first, axis)?;
    for p in &parts[1..] {
        let same = p.rank() == first.rank()
            && p.dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .all(|(k, (x, y))| k == axis || x == y);
        if !same {
            return Err(TensorError::shape("concat", first.dims(), p.dims()));
        }
    }
    let total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
    let mut dims = first.dims().to_vec();
    dims[axis] = total;
    let (outer, _, inner) = axis_layout(first.dims(), axis);
    let mut data = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.dims()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&dims, data)
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("narrow", t, axis)?;
    if len == 0 || start + len > t.dims()[axis] {
        return Err(TensorError::invalid(
            "narrow",
            format!(
                "range {start}..{} out of bounds for axis {axis} of {:?}",
                start + len,
                t.dims()
            ),
        ));
    }
    let (outer, n, inner) = axis_layout(t.dims(), axis);
    let mut dims = t.dims().to_vec();
    dims[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::new(&dims, data)
}

pub fn split(t: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    check_axis("split", t, axis)?;
    if sizes.iter().sum::<usize>() != t.dims()[axis] {
        return Err(TensorError::shape("split", t.dims(), sizes));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = narrow(t, axis, start, len);
            start += len;
            part
        })
        .collect()
}

pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", t, axis)?;
    finite("softmax", t)?;
    let (outer, n, inner) = axis_layout(t.dims(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(t.dims(), out)
}

pub fn log_softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("log_softmax", t, axis)?;
    finite("log_softmax", t)?;
    let (outer, n, inner) = axis_layout(t.dims(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..n).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
            for k in 0..n {
                out[at(k)] = x[at(k)] - lse;
            }
        }
    }
    Tensor::new(t.dims(), out)
}

/// Normalizes every row of the last axis to zero mean and unit variance.
/// Returns the output and the per-row reciprocal standard deviation.
pub fn layer_norm(t: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if t.rank() == 0 {
        return Err(TensorError::invalid(
            "layer_norm",
            "needs at least one axis",
        ));
    }
    let d = *t.dims().last().unwrap();
    let mut out = Vec::with_capacity(t.numel());
    let mut inv_std = Vec::with_capacity(t.numel() / d);
    for row in t.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(r);
        out.extend(row.iter().map(|x| (x - mean) * r));
    }
    Ok((Tensor::new(t.dims(), out)?, inv_std))
}

/// Sums over `axes`, keeping them as length-1 axes.
pub fn sum_axes(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let mut dims = t.dims().to_vec();
    for &a in axes {
        check_axis("sum", t, a)?;
        dims[a] = 1;
    }
    Ok(reduce_to(t, &dims))
}

pub fn mean_axes(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let count: usize = axes
        .iter()
        .map(|&a| t.dims().get(a).copied().unwrap_or(1))
        .product();
    let s = sum_axes(t, axes)?;
    Ok(s.map(|x| x / count as f64))
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    let ok = x.rank() == 3
        && w.rank() == 4
        && w.dims()[1] == x.dims()[0]
        && w.dims()[2] == 3
        && w.dims()[3] == 3
        && b.dims() == [w.dims()[0]];
    if ok {
        Ok(())
    } else {
        Err(TensorError::shape("conv3x3", x.dims(), w.dims()))
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `x` is `C x H x W`, `w` is
/// `O x C x 3 x 3`, `b` has length `O`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_conv(x, w, b)?;
    let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let o = w.dims()[0];
    let (xd, wv) = (x.data(), w.data());
    let mut out = vec![0.0; o * h * wd];
    for oc in 0..o {
        let plane = &mut out[oc * h * wd..(oc + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b.data()[oc]);
        for ic in 0..c {
            let src = &xd[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let weight = wv[((oc * c + ic) * 3 + ky) * 3 + kx];
                    for i in 0..h {
                        let si = i + ky;
                        if si < 1 || si > h {
                            continue;
                        }
                        for j in 0..wd {
                            let sj = j + kx;
                            if sj < 1 || sj > wd {
                                continue;
                            }
                            plane[i * wd + j] += weight * src[(si - 1) * wd + sj - 1];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[o, h, wd], out)
}

pub(crate) fn conv3x3_backward(x: &Tensor, w: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let o = w.dims()[0];
    let (xd, wv, g) = (x.data(), w.data(), grad.data());
    let mut gx = vec![0.0; c * h * wd];
    let mut gw = vec![0.0; wv.len()];
    let mut gb = vec![0.0; o];
    for oc in 0..o {
        let gplane = &g[oc * h * wd..(oc + 1) * h * wd];
        gb[oc] = gplane.iter().sum();
        for ic in 0..c {
            let src = &xd[ic * h * wd..(ic + 1) * h * wd];
            let dst = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wi = ((oc * c + ic) * 3 + ky) * 3 + kx;
                    let weight = wv[wi];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i + ky;
                        if si < 1 || si > h {
                            continue;
                        }
                        for j in 0..wd {
                            let sj = j + kx;
                            if sj < 1 || sj > wd {
                                continue;
                            }
                            let s = (si - 1) * wd + sj - 1;
                            acc += gplane[i * wd + j] * src[s];
                            dst[s] += weight * gplane[i * wd + j];
                        }
                    }
                    gw[wi] = acc;
                }
            }
        }
    }
    (
        Tensor::new(x.dims(), gx).unwrap(),
        Tensor::new(w.dims(), gw).unwrap(),
        Tensor::new(&[o], gb).unwrap(),
    )
}

/// Corner-aligned bilinear sample positions: for each output coordinate,
/// `(low index, high index, weight of high)`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Corner-aligned bilinear resize of the last two axes.
pub fn upsample_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.rank() < 2 || out_h == 0 || out_w == 0 {
        return Err(TensorError::invalid(
            "upsample",
            format!("cannot resize dims {:?} to {out_h}x{out_w}", t.dims()),
        ));
    }
    let r = t.rank();
    let (h, w) = (t.dims()[r - 2], t.dims()[r - 1]);
    let outer = t.numel() / (h * w);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let src = t.data();
    let mut out = Vec::with_capacity(outer * out_h * out_w);
    for o in 0..outer {
        let plane = &src[o * h * w..(o + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let top = a + (b - a) * fx;
                let (a, b) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                let bot = a + (b - a) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    let mut dims = t.dims().to_vec();
    dims[r - 2] = out_h;
    dims[r - 1] = out_w;
    Tensor::new(&dims, out)
}

/// Min-max normalizes each contiguous group of `group` entries to `[0, 1]`.
/// Constant groups map to zeros.
pub fn minmax_normalize(t: &Tensor, group: usize) -> Result<Tensor> {
    if group == 0 || t.numel() % group != 0 {
        return Err(TensorError::invalid(
            "minmax_normalize",
            format!("group {group} does not divide {} entries", t.numel()),
        ));
    }
    finite("minmax_normalize", t)?;
    let mut out = Vec::with_capacity(t.numel());
    for chunk in t.data().chunks(group) {
        let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            out.extend(chunk.iter().map(|x| (x - lo) / range));
        } else {
            out.extend(std::iter::repeat(0.0).take(chunk.len()));
        }
    }
    Tensor::new(t.dims(), out)
}

/// Cosine cost between the columns of `p` (`c x n`) and `q` (`c x m`):
/// `1 - <p_i, q_j> / (|p_i| |q_j| + 1e-8)`, an `n x m` matrix.
pub fn cosine_cost(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.rank() != 2 || q.rank() != 2 || p.dims()[0] != q.dims()[0] {
        return Err(TensorError::shape("cosine_cost", p.dims(), q.dims()));
    }
    let (n, m) = (p.dims()[1], q.dims()[1]);
    let mut dots = vec![0.0; n * m];
    gemm(
        n,
        p.dims()[0],
        m,
        p.data(),
        true,
        q.data(),
        false,
        &mut dots,
        false,
    );
    let np = column_norms(p);
    let nq = column_norms(q);
    for i in 0..n {
        for j in 0..m {
            let d = np[i] * nq[j] + COSINE_EPS;
            dots[i * m + j] = 1.0 - dots[i * m + j] / d;
        }
    }
    Tensor::new(&[n, m], dots)
}

pub(crate) fn column_norms(t: &Tensor) -> Vec<f64> {
    let (c, n) = (t.dims()[0], t.dims()[1]);
    let d = t.data();
    (0..n)
        .map(|j| {
            (0..c)
                .map(|k| d[k * n + j] * d[k * n + j])
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}
