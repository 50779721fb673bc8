use super::ops;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the output gradient plus the forward values of the
/// inputs and output, and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    Mean(Var, usize),
    Conv3x3(Var, Var, Var),
    Upsample(Var),
    MinMaxNorm(Var, usize),
    CosineCost(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

/// Append-only record of a computation. Node ids are handed out in
/// creation order, so inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            debug_assert_eq!(existing.dims(), g.dims());
            let sum = existing
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a + b)
                .collect();
            *existing = Tensor::new(g.dims(), sum).expect("gradient dims");
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; it receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A trainable leaf; [`Tape::backward`] always returns a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::div(self.value(a), self.value(b))?;
        Ok(self.push(Op::Div(a, b), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::narrow(self.value(a), axis, start, len)?;
        Ok(self.push(Op::Narrow(a, axis, start), out))
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        if sizes.iter().sum::<usize>() != self.dims(a).get(axis).copied().unwrap_or(0) {
            return Err(TensorError::shape("split", self.dims(a), sizes));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = ops::exp(self.value(a))?;
        Ok(self.push(Op::Exp(a), out))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = ops::ln(self.value(a))?;
        Ok(self.push(Op::Ln(a), out))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = ops::sqrt(self.value(a))?;
        Ok(self.push(Op::Sqrt(a), out))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        self.push(Op::Gelu(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        self.push(Op::Relu(a), out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(a), axis)?;
        Ok(self.push(Op::Softmax(a, axis), out))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::log_softmax(self.value(a), axis)?;
        Ok(self.push(Op::LogSoftmax(a, axis), out))
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (out, inv_std) = ops::layer_norm(self.value(a))?;
        Ok(self.push(Op::LayerNorm(a, inv_std), out))
    }

    /// Sum over `axes`, which are kept with length 1.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::sum_axes(self.value(a), axes)?;
        Ok(self.push(Op::Sum(a), out))
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::mean_axes(self.value(a), axes)?;
        let count = self.value(a).numel() / out.numel();
        Ok(self.push(Op::Mean(a, count), out))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let out = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push(Op::Mean(a, n), out)
    }

    /// Mean absolute difference between two same-shaped values.
    /// Mean absolute difference.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::shape(
                "l1_distance",
                self.dims(a),
                self.dims(b),
            ));
        }
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean_all(d))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv3x3(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Conv3x3(x, w, b), out))
    }

    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(a), out_h, out_w)?;
        Ok(self.push(Op::Upsample(a), out))
    }

    pub fn minmax_normalize(&mut self, a: Var, group: usize) -> Result<Var> {
        let out = ops::minmax_normalize(self.value(a), group)?;
        Ok(self.push(Op::MinMaxNorm(a, group), out))
    }

    pub fn cosine_cost(&mut self, p: Var, q: Var) -> Result<Var> {
        let out = ops::cosine_cost(self.value(p), self.value(q))?;
        Ok(self.push(Op::CosineCost(p, q), out))
    }

    /// Records an externally defined op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(Op::Custom(inputs.to_vec(), op), output)
    }

    /// Reverse pass from a scalar `loss`. Every trainable leaf gets a
    /// gradient (zeros when it does not influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.dims()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let taken = if id == loss.0 {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(g) = taken else { continue };
            for (input, gi) in self.local_grads(node, &g)? {
                accumulate(&mut grads[input.0], gi);
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.dims()));
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, ops::reduce_to(g, val(*a).dims())),
                (*b, ops::reduce_to(g, val(*b).dims())),
            ],
            Op::Sub(a, b) => vec![
                (*a, ops::reduce_to(g, val(*a).dims())),
                (*b, ops::reduce_to(&g.map(|x| -x), val(*b).dims())),
            ],
            Op::Mul(a, b) => vec![
                (*a, ops::reduce_to(&ops::mul(g, val(*b))?, val(*a).dims())),
                (*b, ops::reduce_to(&ops::mul(g, val(*a))?, val(*b).dims())),
            ],
            Op::Div(a, b) => {
                let ga = ops::div(g, val(*b))?;
                let gb = ops::mul(&ops::mul(g, y)?, &val(*b).map(|x| -1.0 / x))?;
                vec![
                    (*a, ops::reduce_to(&ga, val(*a).dims())),
                    (*b, ops::reduce_to(&gb, val(*b).dims())),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                let mut ga = vec![0.0; m * k];
                ops::gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                ops::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                vec![
                    (*a, Tensor::new(&[m, k], ga)?),
                    (*b, Tensor::new(&[k, n], gb)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, ops::transpose(g)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).dims())?)],
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts.iter().map(|p| val(*p).dims()[*axis]).collect();
                parts
                    .iter()
                    .copied()
                    .zip(ops::split(g, *axis, &sizes)?)
                    .collect()
            }
            Op::Narrow(a, axis, start) => {
                let dims = val(*a).dims();
                let (outer, n, inner) = ops::axis_layout(dims, *axis);
                let len = g.dims()[*axis];
                let mut full = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*a, Tensor::new(dims, full)?)]
            }
            Op::Exp(a) => vec![(*a, ops::mul(g, y)?)],
            Op::Ln(a) => vec![(*a, ops::div(g, val(*a))?)],
            Op::Sqrt(a) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| if *yi > 0.0 { gi / (2.0 * yi) } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(y.dims(), gx)?)]
            }
            Op::Abs(a) => {
                let sign = val(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![(*a, ops::mul(g, &sign)?)]
            }
            Op::Gelu(a) => vec![(*a, ops::mul(g, &val(*a).map(ops::gelu_grad))?)],
            Op::Relu(a) => {
                let mask = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, ops::mul(g, &mask)?)]
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = ops::axis_layout(y.dims(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(y.dims(), gx)?)]
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = ops::axis_layout(y.dims(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let total: f64 = (0..n).map(|k| gd[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = gd[at(k)] - yd[at(k)].exp() * total;
                        }
                    }
                }
                vec![(*a, Tensor::new(y.dims(), gx)?)]
            }
            Op::LayerNorm(a, inv_std) => {
                let d = *y.dims().last().unwrap();
                let mut gx = Vec::with_capacity(y.numel());
                for ((yr, gr), r) in y.data().chunks(d).zip(g.data().chunks(d)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gi, yi)| r * (gi - mean_g - yi * mean_gy)),
                    );
                }
                vec![(*a, Tensor::new(y.dims(), gx)?)]
            }
            Op::Sum(a) => vec![(*a, self.expand_grad(g, val(*a).dims())?)],
            Op::Mean(a, count) => {
                let c = *count as f64;
                vec![(*a, self.expand_grad(&g.map(|x| x / c), val(*a).dims())?)]
            }
            Op::Conv3x3(x, w, b) => {
                let (gx, gw, gb) = ops::conv3x3_backward(val(*x), val(*w), g);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Upsample(a) => {
                let dims = val(*a).dims();
                let r = dims.len();
                let (h, w) = (dims[r - 2], dims[r - 1]);
                let (oh, ow) = (g.dims()[r - 2], g.dims()[r - 1]);
                let ty = ops::bilinear_taps(h, oh);
                let tx = ops::bilinear_taps(w, ow);
                let outer = val(*a).numel() / (h * w);
                let mut gx = vec![0.0; val(*a).numel()];
                let gd = g.data();
                for o in 0..outer {
                    let plane = &mut gx[o * h * w..(o + 1) * h * w];
                    let gp = &gd[o * oh * ow..(o + 1) * oh * ow];
                    for (yi, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (xi, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let v = gp[yi * ow + xi];
                            plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += v * fy * (1.0 - fx);
                            plane[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                vec![(*a, Tensor::new(dims, gx)?)]
            }
            Op::MinMaxNorm(a, group) => {
                let x = val(*a).data();
                let mut gx = vec![0.0; x.len()];
                for (chunk_index, ((xc, yc), gc)) in x
                    .chunks(*group)
                    .zip(y.data().chunks(*group))
                    .zip(g.data().chunks(*group))
                    .enumerate()
                {
                    let lo_at = argmin(xc);
                    let hi_at = argmax(xc);
                    let range = xc[hi_at] - xc[lo_at];
                    if range <= 0.0 {
                        continue;
                    }
                    let base = chunk_index * group;
                    let mut g_lo = 0.0;
                    let mut g_hi = 0.0;
                    for k in 0..xc.len() {
                        gx[base + k] += gc[k] / range;
                        g_lo += gc[k] * (yc[k] - 1.0) / range;
                        g_hi -= gc[k] * yc[k] / range;
                    }
                    gx[base + lo_at] += g_lo;
                    gx[base + hi_at] += g_hi;
                }
                vec![(*a, Tensor::new(val(*a).dims(), gx)?)]
            }
            Op::CosineCost(p, q) => {
                let (gp, gq) = cosine_cost_backward(val(*p), val(*q), g);
                vec![(*p, gp), (*q, gq)]
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(g, &values, y);
                if gs.len() != inputs.len() {
                    return Err(TensorError::invalid(
                        "backward",
                        format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        ),
                    ));
                }
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&v, g)| g.map(|g| (v, g)))
                    .collect()
            }
        };
        Ok(out)
    }

    fn expand_grad(&self, g: &Tensor, dims: &[usize]) -> Result<Tensor> {
        // `g` either keeps reduced axes as 1 or is a scalar; both broadcast.
        let rank = dims.len();
        let g = if g.rank() == rank {
            g.clone()
        } else {
            g.reshape(&vec![1; rank])?
        };
        g.broadcast_to(dims)
    }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn cosine_cost_backward(p: &Tensor, q: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, n) = (p.dims()[0], p.dims()[1]);
    let m = q.dims()[1];
    let (pd, qd, gd) = (p.data(), q.data(), g.data());
    let np = ops::column_norms(p);
    let nq = ops::column_norms(q);
    let mut dots = vec![0.0; n * m];
    ops::gemm(n, c, m, pd, true, qd, false, &mut dots, false);
    // Gamma_ij = 1 - s_ij / d_ij with d_ij = |p_i||q_j| + eps.
    let mut w = vec![0.0; n * m]; // dL/ds_ij
    let mut row_scale = vec![0.0; n]; // sum_j dL/dd_ij * |q_j|
    let mut col_scale = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let d = np[i] * nq[j] + ops::COSINE_EPS;
            let gij = gd[i * m + j];
            w[i * m + j] = -gij / d;
            let gd_ij = gij * dots[i * m + j] / (d * d);
            row_scale[i] += gd_ij * nq[j];
            col_scale[j] += gd_ij * np[i];
        }
    }
    // dL/dP = Q W^T + P diag(row_scale / |p_i|)
    let mut gp = vec![0.0; c * n];
    ops::gemm(c, m, n, qd, false, &w, true, &mut gp, false);
    for k in 0..c {
        for i in 0..n {
            if np[i] > 0.0 {
                gp[k * n + i] += pd[k * n + i] * row_scale[i] / np[i];
            }
        }
    }
    let mut gq = vec![0.0; c * m];
    ops::gemm(c, n, m, pd, false, &w, false, &mut gq, false);
    for k in 0..c {
        for j in 0..m {
            if nq[j] > 0.0 {
                gq[k * m + j] += qd[k * m + j] * col_scale[j] / nq[j];
            }
        }
    }
    (
        Tensor::new(p.dims(), gp).unwrap(),
        Tensor::new(q.dims(), gq).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get(loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -3.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.scale(c, 2.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shared_leaf_accumulates_from_both_uses() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(5.0));
        let ya = tape.mul(w, a).unwrap();
        let yb = tape.mul(w, b).unwrap();
        let loss = tape.add(ya, yb).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn node_ids_are_topological() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.exp(x).unwrap();
        let z = tape.add(x, y).unwrap();
        assert!(x.id() < y.id() && y.id() < z.id());
        assert_eq!(tape.len(), 3);
    }
}
