//! Semantic-constraint matching: staircase-weighted distributions over the
//! activation maps, a cosine cost between spatial features, entropic
//! transport between the primal and shuffled views, and flow-based
//! refinement of the features.

mod oracle;
mod sinkhorn;

pub use oracle::exact_entropic_oracle;
pub use sinkhorn::{entropic_objective, sinkhorn, sinkhorn_on_tape, SinkhornConfig, TransportPlan};

use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{ops, Tape, Tensor, Var};
use crate::vit::{linear, transformer_block};

/// Thresholds `alpha` and weights `beta` of the four-level staircase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaircaseConfig {
    pub mu: f64,
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
}

impl StaircaseConfig {
    /// `alpha = [0, 0.4mu, 0.5mu, 0.6mu]`, `beta = [0, 0.8, 0.9, 1.0]`.
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!(
                "stair scale must be positive, got {mu}"
            )));
        }
        Self::with_levels(
            mu,
            [0.0, 0.4 * mu, 0.5 * mu, 0.6 * mu],
            [0.0, 0.8, 0.9, 1.0],
        )
    }

    pub fn with_levels(mu: f64, alpha: [f64; 4], beta: [f64; 4]) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!(
                "stair scale must be positive, got {mu}"
            )));
        }
        if alpha.windows(2).skip(1).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "staircase thresholds must increase: {alpha:?}"
            )));
        }
        if beta.iter().any(|&b| b < 0.0) {
            return Err(Error::Config(format!(
                "staircase weights must be non-negative: {beta:?}"
            )));
        }
        Ok(StaircaseConfig { mu, alpha, beta })
    }

    pub fn level(&self, v: f64) -> f64 {
        self.alpha
            .iter()
            .zip(&self.beta)
            .filter(|(a, _)| v > **a)
            .map(|(_, b)| b)
            .sum()
    }
}

/// `A(x) = sum_i beta_i [M(x) > alpha_i]` on a normalized map.
pub fn staircase(m: &Tensor, cfg: &StaircaseConfig) -> Tensor {
    m.map(|v| cfg.level(v))
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    weights: Tensor,
}

impl DiscreteDistribution {
    pub fn new(weights: Tensor) -> Result<Self> {
        let weights = weights.reshape(&[weights.numel()])?;
        if weights
            .data()
            .iter()
            .any(|&w| !(w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Invalid(
                "distribution weights must be finite and non-negative".into(),
            ));
        }
        let s = weights.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "distribution weights sum to {s}, not 1"
            )));
        }
        Ok(DiscreteDistribution { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("empty support".into()));
        }
        Ok(DiscreteDistribution {
            weights: Tensor::full(&[n], 1.0 / n as f64),
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattens `a` row-major and divides by its sum; an all-zero map becomes
/// the uniform distribution.
pub fn to_distribution(a: &Tensor) -> Result<DiscreteDistribution> {
    if a.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Invalid(
            "staircase weights must be non-negative".into(),
        ));
    }
    let s = a.sum();
    if s == 0.0 {
        return DiscreteDistribution::uniform(a.numel());
    }
    let flat = a.reshape(&[a.numel()])?;
    DiscreteDistribution::new(flat.map(|v| v / s))
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        d => Err(Error::Invalid(format!(
            "expected a c x h x w map, got {d:?}"
        ))),
    }
}

/// `Gamma_ij = 1 - cos(o_p^i, o_h^j)` between flattened spatial positions.
pub fn cost_matrix(o_p: &Tensor, o_h: &Tensor) -> Result<Tensor> {
    let (c, h, w) = spatial(o_p)?;
    if o_h.dims() != o_p.dims() {
        return Err(Error::Invalid(format!(
            "paired maps differ: {:?} vs {:?}",
            o_p.dims(),
            o_h.dims()
        )));
    }
    Ok(ops::cosine_cost(
        &o_p.reshape(&[c, h * w])?,
        &o_h.reshape(&[c, h * w])?,
    )?)
}

/// Differentiable version of [`cost_matrix`].
pub fn cost_matrix_on_tape(tape: &mut Tape, o_p: Var, o_h: Var) -> Result<Var> {
    let (c, h, w) = spatial(tape.value(o_p))?;
    if tape.dims(o_h) != tape.dims(o_p) {
        return Err(Error::Invalid(format!(
            "paired maps differ: {:?} vs {:?}",
            tape.dims(o_p),
            tape.dims(o_h)
        )));
    }
    let p = tape.reshape(o_p, &[c, h * w])?;
    let q = tape.reshape(o_h, &[c, h * w])?;
    Ok(tape.cosine_cost(p, q)?)
}

/// `T_p = O_p softmax(T)` and `T_h = O_h softmax(T^T)` with the softmax over
/// the source axis, reshaped back to `c x h x w`.
pub fn refine(tape: &mut Tape, o_p: Var, o_h: Var, flow: Var) -> Result<(Var, Var)> {
    let (c, h, w) = spatial(tape.value(o_p))?;
    let hw = h * w;
    if tape.dims(o_h) != tape.dims(o_p) {
        return Err(Error::Invalid("paired maps differ in shape".into()));
    }
    if tape.dims(flow) != [hw, hw] {
        return Err(Error::Invalid(format!(
            "flow must be {hw} x {hw}, got {:?}",
            tape.dims(flow)
        )));
    }
    let weights_p = tape.softmax(flow, 0)?;
    let flow_t = tape.transpose(flow)?;
    let weights_h = tape.softmax(flow_t, 0)?;
    let op = tape.reshape(o_p, &[c, hw])?;
    let oh = tape.reshape(o_h, &[c, hw])?;
    let tp = tape.matmul(op, weights_p)?;
    let th = tape.matmul(oh, weights_h)?;
    Ok((tape.reshape(tp, &[c, h, w])?, tape.reshape(th, &[c, h, w])?))
}

/// Joint attention over the tokens of both maps. Returns the inputs
/// unchanged when `enabled` is false.
pub fn across_transformer(
    tape: &mut Tape,
    params: &BoundParams,
    heads: usize,
    f_p: Var,
    f_h: Var,
    enabled: bool,
) -> Result<(Var, Var)> {
    let (c, h, w) = spatial(tape.value(f_p))?;
    if tape.dims(f_h) != tape.dims(f_p) {
        return Err(Error::Invalid(format!(
            "paired maps differ: {:?} vs {:?}",
            tape.dims(f_p),
            tape.dims(f_h)
        )));
    }
    if !enabled {
        return Ok((f_p, f_h));
    }
    let hw = h * w;
    let mut tokens = Vec::with_capacity(2);
    for f in [f_p, f_h] {
        let flat = tape.reshape(f, &[c, hw])?;
        tokens.push(tape.transpose(flat)?);
    }
    let seq = tape.concat(&tokens, 0)?;
    let x = linear(
        tape,
        seq,
        params.get("across.in.weight")?,
        params.get("across.in.bias")?,
    )?;
    let (x, _) = transformer_block(tape, params, "across.block", x, heads)?;
    let y = linear(
        tape,
        x,
        params.get("across.out.weight")?,
        params.get("across.out.bias")?,
    )?;
    let halves = tape.split(y, 0, &[hw, hw])?;
    let mut out = Vec::with_capacity(2);
    for half in halves {
        let t = tape.transpose(half)?;
        out.push(tape.reshape(t, &[c, h, w])?);
    }
    Ok((out[0], out[1]))
}
