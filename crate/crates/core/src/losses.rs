//! Classification and equivariant-regularization losses.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Scalar values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_er: f64,
    pub l_total: f64,
    pub ce_f_p: f64,
    pub ce_f_h: f64,
    /// Cross-entropies of the refined features, when matching ran.
    pub ce_t_p: Option<f64>,
    pub ce_t_h: Option<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_cls,
            self.l_er,
            self.l_total,
            self.ce_f_p,
            self.ce_f_h,
        ]
        .into_iter()
        .chain(self.ce_t_p)
        .chain(self.ce_t_h)
        .all(f64::is_finite)
    }

    /// Names the first term that is not finite.
    pub fn diverged_term(&self) -> Option<&'static str> {
        let terms = [
            ("ce_f_p", Some(self.ce_f_p)),
            ("ce_f_h", Some(self.ce_f_h)),
            ("ce_t_p", self.ce_t_p),
            ("ce_t_h", self.ce_t_h),
            ("l_cls", Some(self.l_cls)),
            ("l_er", Some(self.l_er)),
            ("l_total", Some(self.l_total)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

/// Softmax cross-entropy `-log softmax(logits)[y]` of a length-`c` vector.
pub fn cross_entropy(tape: &mut Tape, logits: Var, y: usize) -> Result<Var> {
    let c = match tape.dims(logits) {
        [c] => *c,
        d => {
            return Err(Error::Invalid(format!(
                "logits must be a vector, got {d:?}"
            )))
        }
    };
    if y >= c {
        return Err(Error::Invalid(format!(
            "label {y} out of range for {c} classes"
        )));
    }
    let lp = tape.log_softmax(logits, 0)?;
    let pick = tape.narrow(lp, 0, y, 1)?;
    let s = tape.sum_all(pick);
    Ok(tape.scale(s, -1.0))
}

/// `1/2 [CE(F'_p) + CE(F'_h)] + 1/2 [CE(T_p) + CE(T_h)]`; the second pair is
/// left out when `refined` is `None`.
pub fn classification_loss(
    tape: &mut Tape,
    feature_logits: (Var, Var),
    refined_logits: Option<(Var, Var)>,
    y: usize,
) -> Result<(Var, [Option<f64>; 4])> {
    let pair = |tape: &mut Tape, (p, h): (Var, Var)| -> Result<(Var, f64, f64)> {
        let cp = cross_entropy(tape, p, y)?;
        let ch = cross_entropy(tape, h, y)?;
        let s = tape.add(cp, ch)?;
        let vals = (tape.value(cp).item()?, tape.value(ch).item()?);
        Ok((tape.scale(s, 0.5), vals.0, vals.1))
    };
    let (ce_f, fp, fh) = pair(tape, feature_logits)?;
    match refined_logits {
        None => Ok((ce_f, [Some(fp), Some(fh), None, None])),
        Some(r) => {
            let (ce_t, tp, th) = pair(tape, r)?;
            Ok((
                tape.add(ce_f, ce_t)?,
                [Some(fp), Some(fh), Some(tp), Some(th)],
            ))
        }
    }
}

fn channel(tape: &mut Tape, t: Var, y: usize) -> Result<Var> {
    let (c, h, w) = match tape.dims(t) {
        [c, h, w] => (*c, *h, *w),
        d => {
            return Err(Error::Invalid(format!(
                "refined maps must be c x h x w, got {d:?}"
            )))
        }
    };
    if y >= c {
        return Err(Error::Invalid(format!(
            "label {y} out of range for {c} classes"
        )));
    }
    let ch = tape.narrow(t, 0, y, 1)?;
    Ok(tape.reshape(ch, &[h, w])?)
}

fn mae(tape: &mut Tape, a: Var, target: &Tensor) -> Result<Var> {
    if tape.dims(a) != target.dims() {
        return Err(Error::Invalid(format!(
            "map {:?} does not match target {:?}",
            tape.dims(a),
            target.dims()
        )));
    }
    let t = tape.constant(target.clone());
    Ok(tape.l1_distance(a, t)?)
}

/// `MAE(T_p[y], M_h) + MAE(T_h[y], M_p)`, with the targets held constant.
pub fn equivariant_loss(
    tape: &mut Tape,
    t_p: Var,
    t_h: Var,
    m_p: &Tensor,
    m_h: &Tensor,
    y: usize,
) -> Result<Var> {
    let tp = channel(tape, t_p, y)?;
    let th = channel(tape, t_h, y)?;
    let a = mae(tape, tp, m_h)?;
    let b = mae(tape, th, m_p)?;
    Ok(tape.add(a, b)?)
}

/// [`equivariant_loss`] after min-max normalizing the selected channels and
/// the targets to `[0, 1]`.
pub fn normalized_equivariant_loss(
    tape: &mut Tape,
    t_p: Var,
    t_h: Var,
    m_p: &Tensor,
    m_h: &Tensor,
    y: usize,
) -> Result<Var> {
    let tp = channel(tape, t_p, y)?;
    let th = channel(tape, t_h, y)?;
    let hw = tape.value(tp).numel();
    let tp = tape.minmax_normalize(tp, hw)?;
    let th = tape.minmax_normalize(th, hw)?;
    let m_p = crate::maps::normalize_map(m_p);
    let m_h = crate::maps::normalize_map(m_h);
    let a = mae(tape, tp, &m_h)?;
    let b = mae(tape, th, &m_p)?;
    Ok(tape.add(a, b)?)
}

pub fn total_loss(l_cls: f64, l_er: f64, lambda: f64) -> f64 {
    l_cls + lambda * l_er
}

pub fn total_loss_on_tape(
    tape: &mut Tape,
    l_cls: Var,
    l_er: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    match l_er {
        None => Ok(l_cls),
        Some(er) => {
            let w = tape.scale(er, lambda);
            Ok(tape.add(l_cls, w)?)
        }
    }
}
