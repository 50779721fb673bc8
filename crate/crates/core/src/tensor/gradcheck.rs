use super::{Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error. Central differences at step
/// 1e-5 carry about 1e-11 of rounding noise, so a gradient that is exactly
/// zero (a key bias under softmax, say) would otherwise score 1.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic - numeric| / max(DENOM_FLOOR, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// [`grad_check`] over several parameter tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::invalid("grad_check", "step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let base = points[p].data()[i];
            probe[p] = with_entry(&points[p], i, base + step);
            let plus = eval(&probe)?;
            probe[p] = with_entry(&points[p], i, base - step);
            let minus = eval(&probe)?;
            probe[p] = points[p].clone();
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn with_entry(t: &Tensor, i: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = value;
    Tensor::new(t.dims(), data).expect("same dims")
}
