//! Entropic optimal transport by Sinkhorn iterations on dual potentials.
//!
//! With potentials `f`, `g` the plan is `T_ij = exp((f_i + g_j - C_ij) / eps)`
//! and one iteration is
//!
//! ```text
//! f_i = eps ln a_i - eps LSE_j((g_j - C_ij) / eps)
//! g_j = eps ln b_j - eps LSE_i((f_i - C_ij) / eps)
//! ```
//!
//! Zero-mass rows and columns are dropped before iterating (their plan
//! entries are exactly zero) and the potentials of every iteration are
//! kept so the reverse pass can walk the unrolled iterations backwards.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

use super::DiscreteDistribution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// A solved entropic transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: Tensor,
    pub epsilon: f64,
    pub iterations: usize,
    pub flow: Tensor,
    /// Largest absolute violation of either marginal.
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// `sum T C + eps sum T (ln T - 1)`.
    pub fn objective(&self) -> f64 {
        entropic_objective(&self.flow, &self.cost, self.epsilon)
    }
}

/// `sum T C + eps sum T (ln T - 1)` with `0 ln 0 = 0`.
pub fn entropic_objective(plan: &Tensor, cost: &Tensor, epsilon: f64) -> f64 {
    plan.data()
        .iter()
        .zip(cost.data())
        .map(|(&t, &c)| {
            if t > 0.0 {
                t * c + epsilon * t * (t.ln() - 1.0)
            } else {
                0.0
            }
        })
        .sum()
}

/// Cost restricted to the support and the matching kernel `exp(-C / eps)`.
struct Kernel {
    cost: Vec<f64>,
    kern: Vec<f64>,
    n: usize,
    m: usize,
    eps: f64,
}

/// Sums below this are recomputed with an explicit log-sum-exp.
const KERNEL_FLOOR: f64 = 1e-250;

impl Kernel {
    fn new(cost: Vec<f64>, n: usize, m: usize, eps: f64) -> Self {
        let kern = cost.iter().map(|c| (-c / eps).exp()).collect();
        Kernel {
            cost,
            kern,
            n,
            m,
            eps,
        }
    }

    /// `exp((x - max x) / eps)` and `max x`.
    fn scaled(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (
            max,
            x.iter().map(|v| ((v - max) / self.eps).exp()).collect(),
        )
    }

    /// `sum_j K_ij v_j` for every row.
    fn row_sums(&self, v: &[f64]) -> Vec<f64> {
        self.kern
            .chunks(self.m)
            .map(|row| row.iter().zip(v).map(|(k, e)| k * e).sum())
            .collect()
    }

    /// `sum_i K_ij u_i` for every column.
    fn col_sums(&self, u: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.m];
        for (row, ui) in self.kern.chunks(self.m).zip(u) {
            for (s, k) in sums.iter_mut().zip(row) {
                *s += k * ui;
            }
        }
        sums
    }

    /// `LSE_j((g_j - C_ij) / eps)` for every row `i`.
    fn row_lse(&self, g: &[f64]) -> Vec<f64> {
        let (gmax, v) = self.scaled(g);
        let sums = self.row_sums(&v);
        (0..self.n)
            .map(|i| {
                if sums[i] >= KERNEL_FLOOR {
                    gmax / self.eps + sums[i].ln()
                } else {
                    lse((0..self.m).map(|j| (g[j] - self.cost[i * self.m + j]) / self.eps))
                }
            })
            .collect()
    }

    /// `LSE_i((f_i - C_ij) / eps)` for every column `j`.
    fn col_lse(&self, f: &[f64]) -> Vec<f64> {
        let (fmax, u) = self.scaled(f);
        let sums = self.col_sums(&u);
        (0..self.m)
            .map(|j| {
                if sums[j] >= KERNEL_FLOOR {
                    fmax / self.eps + sums[j].ln()
                } else {
                    lse((0..self.n).map(|i| (f[i] - self.cost[i * self.m + j]) / self.eps))
                }
            })
            .collect()
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let (n, m, eps) = (self.n, self.m, self.eps);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = ((f[i] + g[j] - self.cost[i * m + j]) / eps).exp();
            }
        }
        out
    }
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Everything the reverse pass needs.
struct Solved {
    rows: Vec<usize>,
    cols: Vec<usize>,
    kernel: Kernel,
    /// Potentials after each iteration: `(f^k, g^k)`.
    history: Vec<(Vec<f64>, Vec<f64>)>,
    plan: Vec<f64>,
    error: f64,
}

fn validate(cost: &Tensor, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<(usize, usize)> {
    let [n, m] = cost.dims() else {
        return Err(Error::Invalid(format!(
            "cost must be a matrix, got {:?}",
            cost.dims()
        )));
    };
    if *n != a.len() || *m != b.len() {
        return Err(Error::Invalid(format!(
            "cost {:?} does not match marginals of length {} and {}",
            cost.dims(),
            a.len(),
            b.len()
        )));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::Invalid(format!(
            "epsilon must be positive, got {}",
            cfg.epsilon
        )));
    }
    if cfg.max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    if !cost.is_finite() {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    Ok((*n, *m))
}

fn solve(cost: &Tensor, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<Solved> {
    let (_, m) = validate(cost, a, b, cfg)?;
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Invalid("marginals carry no mass".into()));
    }
    let (rn, cm) = (rows.len(), cols.len());
    let mut sub = Vec::with_capacity(rn * cm);
    for &i in &rows {
        for &j in &cols {
            sub.push(cost.data()[i * m + j]);
        }
    }
    let eps = cfg.epsilon;
    let kernel = Kernel::new(sub, rn, cm, eps);
    let log_a: Vec<f64> = rows.iter().map(|&i| a[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| b[j].ln()).collect();

    let mut g = vec![0.0; cm];
    let mut history = Vec::new();
    let mut error = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let rl = kernel.row_lse(&g);
        let f: Vec<f64> = log_a
            .iter()
            .zip(&rl)
            .map(|(la, l)| eps * (la - l))
            .collect();
        let cl = kernel.col_lse(&f);
        g = log_b
            .iter()
            .zip(&cl)
            .map(|(lb, l)| eps * (lb - l))
            .collect();
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "Sinkhorn potentials became non-finite; epsilon = {eps} is too small for this cost"
            )));
        }
        // Columns match exactly after the g update; measure the rows.
        let rl = kernel.row_lse(&g);
        error = rows
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let row_mass = ((f[k] / eps) + rl[k]).exp();
                (row_mass - a[i]).abs()
            })
            .fold(0.0, f64::max);
        history.push((f, g.clone()));
        if error < cfg.tol {
            break;
        }
    }
    let (f, g) = history.last().expect("at least one iteration");
    let plan = kernel.plan(f, g);
    Ok(Solved {
        rows,
        cols,
        kernel,
        history,
        plan,
        error,
    })
}

fn embed(solved: &Solved, values: &[f64], n: usize, m: usize) -> Tensor {
    let mut full = vec![0.0; n * m];
    let cm = solved.cols.len();
    for (ri, &i) in solved.rows.iter().enumerate() {
        for (ci, &j) in solved.cols.iter().enumerate() {
            full[i * m + j] = values[ri * cm + ci];
        }
    }
    Tensor::new(&[n, m], full).expect("plan dims")
}

fn marginal_error(plan: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let m = b.len();
    let d = plan.data();
    let row = (0..a.len())
        .map(|i| (d[i * m..(i + 1) * m].iter().sum::<f64>() - a[i]).abs())
        .fold(0.0, f64::max);
    let col = (0..m)
        .map(|j| ((0..a.len()).map(|i| d[i * m + j]).sum::<f64>() - b[j]).abs())
        .fold(0.0, f64::max);
    row.max(col)
}

/// Solves the entropic transport problem between `source` (rows) and
/// `target` (columns).
pub fn sinkhorn(
    cost: &Tensor,
    source: &DiscreteDistribution,
    target: &DiscreteDistribution,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let (a, b) = (source.weights().data(), target.weights().data());
    let solved = solve(cost, a, b, cfg)?;
    let flow = embed(&solved, &solved.plan, a.len(), b.len());
    let error = marginal_error(&flow, a, b);
    Ok(TransportPlan {
        cost: cost.clone(),
        epsilon: cfg.epsilon,
        iterations: solved.history.len(),
        converged: solved.error < cfg.tol,
        marginal_error: error,
        flow,
    })
}

struct SinkhornOp {
    solved: Solved,
    n: usize,
    m: usize,
}

impl CustomOp for SinkhornOp {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn backward(
        &self,
        grad: &Tensor,
        _inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let s = &self.solved;
        let k = &s.kernel;
        let (rn, cm, eps) = (k.n, k.m, k.eps);
        let full_m = self.m;
        let mut g_cost = vec![0.0; rn * cm];
        let mut f_bar = vec![0.0; rn];
        let mut g_bar = vec![0.0; cm];
        for (ri, &i) in s.rows.iter().enumerate() {
            for (ci, &j) in s.cols.iter().enumerate() {
                let t = s.plan[ri * cm + ci];
                let w = grad.data()[i * full_m + j] * t / eps;
                g_cost[ri * cm + ci] -= w;
                f_bar[ri] += w;
                g_bar[ci] += w;
            }
        }
        let zero_g = vec![0.0; cm];
        for step in (0..s.history.len()).rev() {
            let (f, _) = &s.history[step];
            let g_prev = if step == 0 {
                &zero_g
            } else {
                &s.history[step - 1].1
            };
            // g = eps ln b - eps LSE_i((f_i - C_ij)/eps); P is the column softmax
            // P_ij = K_ij u_i / S_j.
            let (_, u) = k.scaled(f);
            let sums = k.col_sums(&u);
            let lse_cols: Vec<Option<f64>> = (0..cm)
                .map(|j| {
                    (sums[j] < KERNEL_FLOOR)
                        .then(|| lse((0..rn).map(|i| (f[i] - k.cost[i * cm + j]) / eps)))
                })
                .collect();
            let coef: Vec<f64> = (0..cm).map(|j| g_bar[j] / sums[j]).collect();
            for i in 0..rn {
                let mut acc = 0.0;
                for j in 0..cm {
                    let w = match lse_cols[j] {
                        None => k.kern[i * cm + j] * u[i] * coef[j],
                        Some(l) => g_bar[j] * ((f[i] - k.cost[i * cm + j]) / eps - l).exp(),
                    };
                    acc += w;
                    g_cost[i * cm + j] += w;
                }
                f_bar[i] -= acc;
            }
            // f = eps ln a - eps LSE_j((g_j - C_ij)/eps); Q is the row softmax
            // Q_ij = K_ij v_j / R_i.
            let (_, v) = k.scaled(g_prev);
            let sums = k.row_sums(&v);
            let mut next_g_bar = vec![0.0; cm];
            for i in 0..rn {
                let row = &k.kern[i * cm..(i + 1) * cm];
                if sums[i] >= KERNEL_FLOOR {
                    let c = f_bar[i] / sums[i];
                    for j in 0..cm {
                        let w = row[j] * v[j] * c;
                        next_g_bar[j] -= w;
                        g_cost[i * cm + j] += w;
                    }
                } else {
                    let l = lse((0..cm).map(|j| (g_prev[j] - k.cost[i * cm + j]) / eps));
                    for j in 0..cm {
                        let w = f_bar[i] * ((g_prev[j] - k.cost[i * cm + j]) / eps - l).exp();
                        next_g_bar[j] -= w;
                        g_cost[i * cm + j] += w;
                    }
                }
            }
            g_bar = next_g_bar;
            f_bar.iter_mut().for_each(|v| *v = 0.0);
        }
        vec![Some(embed(s, &g_cost, self.n, self.m))]
    }
}

/// Differentiable Sinkhorn: the plan depends on `cost` through every
/// unrolled iteration; the marginals are constants.
pub fn sinkhorn_on_tape(
    tape: &mut Tape,
    cost: Var,
    source: &DiscreteDistribution,
    target: &DiscreteDistribution,
    cfg: &SinkhornConfig,
) -> Result<(Var, TransportPlan)> {
    let (a, b) = (source.weights().data(), target.weights().data());
    let cost_value = tape.value(cost).clone();
    let solved = solve(&cost_value, a, b, cfg)?;
    let (n, m) = (a.len(), b.len());
    let flow = embed(&solved, &solved.plan, n, m);
    let plan = TransportPlan {
        epsilon: cfg.epsilon,
        iterations: solved.history.len(),
        converged: solved.error < cfg.tol,
        marginal_error: marginal_error(&flow, a, b),
        flow: flow.clone(),
        cost: cost_value,
    };
    let var = tape.custom(&[cost], flow, Box::new(SinkhornOp { solved, n, m }));
    Ok((var, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(w: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(Tensor::from_vec(w.to_vec())).unwrap()
    }

    #[test]
    fn single_cell_plan() {
        let plan = sinkhorn(
            &Tensor::new(&[1, 1], vec![0.7]).unwrap(),
            &dist(&[1.0]),
            &dist(&[1.0]),
            &SinkhornConfig::default(),
        )
        .unwrap();
        assert!((plan.flow.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_gives_independent_coupling() {
        let plan = sinkhorn(
            &Tensor::full(&[2, 2], 0.3),
            &dist(&[0.5, 0.5]),
            &dist(&[0.25, 0.75]),
            &SinkhornConfig::default(),
        )
        .unwrap();
        for (got, want) in plan.flow.data().iter().zip([0.125, 0.375, 0.125, 0.375]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(plan.converged);
    }

    #[test]
    fn zero_mass_rows_get_zero_flow() {
        let cost = Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.3).sin().abs());
        let plan = sinkhorn(
            &cost,
            &dist(&[0.5, 0.0, 0.5]),
            &dist(&[0.4, 0.6]),
            &SinkhornConfig::default(),
        )
        .unwrap();
        assert_eq!(&plan.flow.data()[2..4], &[0.0, 0.0]);
        assert!(plan.marginal_error < 1e-6);
    }

    #[test]
    fn tiny_epsilon_stays_finite() {
        let cost = Tensor::new(&[2, 2], vec![0.0, 500.0, 500.0, 0.0]).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            ..Default::default()
        };
        let plan = sinkhorn(&cost, &dist(&[0.5, 0.5]), &dist(&[0.5, 0.5]), &cfg).unwrap();
        assert!((plan.flow.data()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cost = Tensor::zeros(&[2, 2]);
        let bad_eps = SinkhornConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(sinkhorn(&cost, &dist(&[0.5, 0.5]), &dist(&[0.5, 0.5]), &bad_eps).is_err());
        assert!(sinkhorn(
            &cost,
            &dist(&[1.0]),
            &dist(&[0.5, 0.5]),
            &SinkhornConfig::default()
        )
        .is_err());
    }
}
