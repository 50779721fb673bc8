//! Brute-force minimizer of the entropic transport objective for tiny
//! instances, used to check the Sinkhorn solver.
//!
//! The free coordinates are `T_ij` for `i < n-1`, `j < m-1`; the last row and
//! column follow from the marginals. The objective is strictly convex on the
//! transportation polytope, so a coarse grid scan followed by successively
//! finer windowed scans around the incumbent converges to the minimizer. A
//! window is re-centred at the same resolution whenever the incumbent lands on
//! its edge, so the search can travel along a face of the polytope.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SIDE: usize = 3;
const FINEST_STEP: f64 = 1e-6;

/// Minimizes `sum T C + eps sum T (ln T - 1)` over couplings of `a` and `b`.
pub fn exact_entropic_oracle(cost: &Tensor, a: &[f64], b: &[f64], epsilon: f64) -> Result<Tensor> {
    let [n, m] = cost.dims() else {
        return Err(Error::Invalid(format!(
            "cost must be a matrix, got {:?}",
            cost.dims()
        )));
    };
    let (n, m) = (*n, *m);
    if n > MAX_SIDE || m > MAX_SIDE {
        return Err(Error::Invalid(format!(
            "exhaustive oracle supports at most {MAX_SIDE}x{MAX_SIDE}, got {n}x{m}"
        )));
    }
    if a.len() != n || b.len() != m {
        return Err(Error::Invalid(
            "marginal lengths do not match the cost".into(),
        ));
    }
    if a.iter().chain(b).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid("marginals must be non-negative".into()));
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (sa - sb).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "infeasible marginals: sums {sa} and {sb} differ"
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::Invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }

    let free: Vec<(usize, usize)> = (0..n - 1)
        .flat_map(|i| (0..m - 1).map(move |j| (i, j)))
        .collect();
    let upper: Vec<f64> = free.iter().map(|&(i, j)| a[i].min(b[j])).collect();
    let mut buf = vec![0.0; n * m];
    let mut eval = |x: &[f64]| -> Option<f64> {
        complete(x, &free, a, b, n, m, &mut buf)?;
        Some(objective(&buf, cost.data(), epsilon))
    };

    if free.is_empty() {
        return finish(&[], &free, a, b, n, m);
    }
    let (coarse, window) = if free.len() <= 2 {
        (1e-2, 30)
    } else {
        (5e-2, 15)
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut step = coarse;
    // Level 0 scans the whole box; later levels scan a window around `best`.
    loop {
        let centre = best.as_ref().map(|(_, x)| x.clone());
        let axes: Vec<Vec<f64>> = free
            .iter()
            .enumerate()
            .map(|(k, _)| match &best {
                None => grid(0.0, upper[k], step),
                Some((_, x)) => grid(
                    (x[k] - window as f64 * step).max(0.0),
                    (x[k] + window as f64 * step).min(upper[k]),
                    step,
                ),
            })
            .collect();
        let mut idx = vec![0usize; axes.len()];
        let mut x = vec![0.0; axes.len()];
        loop {
            for (k, &i) in idx.iter().enumerate() {
                x[k] = axes[k][i];
            }
            if let Some(obj) = eval(&x) {
                if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                    best = Some((obj, x.clone()));
                }
            }
            // odometer increment
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
        if best.is_none() {
            return Err(Error::Invalid(
                "no feasible coupling found on the grid".into(),
            ));
        }
        // an incumbent on an interior window edge may lie further out, so
        // rescan around it at the same resolution before refining
        let (_, x) = best.as_ref().expect("checked above");
        let on_edge = centre.is_some_and(|c| {
            x.iter().zip(&c).zip(&upper).any(|((&v, &c), &u)| {
                let reach = window as f64 * step * (1.0 - 1e-9);
                ((v - c).abs() >= reach) && v > 0.0 && v < u
            })
        });
        if on_edge {
            continue;
        }
        if step <= FINEST_STEP * 1.5 {
            break;
        }
        step /= 10.0;
    }
    let (_, x) = best.expect("checked above");
    finish(&x, &free, a, b, n, m)
}

fn finish(
    x: &[f64],
    free: &[(usize, usize)],
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
) -> Result<Tensor> {
    let mut buf = vec![0.0; n * m];
    complete(x, free, a, b, n, m, &mut buf)
        .ok_or_else(|| Error::Invalid("no feasible coupling".into()))?;
    Ok(Tensor::new(&[n, m], buf)?)
}

fn objective(t: &[f64], c: &[f64], eps: f64) -> f64 {
    t.iter()
        .zip(c)
        .map(|(&t, &c)| {
            if t > 0.0 {
                t * c + eps * t * (t.ln() - 1.0)
            } else {
                0.0
            }
        })
        .sum()
}

/// Grid from `lo` to `hi` inclusive at spacing `step`.
fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).floor() as usize;
    let mut out: Vec<f64> = (0..=count).map(|k| lo + k as f64 * step).collect();
    if hi - out[count] > 1e-15 {
        out.push(hi);
    }
    out
}

fn complete(
    x: &[f64],
    free: &[(usize, usize)],
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    t: &mut [f64],
) -> Option<()> {
    const SLACK: f64 = 1e-12;
    for (&(i, j), &v) in free.iter().zip(x) {
        t[i * m + j] = v;
    }
    for i in 0..n - 1 {
        t[i * m + m - 1] = a[i] - (0..m - 1).map(|j| t[i * m + j]).sum::<f64>();
    }
    for j in 0..m {
        t[(n - 1) * m + j] = b[j] - (0..n - 1).map(|i| t[i * m + j]).sum::<f64>();
    }
    if t.iter().any(|&v| v < -SLACK) {
        return None;
    }
    t.iter_mut().for_each(|v| *v = v.max(0.0));
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_closed_form() {
        let cost = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let t = exact_entropic_oracle(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.1).unwrap();
        let want = 0.5 / (1.0 + (-10.0f64).exp());
        assert!((t.data()[0] - want).abs() < 2e-6, "{}", t.data()[0]);
    }

    #[test]
    fn large_epsilon_gives_independent_coupling() {
        let cost = Tensor::new(&[2, 3], vec![0.1, 0.9, 0.4, 0.7, 0.2, 0.5]).unwrap();
        let (a, b) = ([0.3, 0.7], [0.2, 0.5, 0.3]);
        let t = exact_entropic_oracle(&cost, &a, &b, 1e4).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((t.at(&[i, j]) - a[i] * b[j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn follows_a_face_beyond_the_first_window() {
        // optimum sits on the face T[0][2] = 0, about 0.02 away from where the
        // coarse scan lands
        let cost = Tensor::new(
            &[2, 3],
            vec![
                0.0035091690987534285,
                1.1623679477454796,
                1.9518856930442037,
                0.9511041701513232,
                1.965603881047047,
                0.10893553508382192,
            ],
        )
        .unwrap();
        let a = [0.3241723630225322, 0.675827636977468];
        let b = [
            0.34180842836449116,
            0.30106784794404234,
            0.35712372369146633,
        ];
        let t = exact_entropic_oracle(&cost, &a, &b, 0.05).unwrap();
        assert!(
            (t.at(&[0, 0]) - 0.27113694).abs() < 1e-5,
            "{}",
            t.at(&[0, 0])
        );
        assert!(
            (t.at(&[0, 1]) - 0.05303542).abs() < 1e-5,
            "{}",
            t.at(&[0, 1])
        );
    }

    #[test]
    fn rejects_bad_instances() {
        let cost = Tensor::zeros(&[2, 2]);
        assert!(exact_entropic_oracle(&cost, &[0.5, 0.5], &[0.6, 0.6], 0.1).is_err());
        assert!(
            exact_entropic_oracle(&Tensor::zeros(&[4, 2]), &[0.25; 4], &[0.5; 2], 0.1).is_err()
        );
    }

    #[test]
    fn grid_includes_both_ends() {
        let g = grid(0.0, 0.25, 0.1);
        assert_eq!(g.len(), 4);
        assert_eq!(*g.last().unwrap(), 0.25);
    }
}
