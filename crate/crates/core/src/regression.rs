//! Least-squares conditional expectations on a polynomial basis in the state.
//!
//! States are standardised before building the basis and values are shifted
//! by their first entry, so constant targets are reproduced exactly and the
//! normal equations stay well conditioned. All sums use fixed chunk
//! boundaries combined in order, which keeps fits bit-identical across
//! thread counts.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

const CHUNK: usize = 4096;
const RANK_TOL: f64 = 1e-10;

/// Polynomial in the standardised state `s = (x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedFunction {
    pub requested_degree: usize,
    pub degree: usize,
    pub center: f64,
    pub scale: f64,
    pub shift: f64,
    pub coeffs: Vec<f64>,
}

impl FittedFunction {
    pub fn constant(value: f64, requested_degree: usize) -> Self {
        Self {
            requested_degree,
            degree: 0,
            center: 0.0,
            scale: 1.0,
            shift: value,
            coeffs: vec![0.0],
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let s = (x - self.center) / self.scale;
        let mut acc = 0.0;
        for c in self.coeffs.iter().rev() {
            acc = acc * s + c;
        }
        acc + self.shift
    }

    /// Whether the fit fell back to a lower degree than requested.
    pub fn reduced(&self) -> bool {
        self.degree < self.requested_degree
    }
}

/// Projection of `values` onto `{1, x, …, x^degree}` evaluated through the
/// returned function.
pub fn condexp_fit(values: &[f64], states: &[f64], degree: usize) -> Result<FittedFunction> {
    if values.len() != states.len() {
        return Err(Error::Structural(format!(
            "{} values against {} states",
            values.len(),
            states.len()
        )));
    }
    Ok(fit_masked(values, states, None, degree))
}

fn chunked_sum<F>(n: usize, f: F) -> (f64, usize)
where
    F: Fn(usize) -> Option<f64> + Sync,
{
    let parts: Vec<(f64, usize)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            let mut m = 0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                if let Some(v) = f(i) {
                    s += v;
                    m += 1;
                }
            }
            (s, m)
        })
        .collect();
    parts
        .into_iter()
        .fold((0.0, 0), |(s, m), (a, b)| (s + a, m + b))
}

/// Fit restricted to entries with `mask[i]` set (all entries if `None`).
pub(crate) fn fit_masked(
    values: &[f64],
    states: &[f64],
    mask: Option<&[bool]>,
    degree: usize,
) -> FittedFunction {
    let n = values.len();
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let Some(first) = (0..n).find(|&i| on(i)) else {
        return FittedFunction::constant(0.0, degree);
    };
    let shift = values[first];

    let (sum_x, count) = chunked_sum(n, |i| on(i).then(|| states[i]));
    let center = sum_x / count as f64;
    let (ss, _) = chunked_sum(n, |i| on(i).then(|| (states[i] - center).powi(2)));
    let sd = (ss / count as f64).sqrt();

    let mut deg = degree;
    while deg > 0 && deg + 1 >= count {
        deg -= 1;
    }
    let degenerate = !(sd > 1e-12 * (1.0 + center.abs()));
    if degenerate {
        deg = 0;
    }
    let scale = if degenerate { 1.0 } else { sd };
    let m = deg + 1;

    // Normal equations G c = r, accumulated per chunk then in chunk order.
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; m * m];
            let mut r = vec![0.0; m];
            let mut phi = vec![0.0; m];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                if !on(i) {
                    continue;
                }
                let s = (states[i] - center) / scale;
                let v = values[i] - shift;
                let mut p = 1.0;
                for slot in phi.iter_mut() {
                    *slot = p;
                    p *= s;
                }
                for a in 0..m {
                    r[a] += phi[a] * v;
                    for b in a..m {
                        g[a * m + b] += phi[a] * phi[b];
                    }
                }
            }
            (g, r)
        })
        .collect();
    let mut g = vec![0.0; m * m];
    let mut r = vec![0.0; m];
    for (pg, pr) in parts {
        for (a, b) in g.iter_mut().zip(&pg) {
            *a += b;
        }
        for (a, b) in r.iter_mut().zip(&pr) {
            *a += b;
        }
    }
    for a in 0..m {
        for b in 0..a {
            g[a * m + b] = g[b * m + a];
        }
    }

    // Nested basis: on rank deficiency retry with the leading sub-system.
    let mut k = m;
    loop {
        let sub_g: Vec<f64> = (0..k * k).map(|ij| g[(ij / k) * m + ij % k]).collect();
        if let Some(coeffs) = solve_pivoted(sub_g, r[..k].to_vec()) {
            return FittedFunction {
                requested_degree: degree,
                degree: k - 1,
                center,
                scale,
                shift,
                coeffs,
            };
        }
        k -= 1;
    }
}

/// Gaussian elimination with partial pivoting; `None` if a pivot is
/// negligible relative to the matrix diagonal.
fn solve_pivoted(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let diag_max = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    if n == 1 {
        // A single constant column is never rank deficient with data present.
        return Some(vec![if a[0] > 0.0 { b[0] / a[0] } else { 0.0 }]);
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if !(a[piv * n + col].abs() > RANK_TOL * diag_max) {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let p = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            if f != 0.0 {
                for j in col..n {
                    a[row * n + j] -= f * a[col * n + j];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for j in row + 1..n {
            s -= a[row * n + j] * x[j];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_values_fitted_exactly() {
        let states: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let values = vec![2.75; 1000];
        let f = condexp_fit(&values, &states, 3).unwrap();
        for x in [-5.0, 0.0, 0.3, 12.0] {
            assert_eq!(f.eval(x), 2.75);
        }
    }

    #[test]
    fn identity_recovered() {
        let states: Vec<f64> = (0..500).map(|i| (i as f64 * 1.3).cos() * 3.0 + 1.0).collect();
        let f = condexp_fit(&states, &states, 2).unwrap();
        for x in [-2.0, 0.0, 1.0, 3.5] {
            assert!((f.eval(x) - x).abs() < 1e-10);
        }
    }

    #[test]
    fn square_on_symmetric_states_with_linear_basis() {
        let half: Vec<f64> = (1..=200).map(|i| i as f64 / 50.0).collect();
        let states: Vec<f64> = half.iter().flat_map(|&s| [s, -s]).collect();
        let values: Vec<f64> = states.iter().map(|s| s * s).collect();
        let f = condexp_fit(&values, &states, 1).unwrap();
        // Closed-form OLS: slope = cov(x, y)/var(x), intercept = ȳ − slope·x̄.
        let n = states.len() as f64;
        let xm = states.iter().sum::<f64>() / n;
        let ym = values.iter().sum::<f64>() / n;
        let cov = states.iter().zip(&values).map(|(x, y)| (x - xm) * (y - ym)).sum::<f64>();
        let var = states.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
        let slope = cov / var;
        let icpt = ym - slope * xm;
        assert!(slope.abs() < 1e-12);
        for x in [-1.0, 0.0, 2.0] {
            assert!((f.eval(x) - (icpt + slope * x)).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_states_reduce_degree() {
        let states = vec![1.0; 100];
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let f = condexp_fit(&values, &states, 2).unwrap();
        assert!(f.reduced());
        assert!((f.eval(1.0) - 49.5).abs() < 1e-12);
    }

    #[test]
    fn two_distinct_states_cap_degree() {
        let states: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let values: Vec<f64> = states.iter().map(|s| 3.0 * s + 1.0).collect();
        let f = condexp_fit(&values, &states, 3).unwrap();
        assert!(f.reduced());
        assert!((f.eval(0.0) - 1.0).abs() < 1e-10);
        assert!((f.eval(1.0) - 4.0).abs() < 1e-10);
    }

    #[test]
    fn mask_restricts_sample() {
        let states: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let values: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { 100.0 }).collect();
        let mask: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let f = fit_masked(&values, &states, Some(&mask), 2);
        assert_eq!(f.eval(7.0), 1.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(condexp_fit(&[1.0], &[1.0, 2.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn residual_orthogonal_to_basis(seed in 0u64..500, deg in 0usize..4) {
            let n = 300;
            let states: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 250.0 - 2.0).collect();
            let values: Vec<f64> = states.iter().enumerate().map(|(i, s)| s.exp() + ((i as u64 ^ seed) % 7) as f64 * 0.1).collect();
            let f = condexp_fit(&values, &states, deg).unwrap();
            let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for j in 0..=f.degree {
                let dot: f64 = states.iter().zip(&values)
                    .map(|(x, v)| (v - f.eval(*x)) * ((x - f.center) / f.scale).powi(j as i32))
                    .sum();
                prop_assert!(dot.abs() < 1e-8 * n as f64 * scale);
            }
        }
    }
}
