//! Nonnegative least squares, `min ‖b − A x‖ s.t. x ≥ 0`, for tall systems
//! with few columns.
//!
//! Lawson–Hanson active-set iterations run on the Gram matrix `AᵀA`, so the
//! cost after the initial `O(rows · cols²)` products depends only on `cols`.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    /// `‖b − A x‖₂`, evaluated directly from the columns.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Solves NNLS where `columns[j]` is the j-th column of `A`.
pub fn nnls(columns: &[Vec<f64>], b: &[f64]) -> Result<NnlsSolution> {
    let n = columns.len();
    if n == 0 {
        return Err(Error::Input("nnls needs at least one column".into()));
    }
    for c in columns {
        ensure_dim("nnls column length", b.len(), c.len())?;
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = linalg::dot(&columns[i], &columns[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let atb = DVector::from_iterator(n, columns.iter().map(|c| linalg::dot(c, b)));
    if !gram.iter().chain(atb.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("nnls system".into()));
    }

    let scale = atb.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;
    let mut iterations = 0;

    for _ in 0..max_outer {
        let w = &atb - &gram * &x;
        let next = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&a, &c| w[a].total_cmp(&w[c]).then(c.cmp(&a)));
        let Some(j) = next else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;
        iterations += 1;

        loop {
            let s = solve_passive(&gram, &atb, &passive);
            if (0..n).all(|i| !passive[i] || s[i] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in 0..n {
                if passive[i] && s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            x += (&s - &x) * alpha;
            let floor = f64::EPSILON * x.amax();
            for i in 0..n {
                if passive[i] && x[i] <= floor {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }

    let xs: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let residual_norm = residual(columns, &xs, b).sqrt();
    Ok(NnlsSolution {
        x: xs,
        residual_norm,
        iterations,
    })
}

/// `‖b − A x‖²`.
pub fn residual(columns: &[Vec<f64>], x: &[f64], b: &[f64]) -> f64 {
    let mut r = b.to_vec();
    for (c, &xi) in columns.iter().zip(x) {
        if xi != 0.0 {
            linalg::axpy(-xi, c, &mut r);
        }
    }
    linalg::norm_sq(&r)
}

fn solve_passive(gram: &DMatrix<f64>, atb: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |r, c| gram[(idx[r], idx[c])]);
    let rhs = DVector::from_iterator(k, idx.iter().map(|&i| atb[i]));
    let sol = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let eps = 1e-12 * sub.amax().max(f64::MIN_POSITIVE);
            sub.svd(true, true)
                .solve(&rhs, eps)
                .unwrap_or_else(|_| DVector::zeros(k))
        }
    };
    let mut out = DVector::zeros(passive.len());
    for (r, &i) in idx.iter().enumerate() {
        out[i] = sol[r];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Exhaustive oracle: unconstrained least squares on every support set,
    /// keeping feasible solutions only.
    fn brute_force(columns: &[Vec<f64>], b: &[f64]) -> f64 {
        let n = columns.len();
        let mut best = linalg::norm_sq(b);
        for mask in 1u32..(1 << n) {
            let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let a = DMatrix::from_fn(b.len(), idx.len(), |r, c| columns[idx[c]][r]);
            let bb = DVector::from_column_slice(b);
            let Ok(sol) = a.clone().svd(true, true).solve(&bb, 1e-14) else { continue };
            if sol.iter().all(|&v| v >= 0.0) {
                let mut x = vec![0.0; n];
                for (r, &i) in idx.iter().enumerate() {
                    x[i] = sol[r];
                }
                best = best.min(residual(columns, &x, b));
            }
        }
        best
    }

    #[test]
    fn exact_nonnegative_combination() {
        let cols = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
        let b = [3.0, 2.0, 1.0];
        let s = nnls(&cols, &b).unwrap();
        assert!(s.residual_norm < 1e-12);
        assert!((s.x[0] - 2.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12 && (s.x[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_direction_is_clamped() {
        let cols = vec![vec![1.0, 0.0]];
        let s = nnls(&cols, &[-1.0, 0.5]).unwrap();
        assert_eq!(s.x, vec![0.0]);
        assert!((s.residual_norm - (1.25f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_on_random_systems() {
        for seed in 0..40 {
            let mut r = rng::seeded(seed);
            let n = 1 + (seed as usize % 6);
            let rows = 8;
            let cols: Vec<Vec<f64>> = (0..n).map(|_| rng::gaussian_vec(&mut r, rows, 1.0)).collect();
            let b = rng::gaussian_vec(&mut r, rows, 1.0);
            let s = nnls(&cols, &b).unwrap();
            assert!(s.x.iter().all(|&v| v >= 0.0));
            let want = brute_force(&cols, &b);
            let got = s.residual_norm.powi(2);
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn duplicate_columns_do_not_break_solver() {
        let c = vec![1.0, 2.0, 3.0];
        let s = nnls(&[c.clone(), c.clone(), vec![0.0, 0.0, 1.0]], &[2.0, 4.0, 7.0]).unwrap();
        assert!(s.residual_norm < 1e-10);
    }
}
