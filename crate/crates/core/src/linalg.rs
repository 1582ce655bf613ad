//! Thin QR factorization and its reverse-mode derivative.
//!
//! The factorization uses modified Gram-Schmidt with one re-orthogonalization
//! pass, which is accurate to machine precision for the tall, skinny
//! matrices used here (`d × k` with small `k`). The diagonal of `R` is
//! positive by construction, so `Q` is a deterministic function of its input.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Relative residual below which a column is declared linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `A = QR` with `Q` column-orthonormal and `R` upper triangular with `R_jj > 0`.
pub fn thin_qr(a: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (d, k) = a.dim();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "thin QR needs 1 <= k <= d, got {d}x{k}"
        )));
    }
    let mut q = a.to_owned();
    let mut r = Array2::<f64>::zeros((k, k));
    for j in 0..k {
        let original = q.column(j).dot(&q.column(j)).sqrt();
        for _pass in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                r[[i, j]] += proj;
                let qi = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &qi);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if !(norm > RANK_TOLERANCE * original.max(1e-300)) || norm < 1e-300 {
            return Err(Error::DegenerateFrame { column: j, norm });
        }
        r[[j, j]] = norm;
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok((q, r))
}

/// Gradient with respect to `A` of a scalar loss, given its gradient `q_bar` with
/// respect to the `Q` factor of `A = QR` (the loss does not depend on `R`).
///
/// `Ā = (Q̄ + Q·copyltu(M))·R^{-T}` with `M = −Q̄ᵀQ`, where `copyltu` mirrors
/// the lower triangle onto the upper one.
pub fn thin_qr_backward(
    q: ArrayView2<'_, f64>,
    r: ArrayView2<'_, f64>,
    q_bar: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let k = q.ncols();
    let m = -q_bar.t().dot(&q);
    let sym = Array2::from_shape_fn((k, k), |(i, j)| {
        if i >= j {
            m[[i, j]]
        } else {
            m[[j, i]]
        }
    });
    let b = &q_bar + &q.dot(&sym);
    solve_right_upper_transpose(&b, r)
}

/// `X` with `X·Rᵀ = B` for upper-triangular `R`.
fn solve_right_upper_transpose(b: &Array2<f64>, r: ArrayView2<'_, f64>) -> Array2<f64> {
    let k = r.nrows();
    let mut x = Array2::<f64>::zeros(b.dim());
    for (mut xrow, brow) in x.axis_iter_mut(Axis(0)).zip(b.axis_iter(Axis(0))) {
        // X·Rᵀ = B row-wise is R·xᵀ = bᵀ; back substitution.
        for i in (0..k).rev() {
            let mut s = brow[i];
            for j in i + 1..k {
                s -= r[[i, j]] * xrow[j];
            }
            xrow[i] = s / r[[i, i]];
        }
    }
    x
}

/// `‖AᵀA − I‖_∞` (max-abs entry).
pub fn orthonormality_error(a: ArrayView2<'_, f64>) -> f64 {
    let g = a.t().dot(&a);
    g.indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(d: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((d, k), || rng.sample(StandardNormal))
    }

    #[test]
    fn reconstructs_and_is_orthonormal() {
        for seed in 0..20 {
            let a = gaussian(6, 3, seed);
            let (q, r) = thin_qr(a.view()).unwrap();
            assert!(orthonormality_error(q.view()) < 1e-13);
            assert!((&q.dot(&r) - &a).iter().all(|v| v.abs() < 1e-12));
            for j in 0..3 {
                assert!(r[[j, j]] > 0.0);
                for i in j + 1..3 {
                    assert_eq!(r[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn single_column_is_normalization() {
        let a = array![[3.0], [-4.0]];
        let (q, r) = thin_qr(a.view()).unwrap();
        assert_eq!(q, array![[0.6], [-0.8]]);
        assert_eq!(r[[0, 0]], 5.0);
    }

    #[test]
    fn rank_deficiency_detected() {
        let a = array![[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]];
        assert!(matches!(
            thin_qr(a.view()),
            Err(Error::DegenerateFrame { column: 1, .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar loss L(A) = <C, Q(A)> for a fixed random C.
        for seed in 0..10 {
            let a = gaussian(5, 3, seed);
            let c = gaussian(5, 3, seed + 100);
            let (q, r) = thin_qr(a.view()).unwrap();
            let analytic = thin_qr_backward(q.view(), r.view(), c.view());
            let h = 1e-6;
            for i in 0..5 {
                for j in 0..3 {
                    let mut ap = a.clone();
                    ap[[i, j]] += h;
                    let mut am = a.clone();
                    am[[i, j]] -= h;
                    let lp = (&thin_qr(ap.view()).unwrap().0 * &c).sum();
                    let lm = (&thin_qr(am.view()).unwrap().0 * &c).sum();
                    let fd = (lp - lm) / (2.0 * h);
                    let err = (fd - analytic[[i, j]]).abs() / fd.abs().max(analytic[[i, j]].abs()).max(1e-6);
                    assert!(err < 1e-6, "seed {seed} ({i},{j}): fd {fd} vs {}", analytic[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
