use serde::{Deserialize, Serialize};

use super::{check_rate, MomentForm};
use crate::error::Result;
use crate::graph::{ones_row, Graph, Var};
use crate::matrix::Matrix;

/// Where a moment matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClosedFormApprox,
    ClosedFormExact,
    Empirical,
}

/// A `d x d` dropout deviation moment (`B` or `ψ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrix {
    pub matrix: Matrix,
    pub provenance: Provenance,
    /// Per-entry sample variance of the averaged terms; empirical only.
    pub variance: Option<Matrix>,
}

impl MomentMatrix {
    pub(crate) fn closed(matrix: Matrix, form: MomentForm) -> Self {
        let provenance = match form {
            MomentForm::Approx => Provenance::ClosedFormApprox,
            MomentForm::Exact => Provenance::ClosedFormExact,
        };
        MomentMatrix {
            matrix,
            provenance,
            variance: None,
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = &self.matrix;
        m.is_square()
            && (0..m.rows()).all(|i| (0..i).all(|j| libm::fabs(m.get(i, j) - m.get(j, i)) <= tol))
    }

    /// `v^T M v / v^T v` for a probe vector.
    pub fn rayleigh_quotient(&self, v: &[f64]) -> f64 {
        let m = &self.matrix;
        let mut num = 0.0;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                num += v[i] * m.get(i, j) * v[j];
            }
        }
        num / v.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Graph form of `B` for the input `x` (`n x d`).
pub fn moment_b(g: &mut Graph, x: Var, p: f64, form: MomentForm) -> Result<Var> {
    let gram = g.t_matmul(x, x)?;
    moment_b_from_gram(g, x, gram, p, form)
}

/// As [`moment_b`], reusing an already built `X^T X`.
pub(crate) fn moment_b_from_gram(g: &mut Graph, x: Var, gram: Var, p: f64, form: MomentForm) -> Result<Var> {
    let b = g.scale(gram, p * p);
    match form {
        MomentForm::Approx => Ok(b),
        MomentForm::Exact => {
            let sq = g.hadamard(x, x)?;
            let ones = g.leaf(ones_row(g.shape(x).0));
            let col_sq = g.matmul(ones, sq)?;
            let diag = g.diag_from_row(col_sq)?;
            let diag = g.scale(diag, p - p * p);
            g.add(b, diag)
        }
    }
}

/// Graph form of `ψ` for input `x` (`n x d`) and attention `a` (`n x n`).
pub fn moment_psi(g: &mut Graph, x: Var, a: Var, p: f64, form: MomentForm) -> Result<Var> {
    let y = g.t_matmul(a, a)?;
    let yx = g.matmul(y, x)?;
    let xyx = g.t_matmul(x, yx)?;
    let psi = g.scale(xyx, p * p);
    match form {
        MomentForm::Approx => Ok(psi),
        MomentForm::Exact => {
            // Coincident mask entries (same token a, same feature i) pair
            // X_ai Y_aa X_ai.
            let y_diag = g.diag_to_row(y)?;
            let sq = g.hadamard(x, x)?;
            let weighted = g.matmul(y_diag, sq)?;
            let diag = g.diag_from_row(weighted)?;
            let diag = g.scale(diag, p - p * p);
            g.add(psi, diag)
        }
    }
}

/// Closed-form `B = E[X~^T X~]`.
pub fn closed_form_b(x: &Matrix, p: f64, form: MomentForm) -> Result<MomentMatrix> {
    check_rate(p)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let b = moment_b(&mut g, xv, p, form)?;
    Ok(MomentMatrix::closed(g.value(b).clone(), form))
}

/// Closed-form `ψ = E[X~^T A^T A X~]`.
pub fn closed_form_psi(x: &Matrix, a: &Matrix, p: f64, form: MomentForm) -> Result<MomentMatrix> {
    check_rate(p)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let av = g.leaf(a.clone());
    let psi = moment_psi(&mut g, xv, av, p, form)?;
    Ok(MomentMatrix::closed(g.value(psi).clone(), form))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform};

    /// `E[(1 - m_ai)(1 - m_bj)]` for independent Bernoulli(keep 1 - p) masks.
    fn pair_expectation(same_entry: bool, p: f64, form: MomentForm) -> f64 {
        match (same_entry, form) {
            (true, MomentForm::Exact) => p,
            _ => p * p,
        }
    }

    /// `ψ_ij = Σ_a Σ_b X_ai Y_ab X_bj E[(1 - m_ai)(1 - m_bj)]`, summed directly.
    fn psi_by_summation(x: &Matrix, a: &Matrix, p: f64, form: MomentForm) -> Matrix {
        let y = a.t_matmul(a).unwrap();
        let (n, d) = x.shape();
        Matrix::from_fn(d, d, |i, j| {
            let mut s = 0.0;
            for ra in 0..n {
                for rb in 0..n {
                    let same = ra == rb && i == j;
                    s += x[(ra, i)] * y[(ra, rb)] * x[(rb, j)] * pair_expectation(same, p, form);
                }
            }
            s
        })
    }

    #[test]
    fn zero_rate_gives_zero_moments() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        for form in [MomentForm::Approx, MomentForm::Exact] {
            assert_eq!(closed_form_b(&x, 0.0, form).unwrap().matrix, Matrix::zeros(2, 2));
            let a = Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.8]]);
            assert_eq!(closed_form_psi(&x, &a, 0.0, form).unwrap().matrix, Matrix::zeros(2, 2));
        }
    }

    #[test]
    fn orthonormal_columns_give_scaled_identity() {
        let s = 1.0 / 2f64.sqrt();
        let x = Matrix::from_rows(&[[s, s], [s, -s], [0.0, 0.0]]);
        let b = closed_form_b(&x, 0.3, MomentForm::Approx).unwrap();
        assert!(b.matrix.max_abs_diff(&Matrix::identity(2).scale(0.09)).unwrap() <= 1e-15);
        assert_eq!(b.provenance, Provenance::ClosedFormApprox);
    }

    #[test]
    fn exact_b_adds_diagonal_correction() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = closed_form_b(&x, 0.2, MomentForm::Exact).unwrap().matrix;
        // Off-diagonal 0.04 * 14, diagonal 0.2 * (1 + 9) and 0.2 * (4 + 16).
        assert!((b[(0, 1)] - 0.56).abs() < 1e-12);
        assert!((b[(1, 0)] - 0.56).abs() < 1e-12);
        assert!((b[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((b[(1, 1)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn psi_with_identity_attention_is_b() {
        let x = uniform(4, 3, 1.0, &mut stream(2, 0));
        for form in [MomentForm::Approx, MomentForm::Exact] {
            let b = closed_form_b(&x, 0.4, form).unwrap().matrix;
            let psi = closed_form_psi(&x, &Matrix::identity(4), 0.4, form).unwrap().matrix;
            assert!(b.max_abs_diff(&psi).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn psi_matches_direct_summation() {
        let x = uniform(3, 2, 1.0, &mut stream(3, 0));
        let a = uniform(3, 3, 2.0, &mut stream(4, 0)).row_softmax();
        for form in [MomentForm::Approx, MomentForm::Exact] {
            let psi = closed_form_psi(&x, &a, 0.2, form).unwrap().matrix;
            assert!(psi.max_abs_diff(&psi_by_summation(&x, &a, 0.2, form)).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn moments_are_symmetric_psd() {
        let mut rng = stream(5, 0);
        for _ in 0..10 {
            let x = uniform(5, 4, 1.0, &mut rng);
            let a = uniform(5, 5, 1.5, &mut rng).row_softmax();
            for form in [MomentForm::Approx, MomentForm::Exact] {
                let moments = [
                    closed_form_b(&x, 0.3, form).unwrap(),
                    closed_form_psi(&x, &a, 0.3, form).unwrap(),
                ];
                for m in moments {
                    assert!(m.is_symmetric(1e-12));
                    for _ in 0..20 {
                        let probe = uniform(1, 4, 1.0, &mut rng);
                        assert!(m.rayleigh_quotient(probe.data()) >= -1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rate_out_of_range_is_rejected() {
        let x = Matrix::identity(2);
        assert!(closed_form_b(&x, 1.0, MomentForm::Approx).is_err());
        assert!(closed_form_b(&x, -0.5, MomentForm::Approx).is_err());
    }
}
