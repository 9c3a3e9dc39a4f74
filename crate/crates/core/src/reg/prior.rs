//! The feature-wise explicit dropout regularizer and its relation to the
//! cross-feature one.

use serde::{Deserialize, Serialize};

use super::check_rate;
use crate::error::{Error, Result};
use crate::graph::{ones_row, Graph, Var};
use crate::math;
use crate::matrix::Matrix;

/// Graph form of [`arora_reg`].
pub fn arora_term(g: &mut Graph, x: Var, w: Var, p: f64) -> Result<Var> {
    let (n, d) = g.shape(x);
    let (k, wd) = g.shape(w);
    if wd != d {
        return Err(Error::shape("prior regularizer", (n, d), (k, wd)));
    }
    let x_sq = g.hadamard(x, x)?;
    let ones_n = g.leaf(ones_row(n));
    let second_moment = g.matmul(ones_n, x_sq)?;
    let w_sq = g.hadamard(w, w)?;
    let ones_k = g.leaf(ones_row(k));
    let col_norms = g.matmul(ones_k, w_sq)?;
    let prod = g.hadamard(second_moment, col_norms)?;
    let s = g.sum(prod);
    Ok(g.scale(s, p / (1.0 - p) / n as f64))
}

/// `p / (1 - p) · Σ_j σ_j² ‖W_j‖²` with `σ_j² = (1/n) Σ_r X_rj²` and `W_j`
/// the `j`-th column of `W` (`k x d`).
pub fn arora_reg(x: &Matrix, w: &Matrix, p: f64) -> Result<f64> {
    check_rate(p)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let r = arora_term(&mut g, xv, wv, p)?;
    Ok(g.scalar(r))
}

/// The cross-feature regularizer of a single linear layer split into its
/// feature-diagonal and cross-feature parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `p²/2n Σ_r Σ_k Σ_i Σ_j X_ri X_rj W_ki W_kj`.
    pub r: f64,
    /// The `i == j` part.
    pub r_diag: f64,
    /// The `i != j` part.
    pub r_cross: f64,
    /// `p (1 - p) / 2`, so that `r_diag == alpha * arora_reg(X, W, p)`.
    pub alpha: f64,
    /// `arora_reg(X, W, p)`.
    pub prior: f64,
}

const IDENTITY_TOL: f64 = 1e-10;

fn close(a: f64, b: f64) -> bool {
    math::abs(a - b) <= IDENTITY_TOL * math::abs(a).max(math::abs(b)).max(1.0)
}

/// Splits the regularizer of `X W^T` into diagonal and cross-feature parts and
/// checks `r == r_diag + r_cross` and `r_diag == alpha * prior`.
pub fn decompose(x: &Matrix, w: &Matrix, p: f64) -> Result<Decomposition> {
    check_rate(p)?;
    if w.cols() != x.cols() {
        return Err(Error::shape("decompose", x.shape(), w.shape()));
    }
    let n = x.rows() as f64;
    let scale = p * p / (2.0 * n);
    // With G = X^T X and H = W^T W the quadruple sum is Σ_ij G_ij H_ij.
    let gx = x.t_matmul(x)?;
    let hw = w.t_matmul(w)?;
    let d = x.cols();
    let (mut diag, mut cross) = (0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            let t = gx.get(i, j) * hw.get(i, j);
            if i == j {
                diag += t;
            } else {
                cross += t;
            }
        }
    }
    let r = scale * x.matmul_t(w)?.frobenius_sq();
    let out = Decomposition {
        r,
        r_diag: scale * diag,
        r_cross: scale * cross,
        alpha: p * (1.0 - p) / 2.0,
        prior: arora_reg(x, w, p)?,
    };
    if !close(out.r, out.r_diag + out.r_cross) {
        return Err(Error::Identity {
            name: "r == r_diag + r_cross",
            lhs: out.r,
            rhs: out.r_diag + out.r_cross,
        });
    }
    if !close(out.r_diag, out.alpha * out.prior) {
        return Err(Error::Identity {
            name: "r_diag == alpha * prior",
            lhs: out.r_diag,
            rhs: out.alpha * out.prior,
        });
    }
    Ok(out)
}
