//! Independent loop-based oracles shared by the integration tests.
#![allow(dead_code)]

use exdrop_core::reg::MomentForm;
use exdrop_core::rng::{stream, uniform};
use exdrop_core::Matrix;

/// Naive triple-loop product.
pub fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

pub fn tr(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.cols(), a.rows(), |i, j| a[(j, i)])
}

/// `E[(1 - m_ai)(1 - m_bj)] X_ai X_bj` for unscaled Bernoulli masks.
pub fn pair_moment(x: &Matrix, a: usize, i: usize, b: usize, j: usize, p: f64, form: MomentForm) -> f64 {
    let e = if a == b && i == j && form == MomentForm::Exact { p } else { p * p };
    e * x[(a, i)] * x[(b, j)]
}

/// `½ E‖L X~ R‖²_F` expanded entry by entry over every index pair of the
/// deviation; `l = None` means the identity.
pub fn half_expected_sq(l: Option<&Matrix>, x: &Matrix, r: &Matrix, p: f64, form: MomentForm) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(r.rows(), d);
    let ident = Matrix::identity(n);
    let l = l.unwrap_or(&ident);
    assert_eq!(l.cols(), n);
    let mut total = 0.0;
    for row in 0..l.rows() {
        for c in 0..r.cols() {
            // (L X~ R)_{row,c} = Σ_a Σ_i L_{row,a} X~_ai R_ic, squared in expectation.
            for a in 0..n {
                for i in 0..d {
                    for b in 0..n {
                        for j in 0..d {
                            total += l[(row, a)] * l[(row, b)] * r[(i, c)] * r[(j, c)] * pair_moment(x, a, i, b, j, p, form);
                        }
                    }
                }
            }
        }
    }
    0.5 * total
}

/// Loop oracle for the query regularizer: `X~ W_q^T W_k X^T`.
pub fn oracle_q(x: &Matrix, wq: &Matrix, wk: &Matrix, p: f64, form: MomentForm) -> f64 {
    let m = mm(&tr(wq), wk);
    half_expected_sq(None, x, &mm(&m, &tr(x)), p, form)
}

/// Loop oracle for the key regularizer: `X W_q^T W_k X~^T`, whose Frobenius
/// norm equals that of `X~ W_k^T W_q X^T`.
pub fn oracle_k(x: &Matrix, wq: &Matrix, wk: &Matrix, p: f64, form: MomentForm) -> f64 {
    let m = mm(&tr(wk), wq);
    half_expected_sq(None, x, &mm(&m, &tr(x)), p, form)
}

pub fn oracle_v(x: &Matrix, wv: &Matrix, p: f64, form: MomentForm) -> f64 {
    half_expected_sq(None, x, &tr(wv), p, form)
}

pub fn oracle_av(x: &Matrix, a: &Matrix, wv: &Matrix, p: f64, form: MomentForm) -> f64 {
    half_expected_sq(Some(a), x, &tr(wv), p, form)
}

/// Both feed-forward matrices against the same input moment; the second is
/// taken as `W_ff2^T` so that it acts on the `d`-dimensional input.
pub fn oracle_ff(x: &Matrix, w1: &Matrix, w2: &Matrix, p: f64, form: MomentForm) -> f64 {
    half_expected_sq(None, x, &tr(w1), p, form) + half_expected_sq(None, x, w2, p, form)
}

/// The feature-wise prior regularizer written out per feature.
pub fn oracle_prior(x: &Matrix, w: &Matrix, p: f64) -> f64 {
    let n = x.rows() as f64;
    let mut total = 0.0;
    for j in 0..x.cols() {
        let sigma: f64 = (0..x.rows()).map(|r| x[(r, j)].powi(2)).sum::<f64>() / n;
        let norm: f64 = (0..w.rows()).map(|k| w[(k, j)].powi(2)).sum();
        total += sigma * norm;
    }
    p / (1.0 - p) * total
}

/// The quadruple sum `p²/2n Σ_r Σ_k Σ_i Σ_j X_ri X_rj W_ki W_kj`.
pub fn oracle_cross_feature(x: &Matrix, w: &Matrix, p: f64) -> (f64, f64) {
    let n = x.rows() as f64;
    let (mut diag, mut cross) = (0.0, 0.0);
    for r in 0..x.rows() {
        for k in 0..w.rows() {
            for i in 0..x.cols() {
                for j in 0..x.cols() {
                    let t = x[(r, i)] * x[(r, j)] * w[(k, i)] * w[(k, j)];
                    if i == j {
                        diag += t;
                    } else {
                        cross += t;
                    }
                }
            }
        }
    }
    let s = p * p / (2.0 * n);
    (s * diag, s * cross)
}

/// Row-stochastic matrix via an explicit softmax.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for i in 0..s.rows() {
        let m = s.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.row(i).iter().map(|v| (v - m).exp()).sum();
        for j in 0..s.cols() {
            out[(i, j)] = (s[(i, j)] - m).exp() / z;
        }
    }
    out
}

/// A random regularizer instance.
pub struct Instance {
    pub x: Matrix,
    pub a: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl Instance {
    pub fn random(seed: u64, n: usize, d: usize, d_ff: usize) -> Self {
        let mut rng = stream(seed, 99);
        Instance {
            x: uniform(n, d, 1.0, &mut rng),
            a: softmax_rows(&uniform(n, n, 2.0, &mut rng)),
            wq: uniform(d, d, 1.0, &mut rng),
            wk: uniform(d, d, 1.0, &mut rng),
            wv: uniform(d, d, 1.0, &mut rng),
            w1: uniform(d_ff, d, 1.0, &mut rng),
            w2: uniform(d, d_ff, 1.0, &mut rng),
        }
    }
}
