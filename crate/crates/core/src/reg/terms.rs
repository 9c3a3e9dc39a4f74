use super::moments::{moment_b_from_gram, moment_psi};
use super::{check_rate, MomentForm};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;

/// `Tr(a b)` as `Σ a ⊙ b^T`, avoiding the full product.
pub fn trace_of_product(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let bt = g.transpose(b);
    let h = g.hadamard(a, bt)?;
    Ok(g.sum(h))
}

/// `Λ_q = W_q^T W_k G W_k^T W_q` for `G = X^T X`.
pub fn lambda_query(g: &mut Graph, gram: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let m = g.matmul(w_k, gram)?;
    let m = g.matmul_t(m, w_k)?;
    let m = g.t_matmul(w_q, m)?;
    g.matmul(m, w_q)
}

/// `Λ_k = W_k^T W_q G W_q^T W_k`: the query form with the roles swapped.
pub fn lambda_key(g: &mut Graph, gram: Var, w_q: Var, w_k: Var) -> Result<Var> {
    lambda_query(g, gram, w_k, w_q)
}

pub(crate) fn half_trace_var(g: &mut Graph, moment: Var, lam: Var) -> Result<Var> {
    let t = trace_of_product(g, moment, lam)?;
    Ok(g.scale(t, 0.5))
}

/// `½ Tr(M Λ_q)`.
pub fn query_term(g: &mut Graph, moment: Var, gram: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let lam = lambda_query(g, gram, w_q, w_k)?;
    half_trace_var(g, moment, lam)
}

/// `½ Tr(M Λ_k)`.
pub fn key_term(g: &mut Graph, moment: Var, gram: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let lam = lambda_key(g, gram, w_q, w_k)?;
    half_trace_var(g, moment, lam)
}

/// `½ Tr(M W^T W)` for any `k x d` weight `W`; the value, attention-conditioned
/// value and feed-forward terms all take this shape.
pub fn gram_term(g: &mut Graph, moment: Var, w: Var) -> Result<Var> {
    let lam = g.t_matmul(w, w)?;
    half_trace_var(g, moment, lam)
}

fn check_projection(x: &Matrix, w: &Matrix) -> Result<()> {
    if w.cols() != x.cols() {
        return Err(Error::shape("regularizer weight", x.shape(), w.shape()));
    }
    Ok(())
}

struct Leaves {
    g: Graph,
    x: Var,
    gram: Var,
}

fn leaves(x: &Matrix) -> Result<Leaves> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let gram = g.t_matmul(xv, xv)?;
    Ok(Leaves { g, x: xv, gram })
}

/// Query regularizer for dropout on the query-side tokens.
pub fn reg_query(x: &Matrix, w_q: &Matrix, w_k: &Matrix, p: f64, form: MomentForm) -> Result<f64> {
    check_rate(p)?;
    check_projection(x, w_q)?;
    check_projection(x, w_k)?;
    let Leaves { mut g, x: xv, gram } = leaves(x)?;
    let (q, k) = (g.leaf(w_q.clone()), g.leaf(w_k.clone()));
    let b = moment_b_from_gram(&mut g, xv, gram, p, form)?;
    let j = query_term(&mut g, b, gram, q, k)?;
    Ok(g.scalar(j))
}

/// Key regularizer for dropout on the key-side tokens.
pub fn reg_key(x: &Matrix, w_q: &Matrix, w_k: &Matrix, p: f64, form: MomentForm) -> Result<f64> {
    check_rate(p)?;
    check_projection(x, w_q)?;
    check_projection(x, w_k)?;
    let Leaves { mut g, x: xv, gram } = leaves(x)?;
    let (q, k) = (g.leaf(w_q.clone()), g.leaf(w_k.clone()));
    let b = moment_b_from_gram(&mut g, xv, gram, p, form)?;
    let j = key_term(&mut g, b, gram, q, k)?;
    Ok(g.scalar(j))
}

/// Value regularizer for token-level dropout before the value projection.
pub fn reg_value_token(x: &Matrix, w_v: &Matrix, p: f64, form: MomentForm) -> Result<f64> {
    check_rate(p)?;
    check_projection(x, w_v)?;
    let Leaves { mut g, x: xv, gram } = leaves(x)?;
    let w = g.leaf(w_v.clone());
    let b = moment_b_from_gram(&mut g, xv, gram, p, form)?;
    let j = gram_term(&mut g, b, w)?;
    Ok(g.scalar(j))
}

/// Value regularizer for dropout after attention mixing with weights `a`.
pub fn reg_value_attention(x: &Matrix, a: &Matrix, w_v: &Matrix, p: f64, form: MomentForm) -> Result<f64> {
    check_rate(p)?;
    check_projection(x, w_v)?;
    if a.shape() != (x.rows(), x.rows()) {
        return Err(Error::shape("attention-conditioned value", x.shape(), a.shape()));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let av = g.leaf(a.clone());
    let w = g.leaf(w_v.clone());
    let psi = moment_psi(&mut g, xv, av, p, form)?;
    let j = gram_term(&mut g, psi, w)?;
    Ok(g.scalar(j))
}

/// Feed-forward regularizer for a `k x d` weight applied as `X W^T`. For the
/// second feed-forward matrix (`d x d_ff`) pass its transpose so the `d x d`
/// Gram `W_ff2 W_ff2^T` pairs with the same input moment.
pub fn reg_ff(x: &Matrix, w_ff: &Matrix, p: f64, form: MomentForm) -> Result<f64> {
    reg_value_token(x, w_ff, p, form)
}

/// `Λ_q = W_q^T W_k X^T X W_k^T W_q`.
pub fn lambda_q(x: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Result<Matrix> {
    let Leaves { mut g, gram, .. } = leaves(x)?;
    let (q, k) = (g.leaf(w_q.clone()), g.leaf(w_k.clone()));
    let lam = lambda_query(&mut g, gram, q, k)?;
    Ok(g.value(lam).clone())
}

/// `Λ_k = W_k^T W_q X^T X W_q^T W_k`.
pub fn lambda_k(x: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Result<Matrix> {
    lambda_q(x, w_k, w_q)
}

/// `Λ_v = W^T W`.
pub fn lambda_v(w: &Matrix) -> Matrix {
    w.t_matmul(w).expect("W^T W always conforms")
}

/// `½ Tr(M Λ)` on plain matrices.
pub fn half_trace(moment: &Matrix, lam: &Matrix) -> Result<f64> {
    Ok(0.5 * moment.matmul(lam)?.trace()?)
}
