//! Closed-form dropout regularizers.
//!
//! Dropping entries of a layer input `X` with an unscaled Bernoulli mask
//! `M` (keep probability `1 - p`) perturbs it by the deviation
//! `X~ = (1 - M) ⊙ X`. Each regularizer is the expected squared Frobenius
//! norm of the perturbation this causes downstream, halved:
//!
//! | term | perturbation | closed form |
//! |------|--------------|-------------|
//! | query | `X~ W_q^T W_k X^T` | `½ Tr(B Λ_q)`, `Λ_q = W_q^T W_k X^T X W_k^T W_q` |
//! | key | `X W_q^T W_k X~^T` | `½ Tr(B Λ_k)`, `Λ_k = W_k^T W_q X^T X W_q^T W_k` |
//! | value | `X~ W_v^T` | `½ Tr(B W_v^T W_v)` |
//! | attention-conditioned value | `A X~ W_v^T` | `½ Tr(ψ W_v^T W_v)` |
//! | feed-forward | `X~ W^T` | `½ Tr(B W^T W)` |
//!
//! where `B = E[X~^T X~]` and `ψ = E[X~^T A^T A X~]`. See [`MomentForm`] for
//! the two ways of evaluating those expectations.
//!
//! Everything here is built on [`Graph`](crate::Graph), so each term is
//! differentiable with respect to the weights, `X` and `A`. The plain
//! `f64`-returning functions evaluate the same graph code on constants.

mod moments;
mod objective;
mod prior;
mod terms;

pub use moments::{closed_form_b, closed_form_psi, MomentMatrix, Provenance};
pub use objective::{aggregate, minibatch_objective, BatchObjective, Objective, RegValues};
pub use prior::{arora_reg, decompose, Decomposition};
pub use terms::{
    half_trace, lambda_k, lambda_q, lambda_v, reg_ff, reg_key, reg_query, reg_value_attention,
    reg_value_token,
};

pub mod graph {
    //! Graph builders behind the plain regularizer functions.
    pub use super::moments::{moment_b, moment_psi};
    pub use super::prior::arora_term;
    pub use super::terms::{
        gram_term, key_term, lambda_key, lambda_query, query_term, trace_of_product,
    };
}

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How expectations over the dropout mask are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentForm {
    /// Treat every pair of mask entries as independent:
    /// `E[(1 - m)(1 - m')] = p²` everywhere, so `B = p² X^T X`.
    #[default]
    Approx,
    /// Account for a mask entry paired with itself, where
    /// `E[(1 - m)²] = p`: `B = p² X^T X + (p - p²) diag(Σ_i X_ij²)`.
    Exact,
}

/// Which value regularizer is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueVariant {
    /// Dropout on the tokens before the value projection (uses `λ_v`).
    #[default]
    TokenLevel,
    /// Dropout after attention mixing (uses `λ_av`).
    AttentionConditioned,
    /// Both value terms at once, each with its own coefficient.
    Both,
}

/// Which family of regularizer a component uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegForm {
    /// The cross-feature trace regularizers in this module.
    #[default]
    Proposed,
    /// The feature-wise regularizer of [`arora_reg`].
    Prior,
}

/// Dropout rate and per-layer coefficients for every regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegSpec {
    pub p: f64,
    pub lambda_q: Vec<f64>,
    pub lambda_k: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub lambda_av: Vec<f64>,
    pub lambda_ff: Vec<f64>,
    pub value_variant: ValueVariant,
    pub moment_form: MomentForm,
    pub attention_form: RegForm,
    pub ffn_form: RegForm,
}

/// One of the five regularized components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Q,
    K,
    V,
    Av,
    Ff,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::Q, Component::K, Component::V, Component::Av, Component::Ff];

    pub fn label(self) -> &'static str {
        match self {
            Component::Q => "Q",
            Component::K => "K",
            Component::V => "V",
            Component::Av => "AV",
            Component::Ff => "FF",
        }
    }
}

impl core::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(Component::Q),
            "k" => Ok(Component::K),
            "v" => Ok(Component::V),
            "av" => Ok(Component::Av),
            "ff" => Ok(Component::Ff),
            _ => Err(Error::contract(alloc::format!("unknown regularizer component `{s}`"))),
        }
    }
}

impl RegSpec {
    /// All coefficients zero for `layers` layers.
    pub fn disabled(layers: usize, p: f64) -> Self {
        RegSpec {
            p,
            lambda_q: vec![0.0; layers],
            lambda_k: vec![0.0; layers],
            lambda_v: vec![0.0; layers],
            lambda_av: vec![0.0; layers],
            lambda_ff: vec![0.0; layers],
            value_variant: ValueVariant::TokenLevel,
            moment_form: MomentForm::Approx,
            attention_form: RegForm::Proposed,
            ffn_form: RegForm::Proposed,
        }
    }

    pub fn lambdas(&self, c: Component) -> &[f64] {
        match c {
            Component::Q => &self.lambda_q,
            Component::K => &self.lambda_k,
            Component::V => &self.lambda_v,
            Component::Av => &self.lambda_av,
            Component::Ff => &self.lambda_ff,
        }
    }

    pub fn lambdas_mut(&mut self, c: Component) -> &mut Vec<f64> {
        match c {
            Component::Q => &mut self.lambda_q,
            Component::K => &mut self.lambda_k,
            Component::V => &mut self.lambda_v,
            Component::Av => &mut self.lambda_av,
            Component::Ff => &mut self.lambda_ff,
        }
    }

    /// Sets component `c` to `lambda` on every layer.
    pub fn with(mut self, c: Component, lambda: f64) -> Self {
        self.lambdas_mut(c).iter_mut().for_each(|l| *l = lambda);
        self
    }

    /// Whether component `c` contributes to the objective on some layer.
    pub fn is_active(&self, c: Component) -> bool {
        let variant_ok = match c {
            Component::V => self.value_variant != ValueVariant::AttentionConditioned,
            Component::Av => self.value_variant != ValueVariant::TokenLevel,
            _ => true,
        };
        variant_ok && self.lambdas(c).iter().any(|l| *l != 0.0)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        check_rate(self.p)?;
        for c in Component::ALL {
            let l = self.lambdas(c);
            if l.len() != layers {
                return Err(Error::contract(alloc::format!(
                    "lambda_{} has {} entries for {layers} layers",
                    c.label().to_ascii_lowercase(),
                    l.len()
                )));
            }
            if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::contract(alloc::format!(
                    "lambda_{} must be finite and nonnegative",
                    c.label().to_ascii_lowercase()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::contract("dropout rate must lie in [0, 1)"))
    }
}
