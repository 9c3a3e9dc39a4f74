use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::moments::{moment_b_from_gram, moment_psi};
use super::prior::arora_term;
use super::terms::{half_trace_var, key_term, query_term};
use super::{Component, RegForm, RegSpec};
use crate::encoder::{forward, BoundLayer, BoundParams, DropoutPlacement, ForwardTrace, LayerTrace, ModelConfig};
use crate::matrix::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// `J_final` and its parts, as graph nodes.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub task: Var,
    /// Weighted, batch-averaged regularizer per [`Component`], `None` when the
    /// component contributes nothing.
    pub terms: [Option<Var>; 5],
}

/// Evaluated regularizer parts of an [`Objective`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegValues {
    pub q: f64,
    pub k: f64,
    pub v: f64,
    pub av: f64,
    pub ff: f64,
}

impl RegValues {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Q => self.q,
            Component::K => self.k,
            Component::V => self.v,
            Component::Av => self.av,
            Component::Ff => self.ff,
        }
    }

    pub fn get_mut(&mut self, c: Component) -> &mut f64 {
        match c {
            Component::Q => &mut self.q,
            Component::K => &mut self.k,
            Component::V => &mut self.v,
            Component::Av => &mut self.av,
            Component::Ff => &mut self.ff,
        }
    }

    pub fn total(&self) -> f64 {
        self.q + self.k + self.v + self.av + self.ff
    }
}

impl Objective {
    pub fn term(&self, c: Component) -> Option<Var> {
        self.terms[c as usize]
    }

    pub fn values(&self, g: &Graph) -> RegValues {
        let mut out = RegValues::default();
        for c in Component::ALL {
            if let Some(v) = self.term(c) {
                *out.get_mut(c) = g.scalar(v);
            }
        }
        out
    }
}

/// Per-head slices of a `d x d` projection, or the whole matrix for one head.
fn head_slices(g: &mut Graph, w: Var, heads: usize) -> Result<Vec<Var>> {
    if heads == 1 {
        return Ok(alloc::vec![w]);
    }
    let dh = g.shape(w).0 / heads;
    (0..heads).map(|h| g.slice_rows(w, h * dh, dh)).collect()
}

struct LayerInputs {
    gram: Option<Var>,
    moment: Option<Var>,
}

impl LayerInputs {
    fn gram(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if let Some(v) = self.gram {
            return Ok(v);
        }
        let v = g.t_matmul(x, x)?;
        self.gram = Some(v);
        Ok(v)
    }

    fn moment(&mut self, g: &mut Graph, x: Var, spec: &RegSpec) -> Result<Var> {
        if let Some(v) = self.moment {
            return Ok(v);
        }
        let gram = self.gram(g, x)?;
        let v = moment_b_from_gram(g, x, gram, spec.p, spec.moment_form)?;
        self.moment = Some(v);
        Ok(v)
    }
}

/// Weight-only factors `W^T W`, shared by every sequence in a batch.
#[derive(Default)]
struct WeightGrams {
    v: Option<Var>,
    av: Option<Vec<Var>>,
    ff: Option<(Var, Var)>,
}

impl WeightGrams {
    fn v(&mut self, g: &mut Graph, layer: &BoundLayer) -> Result<Var> {
        if self.v.is_none() {
            self.v = Some(g.t_matmul(layer.w_v, layer.w_v)?);
        }
        Ok(self.v.unwrap())
    }

    fn av(&mut self, g: &mut Graph, layer: &BoundLayer, heads: usize) -> Result<Vec<Var>> {
        if self.av.is_none() {
            let mut out = Vec::with_capacity(heads);
            for w in head_slices(g, layer.w_v, heads)? {
                out.push(g.t_matmul(w, w)?);
            }
            self.av = Some(out);
        }
        Ok(self.av.clone().unwrap())
    }

    /// `(W_ff1^T W_ff1, W_ff2 W_ff2^T)`, both `d x d`.
    fn ff(&mut self, g: &mut Graph, layer: &BoundLayer) -> Result<(Var, Var)> {
        if self.ff.is_none() {
            let first = g.t_matmul(layer.w_ff1, layer.w_ff1)?;
            let second = g.matmul_t(layer.w_ff2, layer.w_ff2)?;
            self.ff = Some((first, second));
        }
        Ok(self.ff.unwrap())
    }
}

fn layer_term(
    g: &mut Graph,
    c: Component,
    trace: &LayerTrace,
    layer: &BoundLayer,
    grams: &mut WeightGrams,
    heads: usize,
    spec: &RegSpec,
) -> Result<Var> {
    let x = trace.attn_input;
    let p = spec.p;
    let mut attn = LayerInputs {
        gram: None,
        moment: None,
    };
    match (c, spec.attention_form) {
        (Component::Q | Component::K, RegForm::Proposed) => {
            let qs = head_slices(g, layer.w_q, heads)?;
            let ks = head_slices(g, layer.w_k, heads)?;
            let gram = attn.gram(g, x)?;
            let b = attn.moment(g, x, spec)?;
            let mut parts = Vec::with_capacity(heads);
            for (wq, wk) in qs.into_iter().zip(ks) {
                parts.push(if c == Component::Q {
                    query_term(g, b, gram, wq, wk)?
                } else {
                    key_term(g, b, gram, wq, wk)?
                });
            }
            g.add_all(&parts)
        }
        (Component::Q, RegForm::Prior) => arora_term(g, x, layer.w_q, p),
        (Component::K, RegForm::Prior) => arora_term(g, x, layer.w_k, p),
        (Component::V, RegForm::Proposed) => {
            let b = attn.moment(g, x, spec)?;
            let lam = grams.v(g, layer)?;
            half_trace_var(g, b, lam)
        }
        (Component::V, RegForm::Prior) => arora_term(g, x, layer.w_v, p),
        (Component::Av, RegForm::Proposed) => {
            let lams = grams.av(g, layer, heads)?;
            let mut parts = Vec::with_capacity(heads);
            for (a, lam) in trace.attn.iter().zip(lams) {
                let psi = moment_psi(g, x, *a, p, spec.moment_form)?;
                parts.push(half_trace_var(g, psi, lam)?);
            }
            g.add_all(&parts)
        }
        (Component::Av, RegForm::Prior) => Err(Error::contract(
            "the prior regularizer has no attention-conditioned form",
        )),
        (Component::Ff, _) => match spec.ffn_form {
            RegForm::Proposed => {
                let mut ffn = LayerInputs {
                    gram: None,
                    moment: None,
                };
                let b = ffn.moment(g, trace.ffn_input, spec)?;
                let (first, second) = grams.ff(g, layer)?;
                let first = half_trace_var(g, b, first)?;
                let second = half_trace_var(g, b, second)?;
                g.add(first, second)
            }
            RegForm::Prior => arora_term(g, trace.ffn_hidden, layer.w_ff2, p),
        },
    }
}

/// Builds `J_final = J_task + Σ_c Σ_l λ_c[l] J_c(l)`, with each regularizer
/// averaged over the batch of `traces` (one per sequence).
///
/// Components with all-zero coefficients are not built, so with every `λ = 0`
/// the returned total is `task_loss` itself.
pub fn aggregate(
    g: &mut Graph,
    task_loss: Var,
    traces: &[ForwardTrace],
    params: &BoundParams,
    config: &ModelConfig,
    spec: &RegSpec,
) -> Result<Objective> {
    let layers = params.layers.len();
    spec.validate(layers)?;
    if spec.is_active(Component::Av) && spec.attention_form == RegForm::Prior {
        return Err(Error::contract(
            "the prior regularizer has no attention-conditioned form",
        ));
    }
    if traces.is_empty() {
        return Err(Error::contract("aggregate needs at least one trace"));
    }
    if let Some(t) = traces.iter().find(|t| t.layers.len() != layers) {
        return Err(Error::contract(alloc::format!(
            "trace covers {} layers, coefficients cover {layers}",
            t.layers.len()
        )));
    }
    let batch = traces.len() as f64;
    let mut terms = [None; 5];
    let mut total = task_loss;
    for c in Component::ALL {
        if !spec.is_active(c) {
            continue;
        }
        let lambdas = spec.lambdas(c);
        let mut grams: Vec<WeightGrams> = (0..layers).map(|_| WeightGrams::default()).collect();
        let mut parts = Vec::new();
        for trace in traces {
            for (l, (lt, layer)) in trace.layers.iter().zip(&params.layers).enumerate() {
                let lambda = &lambdas[l];
                if *lambda == 0.0 {
                    continue;
                }
                let j = layer_term(g, c, lt, layer, &mut grams[l], config.heads, spec)?;
                parts.push(g.scale(j, *lambda));
            }
        }
        let sum = g.add_all(&parts)?;
        let term = g.scale(sum, 1.0 / batch);
        terms[c as usize] = Some(term);
        total = g.add(total, term)?;
    }
    Ok(Objective {
        total,
        task: task_loss,
        terms,
    })
}

/// A minibatch objective with the logits it was computed from.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub objective: Objective,
    /// `batch x num_classes`.
    pub logits: Var,
}

/// Runs the encoder on every sequence of a minibatch, takes the mean
/// cross-entropy against `labels` and adds the regularizers of `spec`.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_objective(
    g: &mut Graph,
    config: &ModelConfig,
    params: &BoundParams,
    tokens: &[&Matrix],
    labels: &[usize],
    placements: &[DropoutPlacement],
    spec: &RegSpec,
    train: bool,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<BatchObjective> {
    if tokens.len() != labels.len() || tokens.is_empty() {
        return Err(Error::contract(alloc::format!(
            "minibatch has {} sequences and {} labels",
            tokens.len(),
            labels.len()
        )));
    }
    let mut traces = Vec::with_capacity(tokens.len());
    for t in tokens {
        let r: Option<&mut dyn RngCore> = match rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        traces.push(forward(g, config, params, t, placements, train, r)?);
    }
    let rows: Vec<Var> = traces.iter().map(|t| t.logits).collect();
    let logits = g.concat_rows(&rows)?;
    let task = g.cross_entropy(logits, labels)?;
    let objective = aggregate(g, task, &traces, params, config, spec)?;
    Ok(BatchObjective { objective, logits })
}
