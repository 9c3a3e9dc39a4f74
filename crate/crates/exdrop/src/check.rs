//! Finite-difference check of the full training objective's gradients.

use std::fmt::Write as _;
use std::path::Path;

use exdrop_core::encoder::{EncoderParams, ModelConfig};
use exdrop_core::gradcheck::{finite_diff_grad, max_relative_error};
use exdrop_core::reg::{minibatch_objective, RegSpec};
use exdrop_core::encoder::DropoutPlacement;
use exdrop_core::rng::stream;
use exdrop_core::{Graph, Matrix};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::error::{invalid, io_err, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error per tensor.
pub const TOLERANCE: f64 = 1e-4;
const MASK_STREAM: u64 = 0x30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub objective: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= TOLERANCE
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor,max_relative_error\n");
        for t in &self.tensors {
            writeln!(out, "{},{}", t.name, t.max_relative_error).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Compares backward-pass gradients of the batch objective on `tokens` with
/// central differences, tensor by tensor. Masks are redrawn from the same
/// stream on every evaluation, so the objective is a fixed function of the
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_objective(
    model: &ModelConfig,
    params: &EncoderParams,
    tokens: &[Matrix],
    labels: &[usize],
    placements: &[DropoutPlacement],
    spec: &RegSpec,
    mask_seed: u64,
) -> Result<GradcheckReport> {
    let refs: Vec<&Matrix> = tokens.iter().collect();
    let eval = |p: &EncoderParams, grads: bool| -> Result<(f64, Vec<Matrix>)> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let mut rng = stream(mask_seed, MASK_STREAM);
        let obj = minibatch_objective(&mut g, model, &bound, &refs, labels, placements, spec, true, Some(&mut rng))?;
        let total = obj.objective.total;
        let value = g.scalar(total);
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(total)?;
        Ok((value, bound.grads(&g)))
    };
    let (objective, analytic) = eval(params, true)?;
    let names = params.names();
    let mut tensors = Vec::with_capacity(names.len());
    for (k, (name, grad)) in names.into_iter().zip(&analytic).enumerate() {
        let base = params.tensors()[k].clone();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |m| {
                let mut p = params.clone();
                *p.tensors_mut()[k] = m.clone();
                match eval(&p, false) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        tensors.push(TensorCheck {
            name,
            max_relative_error: max_relative_error(grad, &numeric),
        });
    }
    Ok(GradcheckReport { tensors, objective })
}

/// Runs [`gradcheck_objective`] for `config` on its first `sequences`
/// training records, at the config's initial parameters.
pub fn gradcheck_config(config: &RunConfig, sequences: usize) -> Result<GradcheckReport> {
    config.validate()?;
    if sequences == 0 {
        return Err(invalid("sequences", "must be at least 1"));
    }
    let data = load_dataset(&config.dataset, config.seed)?;
    let records: Vec<_> = data.train.iter().take(sequences).collect();
    let tokens: Vec<Matrix> = records.iter().map(|r| r.tokens.clone()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let model = config.model_config();
    let params = EncoderParams::init(&model, config.seed)?;
    gradcheck_objective(
        &model,
        &params,
        &tokens,
        &labels,
        &config.placements(),
        &config.reg_spec(),
        config.seed,
    )
}
