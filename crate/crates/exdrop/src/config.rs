//! Run configuration, loaded from TOML or JSON with the same schema.

use std::path::{Path, PathBuf};

use exdrop_core::encoder::{DropoutMode, DropoutPlacement, ModelConfig, NormPlacement};
use exdrop_core::optim::OptimizerConfig;
use exdrop_core::reg::{Component, MomentForm, RegForm, RegSpec, ValueVariant};
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{invalid, io_err, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Subdirectory of the output root; defaults to the config file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub model: ModelSection,
    #[serde(default)]
    pub reg: RegSection,
    #[serde(default)]
    pub dropout: DropoutSection,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingSection,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}

/// Architecture; token width, sequence length and class count come from the
/// dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub norm: NormPlacement,
}

fn one() -> usize {
    1
}

/// A coefficient given once for every layer or per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    Shared(f64),
    PerLayer(Vec<f64>),
}

impl Default for Lambda {
    fn default() -> Self {
        Lambda::Shared(0.0)
    }
}

impl Lambda {
    fn expand(&self, layers: usize) -> Vec<f64> {
        match self {
            Lambda::Shared(v) => vec![*v; layers],
            Lambda::PerLayer(v) => v.clone(),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Lambda::Shared(v) => std::slice::from_ref(v),
            Lambda::PerLayer(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    #[serde(default = "default_rate")]
    pub p: f64,
    #[serde(default)]
    pub lambda_q: Lambda,
    #[serde(default)]
    pub lambda_k: Lambda,
    #[serde(default)]
    pub lambda_v: Lambda,
    #[serde(default)]
    pub lambda_av: Lambda,
    #[serde(default)]
    pub lambda_ff: Lambda,
    #[serde(default)]
    pub value_variant: ValueVariant,
    #[serde(default)]
    pub moment_form: MomentForm,
    #[serde(default)]
    pub attention_form: RegForm,
    #[serde(default)]
    pub ffn_form: RegForm,
}

fn default_rate() -> f64 {
    0.2
}

impl Default for RegSection {
    fn default() -> Self {
        RegSection {
            p: default_rate(),
            lambda_q: Lambda::default(),
            lambda_k: Lambda::default(),
            lambda_v: Lambda::default(),
            lambda_av: Lambda::default(),
            lambda_ff: Lambda::default(),
            value_variant: ValueVariant::default(),
            moment_form: MomentForm::default(),
            attention_form: RegForm::default(),
            ffn_form: RegForm::default(),
        }
    }
}

impl RegSection {
    pub fn lambda(&self, c: Component) -> &Lambda {
        match c {
            Component::Q => &self.lambda_q,
            Component::K => &self.lambda_k,
            Component::V => &self.lambda_v,
            Component::Av => &self.lambda_av,
            Component::Ff => &self.lambda_ff,
        }
    }

    pub fn lambda_mut(&mut self, c: Component) -> &mut Lambda {
        match c {
            Component::Q => &mut self.lambda_q,
            Component::K => &mut self.lambda_k,
            Component::V => &mut self.lambda_v,
            Component::Av => &mut self.lambda_av,
            Component::Ff => &mut self.lambda_ff,
        }
    }
}

/// Implicit dropout baseline: one placement on the attention path and one on
/// the feed-forward path, sharing a rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSection {
    #[serde(default)]
    pub attention: DropoutMode,
    #[serde(default)]
    pub ffn: DropoutMode,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

impl Default for DropoutSection {
    fn default() -> Self {
        DropoutSection {
            attention: DropoutMode::None,
            ffn: DropoutMode::None,
            rate: default_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
        }
    }
}

/// Hyperparameter grid: each cell sets one component's coefficient on every
/// layer and the learning rate, and is trained once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lambdas: Vec<f64>,
    pub lrs: Vec<f64>,
    #[serde(with = "component_names")]
    pub components: Vec<Component>,
    pub seeds: Vec<u64>,
}

mod component_names {
    use exdrop_core::reg::Component;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Component], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|c| c.label()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Component>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(D::Error::custom))
            .collect()
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of a TOML error. Tagged tables report only their header, so for an
/// unknown key the key itself is looked up in that table's body.
fn toml_error_line(text: &str, e: &toml::de::Error) -> usize {
    let Some(span) = e.span() else { return 1 };
    let start = line_of(text, span.start);
    let key = e
        .message()
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next());
    let Some(key) = key else { return start };
    for (i, line) in text.lines().enumerate().skip(start) {
        let line = line.trim_start();
        if line.starts_with('[') {
            break;
        }
        let rest = line.strip_prefix(key).map(str::trim_start);
        if rest.is_some_and(|r| r.starts_with('=')) {
            return i + 1;
        }
    }
    start
}

/// Parses a config from text. `json` selects the JSON reader.
pub fn parse_config(text: &str, json: bool, path: &Path) -> Result<RunConfig> {
    let config: RunConfig = if json {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?
    } else {
        toml::from_str(text).map_err(|e| HarnessError::Parse {
            path: path.to_owned(),
            line: toml_error_line(text, &e),
            message: e.message().to_owned(),
        })?
    };
    config.validate()?;
    Ok(config)
}

/// Reads, parses and validates a config file. Files ending in `.json` use the
/// JSON reader, anything else TOML. Relative dataset paths are resolved
/// against the config's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let json = path.extension().is_some_and(|e| e == "json");
    let mut config = parse_config(&text, json, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.dataset.resolve_paths(base);
    if config.output.is_none() {
        config.output = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    Ok(config)
}

fn check_lambda(field: &str, lambda: &Lambda, layers: usize) -> Result<()> {
    if let Lambda::PerLayer(v) = lambda {
        if v.len() != layers {
            return Err(invalid(field, format!("has {} entries for {layers} layers", v.len())));
        }
    }
    if lambda.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid(field, "coefficients must be finite and nonnegative"));
    }
    Ok(())
}

fn check_rate(field: &str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(field, format!("{p} is outside [0, 1)")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (field, v) in [
            ("model.d_model", m.d_model),
            ("model.d_ff", m.d_ff),
            ("model.layers", m.layers),
            ("model.heads", m.heads),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if !m.d_model.is_multiple_of(m.heads) {
            return Err(invalid("model.heads", "must divide model.d_model"));
        }

        let r = &self.reg;
        check_rate("reg.p", r.p)?;
        for c in Component::ALL {
            check_lambda(&format!("reg.lambda_{}", c.label().to_lowercase()), r.lambda(c), m.layers)?;
        }
        if r.attention_form == RegForm::Prior && self.reg_spec().is_active(Component::Av) {
            return Err(invalid("reg.attention_form", "the prior form has no attention-conditioned value term"));
        }

        let d = &self.dropout;
        check_rate("dropout.rate", d.rate)?;
        if matches!(d.attention, DropoutMode::FfHidden) {
            return Err(invalid("dropout.attention", "ff_hidden is a feed-forward placement"));
        }
        if !matches!(d.ffn, DropoutMode::None | DropoutMode::FfHidden) {
            return Err(invalid("dropout.ffn", "only none or ff_hidden apply to the feed-forward path"));
        }
        let spec = self.reg_spec();
        let explicit_attention = [Component::Q, Component::K, Component::V, Component::Av]
            .into_iter()
            .any(|c| spec.is_active(c));
        if explicit_attention && d.attention != DropoutMode::None && d.rate > 0.0 {
            return Err(invalid(
                "dropout.attention",
                "an explicit attention regularizer and an implicit attention placement are both active",
            ));
        }
        if spec.is_active(Component::Ff) && d.ffn != DropoutMode::None && d.rate > 0.0 {
            return Err(invalid(
                "dropout.ffn",
                "the explicit feed-forward regularizer and implicit feed-forward dropout are both active",
            ));
        }

        self.optimizer
            .validate()
            .map_err(|e| invalid("optimizer.lr", e.to_string()))?;
        if self.training.epochs == 0 {
            return Err(invalid("training.epochs", "must be at least 1"));
        }
        if self.training.batch_size == 0 {
            return Err(invalid("training.batch_size", "must be at least 1"));
        }
        self.dataset.validate()?;

        if let Some(grid) = &self.grid {
            for (field, empty) in [
                ("grid.lambdas", grid.lambdas.is_empty()),
                ("grid.lrs", grid.lrs.is_empty()),
                ("grid.components", grid.components.is_empty()),
                ("grid.seeds", grid.seeds.is_empty()),
            ] {
                if empty {
                    return Err(invalid(field, "must not be empty"));
                }
            }
            if grid.lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
                return Err(invalid("grid.lrs", "learning rates must be positive"));
            }
            if grid.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(invalid("grid.lambdas", "coefficients must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.dataset.token_dim(),
            max_tokens: self.dataset.tokens(),
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            layers: self.model.layers,
            heads: self.model.heads,
            num_classes: self.dataset.classes(),
            norm: self.model.norm,
        }
    }

    pub fn reg_spec(&self) -> RegSpec {
        let layers = self.model.layers;
        let r = &self.reg;
        let mut spec = RegSpec::disabled(layers, r.p);
        for c in Component::ALL {
            *spec.lambdas_mut(c) = r.lambda(c).expand(layers);
        }
        spec.value_variant = r.value_variant;
        spec.moment_form = r.moment_form;
        spec.attention_form = r.attention_form;
        spec.ffn_form = r.ffn_form;
        spec
    }

    pub fn placements(&self) -> Vec<DropoutPlacement> {
        [self.dropout.attention, self.dropout.ffn]
            .into_iter()
            .filter(|m| *m != DropoutMode::None)
            .map(|mode| DropoutPlacement {
                mode,
                rate: self.dropout.rate,
            })
            .collect()
    }

    pub fn output_dir(&self, root: &Path) -> PathBuf {
        root.join(self.output.as_deref().unwrap_or("run"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs always serialize")
    }
}
