//! Small configs shared by the integration tests.
#![allow(dead_code)]

use exdrop::config::{parse_config, RunConfig};
use std::path::Path;

/// A quick synthetic task: 1-layer, d=8, 300-record pool, 3 epochs.
pub const TINY: &str = r#"
seed = 5

[model]
d_model = 8
d_ff = 16
layers = 1

[optimizer]
kind = "adam"
lr = 0.01

[training]
epochs = 3
batch_size = 16

[dataset]
kind = "synthetic_seq"
tokens = 4
dim = 4
records = 300
test_records = 100
signal = 2.0
"#;

pub fn config(text: &str) -> RunConfig {
    parse_config(text, false, Path::new("test.toml")).unwrap()
}

pub fn tiny() -> RunConfig {
    config(TINY)
}
