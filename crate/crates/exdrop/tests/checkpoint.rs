mod common;

use exdrop::checkpoint::{checkpoint_load, checkpoint_save};
use exdrop::data::load_dataset;
use exdrop::train::{evaluate, train_on};
use exdrop::HarnessError;
use exdrop_core::encoder::forward;
use exdrop_core::rng::stream;
use exdrop_core::Graph;

#[test]
fn loaded_parameters_reproduce_the_forward_pass_bit_for_bit() {
    let config = common::tiny();
    let data = load_dataset(&config.dataset, config.seed).unwrap();
    let out = train_on(&config, &data, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    checkpoint_save(&out.best_params, &path).unwrap();
    let loaded = checkpoint_load(&path).unwrap();
    let model = config.model_config();
    for r in data.test.iter().take(20) {
        let logits = |p: &exdrop_core::encoder::EncoderParams| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let t = forward(&mut g, &model, &b, &r.tokens, &[], false, None).unwrap();
            g.value(t.logits).clone()
        };
        let (a, b) = (logits(&out.best_params), logits(&loaded));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn evaluation_ignores_the_run_seed() {
    let config = common::tiny();
    let data = load_dataset(&config.dataset, config.seed).unwrap();
    let out = train_on(&config, &data, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    checkpoint_save(&out.best_params, &path).unwrap();

    // Evaluate under another run's seed and with an rng present: eval mode
    // draws no masks, so the accuracy is unchanged.
    let mut other = config.clone();
    other.seed = 999;
    other.dropout.attention = exdrop_core::encoder::DropoutMode::AttentionWeights;
    let loaded = checkpoint_load(&path).unwrap();
    let acc = evaluate(&other.model_config(), &loaded, &data.test).unwrap();
    assert_eq!(Some(acc), out.test_accuracy);
    let model = other.model_config();
    let mut rng = stream(other.seed, 0);
    for r in data.test.iter().take(10) {
        let mut g = Graph::new();
        let b = loaded.bind(&mut g);
        let with_rng = forward(&mut g, &model, &b, &r.tokens, &other.placements(), false, Some(&mut rng)).unwrap();
        let without = forward(&mut g, &model, &b, &r.tokens, &[], false, None).unwrap();
        assert_eq!(g.value(with_rng.logits), g.value(without.logits));
    }
}

#[test]
fn truncated_checkpoints_are_refused() {
    let config = common::tiny();
    let params = exdrop_core::encoder::EncoderParams::init(&config.model_config(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    checkpoint_save(&params, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match checkpoint_load(&path) {
        Err(HarnessError::Checkpoint { reason, .. }) => assert_eq!(reason, "checksum mismatch"),
        other => panic!("{other:?}"),
    }
}
