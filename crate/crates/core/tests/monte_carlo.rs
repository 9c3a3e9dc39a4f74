mod support;

use exdrop_core::oracle::{convergence_report, empirical_b, empirical_j, empirical_psi, MaskBatch};
use exdrop_core::reg::{
    closed_form_b, closed_form_psi, half_trace, lambda_k, lambda_q, lambda_v, reg_ff, reg_key, reg_query,
    reg_value_attention, reg_value_token, Component, MomentForm,
};
use exdrop_core::rng::{stream, uniform};
use exdrop_core::Matrix;
use support::Instance;

#[test]
fn b_converges_to_exact_form_across_rates() {
    let x = uniform(4, 3, 1.0, &mut stream(1234, 0));
    let n = 200_000;
    for p in [0.1, 0.2, 0.5] {
        let exact = closed_form_b(&x, p, MomentForm::Exact).unwrap();
        let exceed = (0..5)
            .filter(|seed| {
                let b = empirical_b(&x, p, n, &mut stream(*seed, 1)).unwrap();
                convergence_report(&b, &exact, n).unwrap().max_z >= 4.0
            })
            .count();
        assert!(exceed <= 1, "p = {p}: {exceed} seeds exceed 4 sigma");
    }
}

#[test]
fn approx_form_is_right_off_the_diagonal_only() {
    let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    let approx = closed_form_b(&x, 0.2, MomentForm::Approx).unwrap();
    let mut last_diag = 0.0;
    for n in [2_000, 20_000, 200_000] {
        let b = empirical_b(&x, 0.2, n, &mut stream(3, 0)).unwrap();
        let (diag, off) = convergence_report(&b, &approx, n).unwrap().max_z_split();
        assert!(off < 4.0);
        assert!(diag > last_diag);
        last_diag = diag;
    }
    assert!(last_diag > 100.0);
}

#[test]
fn psi_converges_on_random_instance() {
    let s = Instance::random(8, 3, 2, 2);
    let n = 200_000;
    let psi = empirical_psi(&s.x, &s.a, 0.2, n, &mut stream(9, 0)).unwrap();
    let exact = closed_form_psi(&s.x, &s.a, 0.2, MomentForm::Exact).unwrap();
    assert!(convergence_report(&psi, &exact, n).unwrap().max_z < 4.0);
}

#[test]
fn regularizer_estimates_converge_to_exact_forms() {
    let s = Instance::random(10, 3, 2, 3);
    let p = 0.3;
    let n = 100_000;
    let form = MomentForm::Exact;
    let cases = [
        (Component::Q, vec![s.wq.clone(), s.wk.clone()], reg_query(&s.x, &s.wq, &s.wk, p, form).unwrap()),
        (Component::K, vec![s.wq.clone(), s.wk.clone()], reg_key(&s.x, &s.wq, &s.wk, p, form).unwrap()),
        (Component::V, vec![s.wv.clone()], reg_value_token(&s.x, &s.wv, p, form).unwrap()),
        (Component::Av, vec![s.wv.clone()], reg_value_attention(&s.x, &s.a, &s.wv, p, form).unwrap()),
        (Component::Ff, vec![s.w1.clone()], reg_ff(&s.x, &s.w1, p, form).unwrap()),
    ];
    for (i, (kind, w, want)) in cases.into_iter().enumerate() {
        let est = empirical_j(kind, &s.x, &w, Some(&s.a), p, n, &mut stream(11, i as u64)).unwrap();
        assert!((est.mean - want).abs() <= 4.0 * est.stderr, "{kind:?}: {} vs {want}", est.mean);
    }
}

#[test]
fn per_batch_identity_with_shared_masks() {
    let s = Instance::random(12, 4, 3, 5);
    let batch = MaskBatch::draw(4, 3, 0.2, 500, 13).unwrap();
    let b = batch.moment_b(&s.x).unwrap().matrix;
    let checks = [
        (
            batch.regularizer(Component::Q, &s.x, &[s.wq.clone(), s.wk.clone()], None).unwrap(),
            half_trace(&b, &lambda_q(&s.x, &s.wq, &s.wk).unwrap()).unwrap(),
        ),
        (
            batch.regularizer(Component::K, &s.x, &[s.wq.clone(), s.wk.clone()], None).unwrap(),
            half_trace(&b, &lambda_k(&s.x, &s.wq, &s.wk).unwrap()).unwrap(),
        ),
        (
            batch.regularizer(Component::V, &s.x, &[s.wv.clone()], None).unwrap(),
            half_trace(&b, &lambda_v(&s.wv)).unwrap(),
        ),
        (
            batch.regularizer(Component::Ff, &s.x, &[s.w1.clone()], None).unwrap(),
            half_trace(&b, &lambda_v(&s.w1)).unwrap(),
        ),
    ];
    for (est, want) in checks {
        assert!((est.mean - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
    let psi = batch.moment_psi(&s.x, &s.a).unwrap().matrix;
    let av = batch.regularizer(Component::Av, &s.x, &[s.wv.clone()], Some(&s.a)).unwrap();
    assert!((av.mean - half_trace(&psi, &lambda_v(&s.wv)).unwrap()).abs() <= 1e-10);
}

#[test]
fn streamed_and_stored_masks_agree() {
    // `MaskBatch::draw` and the streaming estimators consume the same stream.
    let x = uniform(4, 3, 1.0, &mut stream(14, 0));
    let batch = MaskBatch::draw(4, 3, 0.2, 300, 15).unwrap();
    let streamed = empirical_b(&x, 0.2, 300, &mut stream(15, exdrop_core::oracle::MASK_STREAM)).unwrap();
    assert_eq!(batch.moment_b(&x).unwrap().matrix, streamed.matrix);
}
