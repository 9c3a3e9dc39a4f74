use exdrop_core::encoder::{apply_implicit_dropout, DropoutMode};
use exdrop_core::reg::{
    arora_reg, closed_form_b, closed_form_psi, decompose, reg_ff, reg_key, reg_query, reg_value_attention,
    reg_value_token, MomentForm,
};
use exdrop_core::rng::stream;
use exdrop_core::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn shaped() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..4)
}

prop_compose! {
    fn instance()((n, d) in shaped())(
        x in matrix(n, d),
        s in matrix(n, n),
        wq in matrix(d, d),
        wk in matrix(d, d),
        wv in matrix(d, d),
        wf in matrix(d + 2, d),
    ) -> (Matrix, Matrix, Matrix, Matrix, Matrix, Matrix) {
        (x, s.row_softmax(), wq, wk, wv, wf)
    }
}

fn all_terms(s: &(Matrix, Matrix, Matrix, Matrix, Matrix, Matrix), p: f64, form: MomentForm) -> [f64; 5] {
    let (x, a, wq, wk, wv, wf) = s;
    [
        reg_query(x, wq, wk, p, form).unwrap(),
        reg_key(x, wq, wk, p, form).unwrap(),
        reg_value_token(x, wv, p, form).unwrap(),
        reg_value_attention(x, a, wv, p, form).unwrap(),
        reg_ff(x, wf, p, form).unwrap(),
    ]
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #[test]
    fn trace_of_gram_is_frobenius(a in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c))) {
        let t = a.t_matmul(&a).unwrap().trace().unwrap();
        prop_assert!(rel_close(t, a.frobenius_sq(), 1e-12));
    }

    #[test]
    fn approx_form_scales_with_p_squared(s in instance(), p in 0.01f64..0.45) {
        let lo = all_terms(&s, p, MomentForm::Approx);
        let hi = all_terms(&s, 2.0 * p, MomentForm::Approx);
        for (l, h) in lo.iter().zip(hi) {
            prop_assert!(rel_close(h, 4.0 * l, 1e-9) || (l.abs() < 1e-300 && h.abs() < 1e-300));
        }
    }

    #[test]
    fn regularizers_are_nonnegative(s in instance(), p in 0.0f64..0.95) {
        for form in [MomentForm::Approx, MomentForm::Exact] {
            for v in all_terms(&s, p, form) {
                prop_assert!(v >= -1e-12);
            }
        }
    }

    #[test]
    fn zero_rate_is_exactly_zero(s in instance()) {
        for form in [MomentForm::Approx, MomentForm::Exact] {
            prop_assert_eq!(all_terms(&s, 0.0, form), [0.0; 5]);
        }
    }

    #[test]
    fn query_key_duality(s in instance(), p in 0.0f64..0.9) {
        let (x, _, wq, wk, _, _) = &s;
        for form in [MomentForm::Approx, MomentForm::Exact] {
            let a = reg_query(x, wq, wk, p, form).unwrap();
            let b = reg_key(x, wk, wq, p, form).unwrap();
            prop_assert!(rel_close(a, b, 1e-10));
        }
    }

    #[test]
    fn exact_form_dominates_approx_form(s in instance(), p in 0.0f64..0.9) {
        // The exact correction adds a PSD diagonal to each moment.
        let approx = all_terms(&s, p, MomentForm::Approx);
        let exact = all_terms(&s, p, MomentForm::Exact);
        for (a, b) in approx.iter().zip(exact) {
            prop_assert!(b >= a - 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn moments_symmetric_psd(s in instance(), p in 0.0f64..0.9, probe in prop::collection::vec(-1.0f64..1.0, 3)) {
        let (x, a, ..) = &s;
        for form in [MomentForm::Approx, MomentForm::Exact] {
            for m in [closed_form_b(x, p, form).unwrap(), closed_form_psi(x, a, p, form).unwrap()] {
                prop_assert!(m.is_symmetric(1e-12));
                let v = &probe[..x.cols()];
                if v.iter().any(|c| *c != 0.0) {
                    prop_assert!(m.rayleigh_quotient(v) >= -1e-10);
                }
            }
        }
    }

    #[test]
    fn decomposition_identities(x in matrix(4, 3), w in matrix(2, 3), p in 0.0f64..0.95) {
        let d = decompose(&x, &w, p).unwrap();
        prop_assert!((d.r - d.r_diag - d.r_cross).abs() <= 1e-10 * d.r.abs().max(1.0));
        prop_assert!((d.r_diag - d.alpha * arora_reg(&x, &w, p).unwrap()).abs() <= 1e-10 * d.r_diag.abs().max(1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one(s in matrix(4, 6)) {
        let a = s.scale(20.0).row_softmax();
        for r in a.row_sums() {
            prop_assert!((r - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropped_attention_stays_stochastic(s in matrix(5, 5), p in 0.0f64..0.9, seed in 0u64..1000) {
        let a = s.row_softmax();
        let mut rng = stream(seed, 0);
        let dropped = apply_implicit_dropout(&a, DropoutMode::AttentionWeights, p, &mut rng).unwrap();
        for r in dropped.row_sums() {
            prop_assert!((r - 1.0).abs() <= 1e-12);
        }
        let key = apply_implicit_dropout(&s, DropoutMode::ScoresPrekey, p, &mut rng).unwrap().row_softmax();
        for r in key.row_sums() {
            prop_assert!((r - 1.0).abs() <= 1e-12);
        }
    }
}
