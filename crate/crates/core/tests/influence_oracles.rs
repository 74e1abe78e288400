// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use circuitscope::influence::{
    estimate_scale, hvp, inverse_hvp, self_influence_column, self_influence_table_from_models,
    InfluenceModel, InfluenceOptions, ParamSlice, TransformerSlice,
};
use circuitscope::ioi::Vocabulary;
use circuitscope::model::{ModelConfig, ModelParams, Objective};
use common::*;
use nalgebra::DVector;

fn tiny_params() -> ModelParams {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 8,
        vocab_size: Vocabulary::ioi().len(),
        max_seq_len: 20,
    };
    ModelParams::init(&config, 3).unwrap()
}

fn head_slice(params: &ModelParams) -> TransformerSlice<'_> {
    let ex = &dataset()[0];
    let paths = ["wq", "bq", "wk", "bk", "wv", "bv", "wo"]
        .iter()
        .map(|p| format!("blocks.1.attn.h0.{p}"))
        .collect();
    let slice = ParamSlice::from_paths(params, 1, paths).unwrap();
    TransformerSlice::new(
        params,
        slice,
        &ex.clean_tokens,
        Objective::NegLogitDiff {
            target: ex.target_id,
            distractor: ex.distractor_id,
        },
    )
}

#[test]
fn hvp_matches_explicit_hessian_on_a_head_slice() {
    let params = tiny_params();
    let model = head_slice(&params);
    let d = model.dim();
    assert!(d <= 200, "slice has {d} parameters");
    let hess = explicit_hessian(&model, 1e-5);
    let theta = model.theta();
    let mut r = rng(11);
    for _ in 0..5 {
        let v = gaussian_vec(&mut r, d);
        let got = hvp(|t: &[f64]| model.gradient(t), &theta, &v).unwrap();
        let want = matvec(&hess, &v);
        let err = rel_err(&got, &want);
        assert!(err < 1e-3, "relative error {err}");
    }
}

#[test]
fn hvp_is_linear_and_symmetric() {
    let params = tiny_params();
    let model = head_slice(&params);
    let theta = model.theta();
    let op = |v: &[f64]| hvp(|t: &[f64]| model.gradient(t), &theta, v).unwrap();
    let mut r = rng(12);
    let u = gaussian_vec(&mut r, model.dim());
    let v = gaussian_vec(&mut r, model.dim());
    let (a, b) = (1.5, -0.75);
    let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
    let (hu, hv) = (op(&u), op(&v));
    let lin: Vec<f64> = hu.iter().zip(&hv).map(|(x, y)| a * x + b * y).collect();
    assert!(rel_err(&op(&mix), &lin) < 1e-4);

    let uhv: f64 = u.iter().zip(&hv).map(|(x, y)| x * y).sum();
    let vhu: f64 = v.iter().zip(&hu).map(|(x, y)| x * y).sum();
    assert!((uhv - vhu).abs() <= 1e-4 * uhv.abs().max(vhu.abs()).max(1e-8));
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let mut r = rng(13);
    let m = random_pd(&mut r, 50, 0.1);
    let top = m.clone().symmetric_eigen().eigenvalues.max();
    let (est, c) = estimate_scale(|v: &[f64]| Ok(matvec(&m, v)), 50, 100).unwrap();
    assert!((est - top).abs() / top < 0.02, "{est} vs {top}");
    assert!((c - 0.9 / est).abs() < 1e-15);
}

#[test]
fn neumann_series_matches_direct_solve() {
    let mut r = rng(14);
    let h = random_pd(&mut r, 40, 0.5);
    let damping = 0.01;
    let v = gaussian_vec(&mut r, 40);
    let (top, _) = estimate_scale(
        |x: &[f64]| {
            Ok(matvec(&h, x)
                .iter()
                .zip(x)
                .map(|(a, b)| a + damping * b)
                .collect())
        },
        40,
        100,
    )
    .unwrap();
    let got = inverse_hvp(|x: &[f64]| Ok(matvec(&h, x)), &v, 0.9 / top, damping, 200).unwrap();
    let shifted = &h + nalgebra::DMatrix::identity(40, 40) * damping;
    let want = shifted.lu().solve(&DVector::from_column_slice(&v)).unwrap();
    let err = rel_err(&got, want.as_slice());
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn surrogate_table_matches_closed_form() {
    let s = surrogate(15, 3, 4, 40);
    let damping = 0.01;
    let opts = InfluenceOptions {
        damping,
        neumann_k: 200,
        power_iters: 50,
        ..InfluenceOptions::default()
    };
    let tokens: Vec<String> = (0..s.xs.len()).map(|i| format!("t{i}")).collect();
    let table =
        self_influence_table_from_models(tokens, &[Some(&s as &dyn InfluenceModel)], None, &opts)
            .unwrap();
    assert_eq!(table.damping, vec![Some(damping)]);
    let want = surrogate_closed_form(&s, damping);
    for (t, w) in want.iter().enumerate() {
        let got = table.get(t, 0);
        assert!((got - w).abs() <= 1e-4 * w.abs(), "token {t}: {got} vs {w}");
    }
}

#[test]
fn transformer_column_matches_dense_solve_at_the_damping_used() {
    let params = tiny_params();
    let model = head_slice(&params);
    let opts = InfluenceOptions {
        neumann_k: 400,
        ..InfluenceOptions::default()
    };
    let (column, damping) = self_influence_column(&model, &opts).unwrap();
    assert!(damping >= opts.damping);
    let d = model.dim();
    let shifted = explicit_hessian(&model, 1e-5) + nalgebra::DMatrix::identity(d, d) * damping;
    let eig = shifted.clone().symmetric_eigen();
    assert!(
        eig.eigenvalues.min() > 0.0,
        "damped operator must be positive definite"
    );
    let lu = shifted.lu();
    for (g, got) in model.per_token_gradients().unwrap().iter().zip(&column) {
        let gv = DVector::from_column_slice(g);
        let want = gv.dot(&lu.solve(&gv).unwrap());
        let cond = eig.eigenvalues.max() / eig.eigenvalues.min();
        // The series stops at a 1e-6 relative increment, so the error
        // scales with the condition number of the damped operator.
        let tol = 1e-3_f64.max(2e-6 * cond);
        assert!(
            (got - want).abs() <= tol * want.abs().max(1e-12),
            "{got} vs {want} (cond {cond:.1})"
        );
    }
}
