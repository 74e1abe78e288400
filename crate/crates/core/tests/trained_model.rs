// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use circuitscope::circuit::{eap_ig_kl_scores, eap_ig_scores, faithfulness, Circuit};
use circuitscope::ioi::Variant;
use circuitscope::model::{mean_logit_diff, ComputationalGraph};
use circuitscope::report::{select_clamped, PipelineConfig};
use circuitscope::stats::spearman;
use common::*;

#[test]
fn clean_run_beats_corrupted_hard() {
    let params = trained();
    let held_out = PipelineConfig::default().eval_batch(dataset()).to_vec();
    let clean = mean_logit_diff(params, &held_out, Variant::Clean).unwrap();
    let hard = mean_logit_diff(params, &held_out, Variant::CorruptedHard).unwrap();
    assert!(clean > 1.0, "clean {clean}");
    assert!(clean > hard, "clean {clean} vs corrupted-hard {hard}");
}

#[test]
fn integrated_gradients_converge_in_steps() {
    let params = trained();
    let graph = ComputationalGraph::build(params.config());
    let batch = &dataset()[..8];
    let a = eap_ig_scores(params, &graph, batch, 64).unwrap();
    let b = eap_ig_scores(params, &graph, batch, 128).unwrap();
    let err = rel_err(&a.scores, &b.scores);
    assert!(err < 0.01, "relative change {err}");
}

#[test]
fn kl_scores_are_finite_and_track_logit_diff_scores() {
    let params = trained();
    let graph = ComputationalGraph::build(params.config());
    let batch = &dataset()[..16];
    let kl = eap_ig_kl_scores(params, &graph, batch, 5).unwrap();
    assert!(kl.scores.iter().all(|s| s.is_finite()));
    assert!(kl.scores.iter().any(|&s| s != 0.0));

    let ld = eap_ig_scores(params, &graph, batch, 5).unwrap();
    let mut order: Vec<usize> = (0..ld.scores.len()).collect();
    order.sort_by(|&i, &j| ld.scores[j].abs().total_cmp(&ld.scores[i].abs()));
    let top: Vec<usize> = order.into_iter().take(100).collect();
    let x: Vec<f64> = top.iter().map(|&i| ld.scores[i].abs()).collect();
    let y: Vec<f64> = top.iter().map(|&i| kl.scores[i].abs()).collect();
    let rho = spearman(&x, &y).unwrap();
    assert!(rho > 0.3, "spearman {rho}");
}

#[test]
fn small_circuit_recovers_more_than_the_empty_one() {
    let params = trained();
    let graph = ComputationalGraph::build(params.config());
    let cfg = PipelineConfig::default();
    let scores = eap_ig_scores(params, &graph, &dataset()[..32], 5).unwrap();
    let circuit = select_clamped(&scores, graph.edges().len() / 10, &graph).unwrap();
    let eval = &dataset()[cfg.score_examples..cfg.score_examples + 50];
    let small = faithfulness(params, &graph, &circuit, eval, Variant::Corrupted).unwrap();
    let empty = faithfulness(params, &graph, &Circuit::empty(), eval, Variant::Corrupted).unwrap();
    assert!(small.raw > empty.raw, "{} vs {}", small.raw, empty.raw);
}
