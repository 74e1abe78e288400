// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ioi::IoiExample;
use crate::model::{
    final_distribution, interpolate, run_with_cache, slot_gradients_from_embedding,
    ActivationCache, ComputationalGraph, Edge, ModelParams, Objective,
};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "eap")]
    Eap,
    #[serde(rename = "eap-ig")]
    EapIg,
    #[serde(rename = "eap-ig-kl")]
    EapIgKl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Eap, Method::EapIg, Method::EapIgKl];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Eap => "eap",
            Method::EapIg => "eap-ig",
            Method::EapIgKl => "eap-ig-kl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown method `{s}` (expected eap, eap-ig or eap-ig-kl)"
                ))
            })
    }
}

/// Which loss the attribution gradients differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Negative logit difference between target and distractor.
    NegLogitDiff,
    /// KL from the clean final-position distribution to the current one.
    KlToClean,
}

/// One attribution score per graph edge, in graph edge order.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScores {
    pub method: Method,
    pub scores: Vec<f64>,
    pub n_examples: usize,
    pub ig_steps: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ScoresFile {
    method: Method,
    n_examples: usize,
    ig_steps: Option<usize>,
    scores: BTreeMap<String, f64>,
}

impl EdgeScores {
    pub fn get(&self, graph: &ComputationalGraph, edge: &Edge) -> Option<f64> {
        graph.edge_position(edge).map(|i| self.scores[i])
    }

    pub fn to_json(&self, graph: &ComputationalGraph) -> Result<String> {
        let file = ScoresFile {
            method: self.method,
            n_examples: self.n_examples,
            ig_steps: self.ig_steps,
            scores: graph
                .edges()
                .iter()
                .zip(&self.scores)
                .map(|(e, &s)| (e.to_string(), s))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str, graph: &ComputationalGraph) -> Result<Self> {
        let file: ScoresFile = serde_json::from_str(text)?;
        let mut scores = vec![f64::NAN; graph.edges().len()];
        for (name, s) in file.scores {
            let edge: Edge = name.parse()?;
            let i = graph
                .edge_position(&edge)
                .ok_or_else(|| Error::Input(format!("edge `{edge}` is not in the graph")))?;
            scores[i] = s;
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!(
                "missing or non-finite score for edge `{}`",
                graph.edges()[i]
            )));
        }
        Ok(EdgeScores {
            method: file.method,
            scores,
            n_examples: file.n_examples,
            ig_steps: file.ig_steps,
        })
    }
}

/// `(1/m) sum_{k=1..m} grad(k/m)`: the right Riemann sum of a path integral.
pub fn riemann_average(
    m: usize,
    mut grad_at: impl FnMut(f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Input("integration steps must be at least 1".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for k in 1..=m {
        let g = grad_at(k as f64 / m as f64)?;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        }
    }
    let mut acc = acc.expect("m >= 1");
    let inv = m as f64;
    acc.iter_mut().for_each(|x| *x /= inv);
    Ok(acc)
}

/// Per-edge `(z'_u - z_u) . g_v` from cached outputs and per-slot gradients.
fn edge_products(
    graph: &ComputationalGraph,
    clean: &ActivationCache,
    corrupted: &ActivationCache,
    slot_grads: &[Vec<f64>],
) -> Vec<f64> {
    let n_src = graph.nodes().len() - 1;
    let deltas: Vec<Vec<f64>> = (0..n_src)
        .map(|i| {
            corrupted
                .output(i)
                .data()
                .iter()
                .zip(clean.output(i).data())
                .map(|(c, x)| c - x)
                .collect()
        })
        .collect();
    graph
        .edges()
        .iter()
        .map(|e| {
            let src = graph.node_position(e.src);
            let dst = graph.slot_position(e.dst);
            tensor::dot(&deltas[src], &slot_grads[dst])
        })
        .collect()
}

fn example_scores(
    params: &ModelParams,
    graph: &ComputationalGraph,
    ex: &IoiExample,
    loss: LossKind,
    ig_steps: Option<usize>,
) -> Result<Vec<f64>> {
    if ex.clean_tokens.len() != ex.corrupted_tokens.len() {
        return Err(Error::Input(
            "clean and corrupted sequences are not aligned".into(),
        ));
    }
    let (clean_logits, clean) = run_with_cache(params, &ex.clean_tokens)?;
    let (_, corrupted) = run_with_cache(params, &ex.corrupted_tokens)?;
    let objective = match loss {
        LossKind::NegLogitDiff => Objective::NegLogitDiff {
            target: ex.target_id,
            distractor: ex.distractor_id,
        },
        LossKind::KlToClean => Objective::KlToReference {
            reference: final_distribution(&clean_logits),
        },
    };
    let grads_at = |alpha: f64| -> Result<Vec<Vec<f64>>> {
        let input = if alpha == 1.0 {
            clean.input_embedding().clone()
        } else {
            interpolate(corrupted.input_embedding(), clean.input_embedding(), alpha)
        };
        let (_, _, grads) =
            slot_gradients_from_embedding(params, &ex.clean_tokens, input, &objective)?;
        Ok(grads.into_iter().map(Tensor::into_data).collect())
    };
    let slot_grads = match ig_steps {
        None => grads_at(1.0)?,
        Some(m) => {
            let shapes: Vec<usize> = (0..graph.slots().len())
                .map(|s| clean.slot_input(s).len())
                .collect();
            let flat = riemann_average(m, |a| Ok(grads_at(a)?.concat()))?;
            let mut out = Vec::with_capacity(shapes.len());
            let mut off = 0;
            for n in shapes {
                out.push(flat[off..off + n].to_vec());
                off += n;
            }
            out
        }
    };
    Ok(edge_products(graph, &clean, &corrupted, &slot_grads))
}

/// Mean attribution over `batch`. `ig_steps = None` takes the gradient at the
/// clean input only; `Some(m)` averages it over `m` points on the straight
/// line from the corrupted to the clean input embedding.
pub fn attribution_scores(
    params: &ModelParams,
    graph: &ComputationalGraph,
    batch: &[IoiExample],
    loss: LossKind,
    ig_steps: Option<usize>,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Input("scoring batch is empty".into()));
    }
    if ig_steps == Some(0) {
        return Err(Error::Input("integration steps must be at least 1".into()));
    }
    let per_example: Vec<Result<Vec<f64>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let s =
                example_scores(params, graph, ex, loss, ig_steps).map_err(|e| Error::Scoring {
                    example: i,
                    detail: e.to_string(),
                })?;
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::Scoring {
                    example: i,
                    detail: "non-finite gradient".into(),
                });
            }
            Ok(s)
        })
        .collect();
    let mut total = vec![0.0; graph.edges().len()];
    for s in per_example {
        total.iter_mut().zip(s?).for_each(|(t, x)| *t += x);
    }
    let n = batch.len() as f64;
    total.iter_mut().for_each(|t| *t /= n);
    Ok(total)
}

/// Edge attribution patching with the gradient taken at the clean input.
pub fn eap_scores(
    params: &ModelParams,
    graph: &ComputationalGraph,
    batch: &[IoiExample],
) -> Result<EdgeScores> {
    Ok(EdgeScores {
        method: Method::Eap,
        scores: attribution_scores(params, graph, batch, LossKind::NegLogitDiff, None)?,
        n_examples: batch.len(),
        ig_steps: None,
    })
}

pub fn eap_ig_scores(
    params: &ModelParams,
    graph: &ComputationalGraph,
    batch: &[IoiExample],
    m: usize,
) -> Result<EdgeScores> {
    Ok(EdgeScores {
        method: Method::EapIg,
        scores: attribution_scores(params, graph, batch, LossKind::NegLogitDiff, Some(m))?,
        n_examples: batch.len(),
        ig_steps: Some(m),
    })
}

pub fn eap_ig_kl_scores(
    params: &ModelParams,
    graph: &ComputationalGraph,
    batch: &[IoiExample],
    m: usize,
) -> Result<EdgeScores> {
    Ok(EdgeScores {
        method: Method::EapIgKl,
        scores: attribution_scores(params, graph, batch, LossKind::KlToClean, Some(m))?,
        n_examples: batch.len(),
        ig_steps: Some(m),
    })
}

/// Dispatches on `method`; `m` is ignored for plain EAP.
pub fn score(
    method: Method,
    params: &ModelParams,
    graph: &ComputationalGraph,
    batch: &[IoiExample],
    m: usize,
) -> Result<EdgeScores> {
    match method {
        Method::Eap => eap_scores(params, graph, batch),
        Method::EapIg => eap_ig_scores(params, graph, batch, m),
        Method::EapIgKl => eap_ig_kl_scores(params, graph, batch, m),
    }
}
