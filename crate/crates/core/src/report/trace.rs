// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::circuit::Method;
use crate::error::{Error, Result};
use crate::influence::InfluenceTable;

pub const TRACE_DESCRIPTION: &str = "One concrete realization of an inferred thought process: \
tokens ranked per layer by mean self-influence over the batch (ties by first occurrence), \
and the layer at which each token's mean influence peaks.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub mean: f64,
    pub occurrences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub layer: usize,
    pub top: Vec<TokenScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPeak {
    pub token: String,
    pub peak_layer: usize,
    pub peak_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThoughtProcess {
    pub description: String,
    pub method: Option<Method>,
    pub n_tables: usize,
    pub top_k: usize,
    pub layers: Vec<LayerRanking>,
    pub trajectory: Vec<TokenPeak>,
}

impl ThoughtProcess {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Aggregates tables by word. Words are kept in order of first occurrence
/// (table, then position), which also breaks ranking ties.
pub fn infer_thought_process(tables: &[InfluenceTable], top_k: usize) -> Result<ThoughtProcess> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Input("thought-process inference needs at least one table".into()))?;
    let n_layers = first.n_layers;
    if tables.iter().any(|t| t.n_layers != n_layers) {
        return Err(Error::Input(
            "influence tables disagree on layer count".into(),
        ));
    }
    for t in tables {
        t.validate()?;
    }

    let mut words: Vec<String> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for t in tables {
        for (token, row) in t.tokens.iter().zip(&t.values) {
            let i = match words.iter().position(|w| w == token) {
                Some(i) => i,
                None => {
                    words.push(token.clone());
                    sums.push(vec![0.0; n_layers]);
                    counts.push(0);
                    words.len() - 1
                }
            };
            sums[i].iter_mut().zip(row).for_each(|(s, v)| *s += v);
            counts[i] += 1;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();

    let layers = (0..n_layers)
        .map(|layer| {
            let mut order: Vec<usize> = (0..words.len()).collect();
            order.sort_by(|&a, &b| means[b][layer].total_cmp(&means[a][layer]).then(a.cmp(&b)));
            LayerRanking {
                layer,
                top: order
                    .into_iter()
                    .take(top_k)
                    .map(|i| TokenScore {
                        token: words[i].clone(),
                        mean: means[i][layer],
                        occurrences: counts[i],
                    })
                    .collect(),
            }
        })
        .collect();

    // Layers flagged empty in every table carry no information.
    let empty_everywhere: BTreeSet<usize> = (0..n_layers)
        .filter(|l| tables.iter().all(|t| t.empty_layers.contains(l)))
        .collect();
    let live: Vec<usize> = (0..n_layers)
        .filter(|l| !empty_everywhere.contains(l))
        .collect();
    let trajectory = words
        .iter()
        .zip(&means)
        .map(|(w, m)| {
            let peak = live
                .iter()
                .copied()
                .fold(None::<usize>, |best, l| match best {
                    Some(b) if m[b] >= m[l] => Some(b),
                    _ => Some(l),
                })
                .unwrap_or(0);
            TokenPeak {
                token: w.clone(),
                peak_layer: peak,
                peak_mean: m.get(peak).copied().unwrap_or(0.0),
            }
        })
        .collect();

    Ok(ThoughtProcess {
        description: TRACE_DESCRIPTION.into(),
        method: first.method,
        n_tables: tables.len(),
        top_k,
        layers,
        trajectory,
    })
}
