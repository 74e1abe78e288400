// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use super::select::Circuit;
use crate::error::{Error, Result};
use crate::ioi::{logit_diff, IoiExample, Variant};
use crate::model::{
    run_patched, run_with_cache, ActivationCache, ComputationalGraph, EdgeMask, ModelParams,
};

/// `(m - b') / (b - b')`.
pub fn normalize(m: f64, clean: f64, corrupted: f64) -> Result<f64> {
    let scale = clean.abs().max(corrupted.abs()).max(1.0);
    if (clean - corrupted).abs() <= f64::EPSILON * scale {
        return Err(Error::DegenerateBaseline { clean, corrupted });
    }
    Ok((m - corrupted) / (clean - corrupted))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Faithfulness {
    /// Mean logit difference of the patched circuit.
    pub raw: f64,
    pub normalized: f64,
}

/// Caches clean and baseline runs of a batch so many circuits can be scored
/// against the same `b` and `b'`.
pub struct FaithfulnessEvaluator<'a> {
    params: &'a ModelParams,
    graph: &'a ComputationalGraph,
    batch: &'a [IoiExample],
    caches: Vec<(ActivationCache, ActivationCache)>,
    clean_metric: f64,
    baseline_metric: f64,
}

impl<'a> FaithfulnessEvaluator<'a> {
    /// `baseline` selects which corrupted sequence patches non-circuit edges
    /// and defines `b'`: [`Variant::Corrupted`] or [`Variant::CorruptedHard`].
    pub fn new(
        params: &'a ModelParams,
        graph: &'a ComputationalGraph,
        batch: &'a [IoiExample],
        baseline: Variant,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Input("faithfulness batch is empty".into()));
        }
        if baseline == Variant::Clean {
            return Err(Error::Input(
                "faithfulness baseline must be a corrupted variant".into(),
            ));
        }
        let runs: Vec<Result<(f64, f64, ActivationCache, ActivationCache)>> = batch
            .par_iter()
            .map(|ex| {
                let (cl, clean) = run_with_cache(params, &ex.clean_tokens)?;
                let (co, corrupt) = run_with_cache(params, ex.tokens(baseline))?;
                Ok((logit_diff(&cl, ex)?, logit_diff(&co, ex)?, clean, corrupt))
            })
            .collect();
        let (mut b, mut bp) = (0.0, 0.0);
        let mut caches = Vec::with_capacity(batch.len());
        for r in runs {
            let (x, y, c, k) = r?;
            b += x;
            bp += y;
            caches.push((c, k));
        }
        let n = batch.len() as f64;
        let (b, bp) = (b / n, bp / n);
        normalize(b, b, bp)?;
        Ok(FaithfulnessEvaluator {
            params,
            graph,
            batch,
            caches,
            clean_metric: b,
            baseline_metric: bp,
        })
    }

    /// `b`: mean clean logit difference of the full model.
    pub fn clean_metric(&self) -> f64 {
        self.clean_metric
    }

    /// `b'`: mean logit difference of the full model on the baseline inputs.
    pub fn baseline_metric(&self) -> f64 {
        self.baseline_metric
    }

    pub fn evaluate_mask(&self, mask: &EdgeMask) -> Result<Faithfulness> {
        let diffs: Vec<Result<f64>> = self
            .batch
            .par_iter()
            .zip(&self.caches)
            .map(|(ex, (clean, corrupt))| {
                let logits = run_patched(self.params, self.graph, clean, corrupt, mask)?;
                logit_diff(&logits, ex)
            })
            .collect();
        let mut sum = 0.0;
        for d in diffs {
            sum += d?;
        }
        let raw = sum / self.batch.len() as f64;
        Ok(Faithfulness {
            raw,
            normalized: normalize(raw, self.clean_metric, self.baseline_metric)?,
        })
    }

    pub fn evaluate(&self, circuit: &Circuit) -> Result<Faithfulness> {
        self.evaluate_mask(&circuit.mask(self.graph)?)
    }
}

/// Mean patched logit difference of `circuit` and its normalized value.
pub fn faithfulness(
    params: &ModelParams,
    graph: &ComputationalGraph,
    circuit: &Circuit,
    batch: &[IoiExample],
    baseline: Variant,
) -> Result<Faithfulness> {
    FaithfulnessEvaluator::new(params, graph, batch, baseline)?.evaluate(circuit)
}
