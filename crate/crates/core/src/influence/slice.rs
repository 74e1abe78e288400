// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use crate::circuit::Circuit;
use crate::error::{Error, Result};
use crate::model::forward::{forward, InputSource, Routing};
use crate::model::{ModelParams, Objective};

/// Parameters of the circuit nodes in one layer, in a fixed flattening order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlice {
    pub layer: usize,
    pub paths: Vec<String>,
    pub dim: usize,
}

impl ParamSlice {
    /// `None` when the circuit has no node in `layer`.
    pub fn for_layer(
        params: &ModelParams,
        circuit: &Circuit,
        layer: usize,
    ) -> Result<Option<Self>> {
        let mut paths = Vec::new();
        for node in circuit.nodes_in_layer(layer) {
            paths.extend(params.node_param_paths(node));
        }
        if paths.is_empty() {
            return Ok(None);
        }
        Self::from_paths(params, layer, paths).map(Some)
    }

    pub fn from_paths(params: &ModelParams, layer: usize, paths: Vec<String>) -> Result<Self> {
        let mut dim = 0;
        for p in &paths {
            dim += params.get(p)?.len();
        }
        Ok(ParamSlice { layer, paths, dim })
    }

    pub fn flatten(&self, params: &ModelParams) -> Result<Vec<f64>> {
        params.flatten(&self.paths)
    }

    pub fn unflatten(&self, params: &mut ModelParams, flat: &[f64]) -> Result<()> {
        params.unflatten(&self.paths, flat)
    }
}

/// A twice-differentiable loss over a flat parameter vector that also splits
/// its gradient at the base point into per-token terms.
pub trait InfluenceModel: Sync {
    fn dim(&self) -> usize;

    /// Base point of the parameters.
    fn theta(&self) -> Vec<f64>;

    /// Full-example loss gradient at `theta`.
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// One gradient term per token position at the base point; the terms sum
    /// to the full gradient.
    fn per_token_gradients(&self) -> Result<Vec<Vec<f64>>>;
}

/// The transformer loss restricted to one layer's circuit parameters.
pub struct TransformerSlice<'a> {
    params: &'a ModelParams,
    slice: ParamSlice,
    tokens: Vec<usize>,
    objective: Objective,
}

impl<'a> TransformerSlice<'a> {
    pub fn new(
        params: &'a ModelParams,
        slice: ParamSlice,
        tokens: &[usize],
        objective: Objective,
    ) -> Self {
        TransformerSlice {
            params,
            slice,
            tokens: tokens.to_vec(),
            objective,
        }
    }

    pub fn slice(&self) -> &ParamSlice {
        &self.slice
    }

    fn tracked(&self) -> BTreeSet<&str> {
        self.slice.paths.iter().map(String::as_str).collect()
    }
}

impl InfluenceModel for TransformerSlice<'_> {
    fn dim(&self) -> usize {
        self.slice.dim
    }

    fn theta(&self) -> Vec<f64> {
        self.slice
            .flatten(self.params)
            .expect("slice paths come from these parameters")
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut moved = self.params.clone();
        self.slice.unflatten(&mut moved, theta)?;
        let tracked = self.tracked();
        let (_, grads) =
            crate::model::train::param_gradients(&moved, &self.tokens, &self.objective, &|p| {
                tracked.contains(p)
            })?;
        let mut flat = Vec::with_capacity(self.slice.dim);
        for p in &self.slice.paths {
            flat.extend_from_slice(grads[p].data());
        }
        Ok(flat)
    }

    fn per_token_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let tracked = self.tracked();
        let mut run = forward(
            self.params,
            InputSource::Tokens(&self.tokens),
            Routing::Residual,
            &|p| tracked.contains(p),
        )?;
        let loss = self.objective.loss(&mut run.tape, run.logits)?;
        let grads = run.tape.backward(loss, None)?;
        let t_len = self.tokens.len();
        let mut out = vec![Vec::with_capacity(self.slice.dim); t_len];
        for path in &self.slice.paths {
            let (weight_site, bias_site) = (
                run.sites.iter().find(|s| &s.weight == path),
                run.sites
                    .iter()
                    .find(|s| s.bias.as_deref() == Some(path.as_str())),
            );
            if let Some(site) = weight_site {
                let x = run.tape.value(site.input);
                let dy = grads.wrt(site.output);
                let (_, n_in) = x.rows_cols();
                let (_, n_out) = dy.rows_cols();
                for (t, g) in out.iter_mut().enumerate() {
                    let xr = x.row(t);
                    let dr = dy.row(t);
                    for &xi in &xr[..n_in] {
                        g.extend(dr.iter().map(|d| xi * d));
                    }
                    debug_assert_eq!(n_in * n_out, self.params.get(path)?.len());
                }
            } else if let Some(site) = bias_site {
                let dy = grads.wrt(site.output);
                for (t, g) in out.iter_mut().enumerate() {
                    g.extend_from_slice(dy.row(t));
                }
            } else {
                return Err(Error::Input(format!(
                    "parameter `{path}` is not a linear weight or bias"
                )));
            }
        }
        Ok(out)
    }
}

/// Per-position gradient terms of `objective` over the circuit parameters of
/// `layer`; `None` when the circuit has no node in that layer.
pub fn per_token_gradients(
    params: &ModelParams,
    circuit: &Circuit,
    layer: usize,
    tokens: &[usize],
    objective: &Objective,
) -> Result<Option<Vec<Vec<f64>>>> {
    match ParamSlice::for_layer(params, circuit, layer)? {
        None => Ok(None),
        Some(slice) => TransformerSlice::new(params, slice, tokens, objective.clone())
            .per_token_gradients()
            .map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComputationalGraph, ModelConfig, NodeId};

    fn setup() -> (ModelParams, Circuit) {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 10,
            max_seq_len: 8,
        };
        let p = ModelParams::init(&cfg, 13).unwrap();
        let g = ComputationalGraph::build(&cfg);
        (p, Circuit::full(&g))
    }

    const OBJ: Objective = Objective::CrossEntropy { target: 3 };

    #[test]
    fn slice_covers_circuit_nodes_only() {
        let (p, full) = setup();
        let s = ParamSlice::for_layer(&p, &full, 1).unwrap().unwrap();
        assert_eq!(
            s.dim,
            2 * (3 * (8 * 4 + 4) + 4 * 8) + (8 * 12 + 12 + 12 * 8 + 8)
        );
        assert!(ParamSlice::for_layer(&p, &Circuit::empty(), 0)
            .unwrap()
            .is_none());
        let g = ComputationalGraph::build(p.config());
        let one = Circuit::from_edges(&g, &["a0.h1->logits".parse().unwrap()]).unwrap();
        assert_eq!(
            one.nodes_in_layer(0),
            vec![NodeId::Head { layer: 0, head: 1 }]
        );
        let s = ParamSlice::for_layer(&p, &one, 0).unwrap().unwrap();
        assert_eq!(s.paths.len(), 7);
    }

    #[test]
    fn per_token_terms_sum_to_full_gradient() {
        let (p, full) = setup();
        let tokens = [1, 4, 1, 5, 9, 2];
        for layer in 0..2 {
            let slice = ParamSlice::for_layer(&p, &full, layer).unwrap().unwrap();
            let model = TransformerSlice::new(&p, slice, &tokens, OBJ);
            let terms = model.per_token_gradients().unwrap();
            assert_eq!(terms.len(), tokens.len());
            let full_grad = model.gradient(&model.theta()).unwrap();
            for (i, g) in full_grad.iter().enumerate() {
                let s: f64 = terms.iter().map(|t| t[i]).sum();
                assert!((s - g).abs() <= 1e-8, "coord {i}: {s} vs {g}");
            }
        }
    }

    #[test]
    fn single_token_term_is_the_gradient() {
        let (p, full) = setup();
        let slice = ParamSlice::for_layer(&p, &full, 0).unwrap().unwrap();
        let model = TransformerSlice::new(&p, slice, &[7], OBJ);
        let terms = model.per_token_gradients().unwrap();
        let g = model.gradient(&model.theta()).unwrap();
        assert_eq!(terms.len(), 1);
        assert!(terms[0].iter().zip(&g).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, full) = setup();
        let slice = ParamSlice::for_layer(&p, &full, 1).unwrap().unwrap();
        let model = TransformerSlice::new(&p, slice, &[2, 6, 3, 3], OBJ);
        let theta = model.theta();
        let g = model.gradient(&theta).unwrap();
        let loss = |th: &[f64]| {
            let mut q = p.clone();
            model.slice().unflatten(&mut q, th).unwrap();
            let (logits, _) = crate::model::run_with_cache(&q, &[2, 6, 3, 3]).unwrap();
            OBJ.value(&logits).unwrap()
        };
        for i in (0..theta.len()).step_by(37) {
            let h = 1e-6;
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "coord {i}");
        }
    }
}
