// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curvature::{estimate_scale, hvp, inverse_hvp};
use super::slice::{InfluenceModel, ParamSlice, TransformerSlice};
use crate::circuit::{Circuit, Method};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Objective};
use crate::tensor::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceOptions {
    pub damping: f64,
    pub neumann_k: usize,
    pub power_iters: usize,
    /// Restrict computation to these layers; others are filled with zeros.
    pub layers: Option<Vec<usize>>,
    /// Raise a layer's damping above its most negative curvature estimate,
    /// and multiply it by 10 after a divergence (up to `damping_retries` times).
    pub adaptive_damping: bool,
    pub damping_retries: usize,
}

impl Default for InfluenceOptions {
    fn default() -> Self {
        InfluenceOptions {
            damping: 0.01,
            neumann_k: 100,
            power_iters: 20,
            layers: None,
            adaptive_damping: true,
            damping_retries: 3,
        }
    }
}

/// Self-influence per token (rows, in sequence order) and layer (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceTable {
    pub tokens: Vec<String>,
    pub n_layers: usize,
    pub values: Vec<Vec<f64>>,
    pub method: Option<Method>,
    /// Layers with no circuit parameters, or skipped; their column is zero.
    pub empty_layers: Vec<usize>,
    /// Damping actually used per layer; `None` for empty layers.
    #[serde(default)]
    pub damping: Vec<Option<f64>>,
}

impl InfluenceTable {
    pub fn get(&self, token: usize, layer: usize) -> f64 {
        self.values[token][layer]
    }

    pub fn column(&self, layer: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[layer]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.tokens.len()
            || self.values.iter().any(|r| r.len() != self.n_layers)
        {
            return Err(Error::Input(
                "influence table dimensions do not match".into(),
            ));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "influence table holds non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Largest eigenvalue magnitude `s` of `H + damping I` and an estimate of its
/// smallest eigenvalue, from power iteration on the operator shifted by `-s`.
pub fn damped_spectrum(
    model: &dyn InfluenceModel,
    theta: &[f64],
    damping: f64,
    iters: usize,
) -> Result<(f64, f64)> {
    let grad = |t: &[f64]| model.gradient(t);
    let damped = |v: &[f64], shift: f64| -> Result<Vec<f64>> {
        let mut hv = hvp(grad, theta, v)?;
        hv.iter_mut()
            .zip(v)
            .for_each(|(h, x)| *h += (damping - shift) * x);
        Ok(hv)
    };
    let (top, _) = estimate_scale(|v: &[f64]| damped(v, 0.0), model.dim(), iters)?;
    let gap = match estimate_scale(|v: &[f64]| damped(v, top), model.dim(), iters) {
        Ok((gap, _)) => gap,
        Err(Error::SpectralEstimate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok((top, top - gap))
}

fn column_at(
    model: &dyn InfluenceModel,
    theta: &[f64],
    terms: &[Vec<f64>],
    c: f64,
    damping: f64,
    k: usize,
) -> std::result::Result<Vec<f64>, (usize, Error)> {
    let grad = |t: &[f64]| model.gradient(t);
    terms
        .par_iter()
        .enumerate()
        .map(|(t, g)| {
            if g.iter().all(|&x| x == 0.0) {
                return Ok(0.0);
            }
            let ihvp = inverse_hvp(|v: &[f64]| hvp(grad, theta, v), g, c, damping, k)
                .map_err(|e| (t, e))?;
            Ok(dot(g, &ihvp))
        })
        .collect()
}

/// `g^T (H + damping I)^{-1} g` for every per-token gradient of one model,
/// with the damping that was used.
pub fn self_influence_column(
    model: &dyn InfluenceModel,
    opts: &InfluenceOptions,
) -> Result<(Vec<f64>, f64)> {
    let theta = model.theta();
    let terms = model.per_token_gradients()?;
    let wrap = |token: usize, e: Error| Error::Influence {
        layer: usize::MAX,
        token,
        source: Box::new(e),
    };
    let (top, bottom) =
        damped_spectrum(model, &theta, opts.damping, opts.power_iters).map_err(|e| wrap(0, e))?;
    let mut extra = if opts.adaptive_damping {
        2.0 * (-bottom).max(0.0)
    } else {
        0.0
    };
    let retries = if opts.adaptive_damping {
        opts.damping_retries
    } else {
        0
    };
    let mut attempt = 0;
    loop {
        let damping = opts.damping + extra;
        let c = 0.9 / (top + extra);
        match column_at(model, &theta, &terms, c, damping, opts.neumann_k) {
            Ok(col) => return Ok((col, damping)),
            Err((_, Error::Divergence { .. })) if attempt < retries => {
                extra = 10.0 * damping - opts.damping;
                attempt += 1;
            }
            Err((t, e)) => return Err(wrap(t, e)),
        }
    }
}

/// Assembles a table from one optional model per layer (`None` = no circuit
/// parameters in that layer).
pub fn self_influence_table_from_models(
    tokens: Vec<String>,
    layers: &[Option<&dyn InfluenceModel>],
    method: Option<Method>,
    opts: &InfluenceOptions,
) -> Result<InfluenceTable> {
    let n_layers = layers.len();
    let mut values = vec![vec![0.0; n_layers]; tokens.len()];
    let mut empty_layers = Vec::new();
    let mut damping = vec![None; n_layers];
    for (layer, model) in layers.iter().enumerate() {
        let wanted = opts.layers.as_ref().is_none_or(|ls| ls.contains(&layer));
        let Some(model) = model.filter(|_| wanted) else {
            empty_layers.push(layer);
            continue;
        };
        let (column, used) = self_influence_column(model, opts).map_err(|e| match e {
            Error::Influence { token, source, .. } => Error::Influence {
                layer,
                token,
                source,
            },
            other => Error::Influence {
                layer,
                token: 0,
                source: Box::new(other),
            },
        })?;
        if column.len() != tokens.len() {
            return Err(Error::shape(
                "self_influence_table",
                format!(
                    "{} per-token terms for {} tokens",
                    column.len(),
                    tokens.len()
                ),
            ));
        }
        for (row, v) in values.iter_mut().zip(column) {
            row[layer] = v;
        }
        damping[layer] = Some(used);
    }
    let table = InfluenceTable {
        tokens,
        n_layers,
        values,
        method,
        empty_layers,
        damping,
    };
    table.validate()?;
    Ok(table)
}

/// Layer-by-token self-influence of one example inside `circuit`.
pub fn self_influence_table(
    params: &ModelParams,
    circuit: &Circuit,
    tokens: &[usize],
    words: Vec<String>,
    objective: &Objective,
    opts: &InfluenceOptions,
) -> Result<InfluenceTable> {
    if circuit.edges.is_empty() {
        return Err(Error::Input(
            "self-influence needs a nonempty circuit".into(),
        ));
    }
    if words.len() != tokens.len() {
        return Err(Error::Input("token words and ids differ in length".into()));
    }
    let n_layers = params.config().n_layers;
    let mut models = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        models.push(
            ParamSlice::for_layer(params, circuit, layer)?
                .map(|s| TransformerSlice::new(params, s, tokens, objective.clone())),
        );
    }
    let refs: Vec<Option<&dyn InfluenceModel>> = models
        .iter()
        .map(|m| m.as_ref().map(|m| m as &dyn InfluenceModel))
        .collect();
    self_influence_table_from_models(words, &refs, circuit.method, opts)
}

/// `-g_test^T (H + damping I)^{-1} g_train` with `H` the Hessian of `model`.
pub fn cross_influence(
    model: &dyn InfluenceModel,
    train_grad: &[f64],
    test_grad: &[f64],
    opts: &InfluenceOptions,
) -> Result<f64> {
    if train_grad.len() != model.dim() || test_grad.len() != model.dim() {
        return Err(Error::shape(
            "cross_influence",
            format!(
                "gradients of length {} and {} for a slice of {}",
                train_grad.len(),
                test_grad.len(),
                model.dim()
            ),
        ));
    }
    let theta = model.theta();
    let (top, _) = damped_spectrum(model, &theta, opts.damping, opts.power_iters)?;
    let grad = |t: &[f64]| model.gradient(t);
    let ihvp = inverse_hvp(
        |v: &[f64]| hvp(grad, &theta, v),
        train_grad,
        0.9 / top,
        opts.damping,
        opts.neumann_k,
    )?;
    Ok(-dot(test_grad, &ihvp))
}

/// `L(W) = sum_t 1/2 |W x_t|^2` over a flattened `rows x cols` matrix `W`.
/// Its Hessian is `I_rows (x) sum_t x_t x_t^T`.
#[derive(Clone, Debug)]
pub struct QuadraticSurrogate {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
}

impl QuadraticSurrogate {
    fn wx(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| dot(&w[r * self.cols..(r + 1) * self.cols], x))
            .collect()
    }

    fn term(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let y = self.wx(w, x);
        let mut g = Vec::with_capacity(self.rows * self.cols);
        for yr in y {
            g.extend(x.iter().map(|xc| yr * xc));
        }
        g
    }
}

impl InfluenceModel for QuadraticSurrogate {
    fn dim(&self) -> usize {
        self.rows * self.cols
    }

    fn theta(&self) -> Vec<f64> {
        self.w.clone()
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        for x in &self.xs {
            g.iter_mut()
                .zip(self.term(theta, x))
                .for_each(|(a, b)| *a += b);
        }
        Ok(g)
    }

    fn per_token_gradients(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.xs.iter().map(|x| self.term(&self.w, x)).collect())
    }
}
