// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward, InputSource, Routing};
use super::{ModelConfig, ModelParams, Objective};
use crate::error::{Error, Result};
use crate::ioi::{logit_diff, IoiExample, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            steps: 2000,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss at each step.
    pub losses: Vec<f64>,
}

/// Loss and gradients of `objective` for the parameters selected by `track`.
pub(crate) fn param_gradients(
    params: &ModelParams,
    tokens: &[usize],
    objective: &Objective,
    track: &dyn Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut run = forward(
        params,
        InputSource::Tokens(tokens),
        Routing::Residual,
        track,
    )?;
    let loss = objective.loss(&mut run.tape, run.logits)?;
    let value = run.tape.value(loss).data()[0];
    let grads = run.tape.backward(loss, None)?;
    let out = run
        .params
        .iter()
        .filter(|(path, _)| track(path))
        .map(|(path, &v)| (path.clone(), grads.wrt(v)))
        .collect();
    Ok((value, out))
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (path, w) in params.iter_mut() {
            let g = grads[path].data();
            let m = self.m.get_mut(path).expect("moment per param");
            let v = self.v.get_mut(path).expect("moment per param");
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Global gradient norm above which the batch gradient is rescaled.
const CLIP_NORM: f64 = 1.0;

/// Linear warmup over the first 5% of steps, then cosine decay to 10% of the
/// base rate.
pub fn learning_rate_at(hyper: &TrainConfig, step: usize) -> f64 {
    let warmup = (hyper.steps / 20).max(1);
    if step < warmup {
        return hyper.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let span = hyper.steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    hyper.learning_rate * (0.1 + 0.9 * cosine)
}

/// Trains on final-position cross-entropy toward the indirect object using
/// Adam over minibatches sampled with replacement, with gradient-norm
/// clipping and the [`learning_rate_at`] schedule.
pub fn train_toy_model(
    dataset: &[IoiExample],
    config: &ModelConfig,
    hyper: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let mut params = ModelParams::init(config, hyper.seed)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut report = TrainReport::default();

    for step in 0..hyper.steps {
        let batch: Vec<usize> = (0..hyper.batch_size)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
            .par_iter()
            .map(|&i| {
                let ex = &dataset[i];
                let objective = Objective::CrossEntropy {
                    target: ex.target_id,
                };
                param_gradients(&params, &ex.clean_tokens, &objective, &|_| true)
            })
            .collect();

        let mut loss = 0.0;
        let mut total: Option<BTreeMap<String, Tensor>> = None;
        for r in results {
            let (l, g) = r.map_err(|e| Error::Training {
                step,
                detail: e.to_string(),
            })?;
            loss += l;
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => {
                    for (k, t) in acc.iter_mut() {
                        t.add_assign(&g[k]);
                    }
                }
            }
        }
        let scale = 1.0 / hyper.batch_size as f64;
        loss *= scale;
        let mut grads = total.expect("nonempty batch");
        for t in grads.values_mut() {
            t.scale_in_place(scale);
        }
        if !loss.is_finite() || grads.values().any(|t| !t.all_finite()) {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss or gradient (loss {loss})"),
            });
        }
        let gnorm = grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if gnorm > CLIP_NORM {
            for t in grads.values_mut() {
                t.scale_in_place(CLIP_NORM / gnorm);
            }
        }
        adam.step(&mut params, &grads, learning_rate_at(hyper, step));
        if params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Training {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        report.losses.push(loss);
    }
    Ok((params, report))
}

/// Mean logit difference of the full model over `examples`.
pub fn mean_logit_diff(
    params: &ModelParams,
    examples: &[IoiExample],
    variant: Variant,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("no examples".into()));
    }
    let diffs: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let (logits, _) = super::run_with_cache(params, ex.tokens(variant))?;
            logit_diff(&logits, ex)
        })
        .collect();
    let mut sum = 0.0;
    for d in diffs {
        sum += d?;
    }
    Ok(sum / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ioi::{generate, Vocabulary};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 8,
            vocab_size: Vocabulary::ioi().len(),
            max_seq_len: 20,
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = generate(4, 0).unwrap();
        let hyper = TrainConfig {
            steps: 0,
            seed: 7,
            ..TrainConfig::default()
        };
        let (p, report) = train_toy_model(&data, &tiny(), &hyper).unwrap();
        assert_eq!(p, ModelParams::init(&tiny(), 7).unwrap());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = generate(32, 1).unwrap();
        let hyper = TrainConfig {
            steps: 40,
            batch_size: 4,
            learning_rate: 1e-2,
            seed: 3,
        };
        let (a, ra) = train_toy_model(&data, &tiny(), &hyper).unwrap();
        let (b, _) = train_toy_model(&data, &tiny(), &hyper).unwrap();
        assert_eq!(a, b);
        let head: f64 = ra.losses[..10].iter().sum();
        let tail: f64 = ra.losses[30..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let data = generate(4, 0).unwrap();
        let hyper = TrainConfig {
            steps: 5,
            batch_size: 2,
            learning_rate: f64::NAN,
            seed: 0,
        };
        match train_toy_model(&data, &tiny(), &hyper) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let hyper = TrainConfig {
            steps: 200,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!((learning_rate_at(&hyper, 0) - 0.1).abs() < 1e-12);
        assert!((learning_rate_at(&hyper, 9) - 1.0).abs() < 1e-12);
        assert!((learning_rate_at(&hyper, 10) - 1.0).abs() < 1e-12);
        assert!((learning_rate_at(&hyper, 105) - 0.55).abs() < 1e-12);
        assert!((learning_rate_at(&hyper, 200) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_dataset() {
        assert!(train_toy_model(&[], &tiny(), &TrainConfig::default()).is_err());
    }
}
