// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use circuitscope::influence::{InfluenceModel, QuadraticSurrogate};
use circuitscope::ioi::{generate, IoiExample, Vocabulary};
use circuitscope::model::{train_toy_model, ModelConfig, ModelParams, TrainConfig};
use circuitscope::report::{sha256_hex, TRAIN_SEED_OFFSET};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEED: u64 = 0;

pub fn toy_config() -> ModelConfig {
    ModelConfig::toy(Vocabulary::ioi().len())
}

/// Evaluation dataset as produced by the pipeline's generate stage.
pub fn dataset() -> &'static [IoiExample] {
    static DATA: OnceLock<Vec<IoiExample>> = OnceLock::new();
    DATA.get_or_init(|| generate(1000, SEED).unwrap())
}

fn cache_path() -> PathBuf {
    let key = serde_json::to_string(&(toy_config(), TrainConfig::default(), SEED)).unwrap();
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join(format!("toy-{}.ckpt", &sha256_hex(key.as_bytes())[..16]))
}

/// Trains the default recipe and stores the checkpoint for later test targets.
pub fn train_fresh() -> (ModelParams, Duration) {
    let corpus = generate(4000, SEED + TRAIN_SEED_OFFSET).unwrap();
    let t = Instant::now();
    let (params, _) = train_toy_model(&corpus, &toy_config(), &TrainConfig::default()).unwrap();
    let elapsed = t.elapsed();
    params.save(cache_path()).unwrap();
    (params, elapsed)
}

/// The default-recipe model, loaded from the checkpoint cache when present.
pub fn trained() -> &'static ModelParams {
    static MODEL: OnceLock<ModelParams> = OnceLock::new();
    MODEL.get_or_init(|| match ModelParams::load(cache_path()) {
        Ok(p) => p,
        Err(_) => train_fresh().0,
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps this helper independent of the crate's sampler.
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let v: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

/// `A^T A / n + shift I` for a Gaussian `n x n` matrix `A`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_vec(n, n, gaussian_vec(rng, n * n));
    a.transpose() * &a / n as f64 + DMatrix::identity(n, n) * shift
}

pub fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Explicit Hessian by central differences of the gradient along each axis.
pub fn explicit_hessian(model: &dyn InfluenceModel, h: f64) -> DMatrix<f64> {
    let theta = model.theta();
    let d = theta.len();
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut up = theta.clone();
        up[j] += h;
        let mut dn = theta.clone();
        dn[j] -= h;
        let gu = model.gradient(&up).unwrap();
        let gd = model.gradient(&dn).unwrap();
        for i in 0..d {
            m[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

/// A surrogate whose Hessian `I (x) S` is well conditioned.
pub fn surrogate(seed: u64, rows: usize, cols: usize, tokens: usize) -> QuadraticSurrogate {
    let mut r = rng(seed);
    QuadraticSurrogate {
        rows,
        cols,
        w: gaussian_vec(&mut r, rows * cols),
        xs: (0..tokens).map(|_| gaussian_vec(&mut r, cols)).collect(),
    }
}

/// Closed form `|W x_t|^2 x_t^T (S + damping I)^{-1} x_t` per token.
pub fn surrogate_closed_form(s: &QuadraticSurrogate, damping: f64) -> Vec<f64> {
    let n = s.cols;
    let mut sm = DMatrix::identity(n, n) * damping;
    for x in &s.xs {
        let xv = DVector::from_column_slice(x);
        sm += &xv * xv.transpose();
    }
    let chol = sm.cholesky().expect("S + damping I is positive definite");
    s.xs.iter()
        .map(|x| {
            let xv = DVector::from_column_slice(x);
            let wx: f64 = (0..s.rows)
                .map(|r| {
                    let row = &s.w[r * n..(r + 1) * n];
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().powi(2)
                })
                .sum();
            wx * xv.dot(&chol.solve(&xv))
        })
        .collect()
}
