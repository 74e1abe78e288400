// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{norm, norm_inf};

/// Consecutive growing increments that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 5;
/// Relative increment below which the series is considered converged.
pub const NEUMANN_TOLERANCE: f64 = 1e-6;

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Hessian-vector product by central differences of `grad` along `v`.
pub fn hvp<G>(grad: G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != theta.len() {
        return Err(Error::shape(
            "hvp",
            format!(
                "vector of length {} for {} parameters",
                v.len(),
                theta.len()
            ),
        ));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = 1e-3 * (1.0 + norm_inf(theta));
    let step = eps / vn;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + step * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - step * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    check_finite("gradient in hvp", &gp)?;
    check_finite("gradient in hvp", &gm)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::shape(
            "hvp",
            "gradient length differs from parameter count",
        ));
    }
    let scale = vn / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * scale).collect())
}

/// Power iteration for the largest eigenvalue magnitude of the operator.
/// Returns `(lambda_max, 0.9 / lambda_max)`.
pub fn estimate_scale<H>(mut op: H, d: usize, iters: usize) -> Result<(f64, f64)>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::Input(
            "power iteration needs at least one step".into(),
        ));
    }
    if d == 0 {
        return Err(Error::SpectralEstimate("empty parameter slice".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let hv = op(&v)?;
        lambda = norm(&hv);
        if !lambda.is_finite() {
            return Err(Error::SpectralEstimate("non-finite operator output".into()));
        }
        if lambda == 0.0 {
            break;
        }
        v = hv.into_iter().map(|x| x / lambda).collect();
    }
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::SpectralEstimate(format!(
            "dominant eigenvalue estimate {lambda} is not positive"
        )));
    }
    Ok((lambda, 0.9 / lambda))
}

/// Truncated Neumann series for `(H + damping I)^{-1} v`:
/// `r_{i+1} = v + (I - c (H + damping I)) r_i`, returning `c r`.
pub fn inverse_hvp<H>(mut hvp: H, v: &[f64], c: f64, damping: f64, k: usize) -> Result<Vec<f64>>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if k == 0 {
        return Err(Error::Input("Neumann depth must be at least 1".into()));
    }
    if !c.is_finite() || c <= 0.0 || damping.is_nan() || damping < 0.0 {
        return Err(Error::Input(format!(
            "invalid scale {c} or damping {damping}"
        )));
    }
    if norm(v) == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut r = v.to_vec();
    let mut last_step = f64::INFINITY;
    let mut growing = 0;
    for i in 0..k {
        let hr = hvp(&r)?;
        if hr.len() != r.len() {
            return Err(Error::shape(
                "inverse_hvp",
                "operator changed the vector length",
            ));
        }
        let next: Vec<f64> = (0..r.len())
            .map(|j| v[j] + r[j] - c * (hr[j] + damping * r[j]))
            .collect();
        check_finite("Neumann iterate", &next)?;
        let step = norm(
            &next
                .iter()
                .zip(&r)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        );
        let rel = step / norm(&r).max(f64::MIN_POSITIVE);
        r = next;
        if rel < NEUMANN_TOLERANCE {
            break;
        }
        growing = if step > last_step { growing + 1 } else { 0 };
        if growing >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence {
                iteration: i + 1,
                detail: format!(
                    "increment norm grew for {DIVERGENCE_PATIENCE} consecutive steps (now {step:.3e}); scale c = {c} is too large for this operator"
                ),
            });
        }
        last_step = step;
    }
    Ok(r.into_iter().map(|x| c * x).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(a: [[f64; 2]; 2]) -> impl Fn(&[f64]) -> Result<Vec<f64>> {
        move |t: &[f64]| {
            Ok(vec![
                a[0][0] * t[0] + a[0][1] * t[1],
                a[1][0] * t[0] + a[1][1] * t[1],
            ])
        }
    }

    #[test]
    fn hvp_of_diagonal_quadratic() {
        let g = quad_grad([[2.0, 0.0], [0.0, 4.0]]);
        let hv = hvp(&g, &[0.3, -0.7], &[1.0, 1.0]).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-9 && (hv[1] - 4.0).abs() < 1e-9);
        assert_eq!(hvp(&g, &[0.3, -0.7], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(hvp(&g, &[0.3, -0.7], &[1.0]).is_err());
    }

    #[test]
    fn hvp_rejects_non_finite_gradients() {
        let g = |_: &[f64]| Ok(vec![f64::NAN, 0.0]);
        assert!(matches!(
            hvp(g, &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn power_iteration_on_small_operators() {
        let (l, c) = estimate_scale(|v: &[f64]| Ok(vec![2.0 * v[0], 4.0 * v[1]]), 2, 20).unwrap();
        assert!((l - 4.0).abs() / 4.0 < 0.02);
        assert!((c - 0.225).abs() < 0.01);
        let (l, c) = estimate_scale(|v: &[f64]| Ok(v.to_vec()), 5, 3).unwrap();
        assert!((l - 1.0).abs() < 1e-12 && (c - 0.9).abs() < 1e-12);
        assert!(matches!(
            estimate_scale(|v: &[f64]| Ok(vec![0.0; v.len()]), 3, 5),
            Err(Error::SpectralEstimate(_))
        ));
    }

    #[test]
    fn neumann_geometric_series() {
        let r = inverse_hvp(|v: &[f64]| Ok(vec![0.5 * v[0]]), &[1.0], 1.0, 0.0, 50).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-5);
        let r = inverse_hvp(|v: &[f64]| Ok(v.to_vec()), &[0.5, -2.0], 0.9, 0.0, 100).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-6 && (r[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn neumann_detects_divergence() {
        // c H = 2.5 makes |1 - cH| > 1.
        let err = inverse_hvp(|v: &[f64]| Ok(vec![2.5 * v[0]]), &[1.0], 1.0, 0.0, 100).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration, .. } if iteration <= 7));
        // A negative eigenvalue also diverges.
        let err =
            inverse_hvp(|v: &[f64]| Ok(vec![-0.1 * v[0]]), &[1.0], 1.0, 0.0, 100).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn neumann_of_zero_vector() {
        let r = inverse_hvp(|v: &[f64]| Ok(v.to_vec()), &[0.0, 0.0], 0.9, 0.01, 10).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }
}
