//! Quantile-regression estimating function.
//!
//! Per-row summand `x_i (I(y_i - x_i'theta <= 0) - tau)` with the boundary
//! included in the indicator. The sensitivity matrix uses Powell's kernel
//! estimator with a Gaussian kernel and the normal-reference bandwidth
//! `h = 1.06 * sd(residuals) * n^(-1/5)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Observation, ParamVector};

const SIGMA_FLOOR: f64 = 1e-6;

pub(super) fn psi_summand(y: f64, x: &DVector<f64>, theta: &ParamVector, tau: f64) -> DVector<f64> {
    let r = y - x.dot(theta.as_vector());
    let ind = if r <= 0.0 { 1.0 } else { 0.0 };
    x * (ind - tau)
}

fn unpack(shard: &[Observation]) -> Result<Vec<(f64, &DVector<f64>)>> {
    shard
        .iter()
        .map(|o| match o {
            Observation::Quantile { y, x } => Ok((*y, x)),
            _ => Err(Error::Invalid("quantile model requires Quantile observations".into())),
        })
        .collect()
}

pub(super) fn psi_summands(
    shard: &[Observation],
    theta: &ParamVector,
    tau: f64,
) -> Result<Vec<DVector<f64>>> {
    Ok(unpack(shard)?
        .into_iter()
        .map(|(y, x)| psi_summand(y, x, theta, tau))
        .collect())
}

/// Residuals `y_i - x_i'theta` for a shard.
pub fn residuals(shard: &[Observation], theta: &ParamVector) -> Result<Vec<f64>> {
    Ok(unpack(shard)?
        .into_iter()
        .map(|(y, x)| y - x.dot(theta.as_vector()))
        .collect())
}

/// Normal-reference kernel bandwidth on the residual scale.
pub fn bandwidth(resid: &[f64]) -> f64 {
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt().max(SIGMA_FLOOR);
    1.06 * sd * n.powf(-0.2)
}

fn gauss_kernel(u: f64) -> f64 {
    (-(u * u) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Powell estimate `S = (n h)^(-1) sum K(r_i / h) x_i x_i'`.
pub(super) fn sensitivity_powell(shard: &[Observation], theta: &ParamVector) -> Result<DMatrix<f64>> {
    let rows = unpack(shard)?;
    let n = rows.len();
    let p = theta.len();
    let resid: Vec<f64> = rows.iter().map(|(y, x)| y - x.dot(theta.as_vector())).collect();
    let h = bandwidth(&resid);
    let mut acc = DMatrix::zeros(p, p);
    for ((_, x), r) in rows.iter().zip(resid.iter()) {
        let w = gauss_kernel(r / h);
        if w > 0.0 {
            linalg::add_scaled_outer(&mut acc, w, x);
        }
    }
    Ok(acc / (n as f64 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{psi_mean, ModelAux, ModelSpec};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn intercept_shard(ys: &[f64]) -> Vec<Observation> {
        ys.iter()
            .map(|&y| Observation::Quantile { y, x: DVector::from_row_slice(&[1.0]) })
            .collect()
    }

    #[test]
    fn powell_estimate_recovers_normal_density_at_zero() {
        // standard-normal residuals around an intercept-only fit: the
        // sensitivity converges to the density at zero, 1/sqrt(2 pi)
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let ys: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let shard = intercept_shard(&ys);
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let s = sensitivity_powell(&shard, &theta).unwrap();
        let f0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let rel = (s[(0, 0)] - f0).abs() / f0;
        assert!(rel < 0.10, "kernel estimate {} vs {}", s[(0, 0)], f0);
    }

    #[test]
    fn psi_mean_small_at_sample_quantile() {
        // intercept-only, odd shard, theta at the sample median
        let shard = intercept_shard(&[3.0, 1.0, 2.0, 5.0, 4.0]);
        let model = ModelSpec::Quantile { tau: 0.5 };
        let theta = ParamVector::from_slice(&[3.0]).unwrap();
        let m = psi_mean(&model, &shard, &theta, &ModelAux::None).unwrap();
        assert!(m[0].abs() <= 1.0 / shard.len() as f64);
    }

    #[test]
    fn bandwidth_floor_on_constant_residuals() {
        let h = bandwidth(&[1.0, 1.0, 1.0, 1.0]);
        assert!(h > 0.0);
    }
}
