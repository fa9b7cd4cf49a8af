//! Generalized estimating equations for clustered responses.
//!
//! Cluster summand `sigma^-2 X_i' D_i Sigma_i^-1 (y_i - mu_i)` with working
//! covariance `Sigma_i = G_i^(1/2) R(rho) G_i^(1/2)`. The dispersion enters
//! psi only as a scalar; it cancels in the Godambe weights but keeps the
//! variability matrix on the scale the sandwich variance expects.
//!
//! The working-correlation Cholesky depends only on the cluster size, so one
//! factorization per distinct size is reused across a shard sweep.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{LinkFunction, Observation, ParamVector, WorkingCorrelation};

fn mean_and_deriv(link: LinkFunction, eta: f64) -> (f64, f64, f64) {
    match link {
        LinkFunction::Identity => (eta, 1.0, 1.0),
        LinkFunction::Logit => {
            let mu = 1.0 / (1.0 + (-eta).exp());
            let d = mu * (1.0 - mu);
            (mu, d, d)
        }
    }
}

/// Working correlation matrix for a cluster of size `l`.
pub fn correlation_matrix(corr: WorkingCorrelation, l: usize) -> DMatrix<f64> {
    let mut r = DMatrix::identity(l, l);
    match corr {
        WorkingCorrelation::Independence => {}
        WorkingCorrelation::Ar1 { rho } => {
            for i in 0..l {
                for j in 0..l {
                    r[(i, j)] = rho.powi((i as i32 - j as i32).abs());
                }
            }
        }
        WorkingCorrelation::Cs { rho } => {
            for i in 0..l {
                for j in 0..l {
                    if i != j {
                        r[(i, j)] = rho;
                    }
                }
            }
        }
    }
    r
}

struct Sweep {
    link: LinkFunction,
    corr: WorkingCorrelation,
    sigma2: f64,
    chol_by_size: HashMap<usize, Cholesky<f64, Dyn>>,
}

impl Sweep {
    fn new(link: LinkFunction, corr: WorkingCorrelation, sigma2: f64) -> Result<Self> {
        if sigma2 <= 0.0 || !sigma2.is_finite() {
            return Err(Error::Invalid(format!("dispersion must be positive, got {sigma2}")));
        }
        Ok(Sweep { link, corr, sigma2, chol_by_size: HashMap::new() })
    }

    fn chol(&mut self, l: usize) -> Result<&Cholesky<f64, Dyn>> {
        if !self.chol_by_size.contains_key(&l) {
            let r = correlation_matrix(self.corr, l);
            let chol = r.cholesky().ok_or_else(|| {
                Error::DegenerateData(format!(
                    "singular working covariance for cluster size {l} ({})",
                    self.corr.name()
                ))
            })?;
            self.chol_by_size.insert(l, chol);
        }
        Ok(&self.chol_by_size[&l])
    }

    /// `Sigma^-1 b` through the size-cached correlation factorization.
    fn solve_sigma(&mut self, g_sqrt: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        let l = b.len();
        let scaled = DVector::from_fn(l, |i, _| b[i] / g_sqrt[i]);
        let solved = self.chol(l)?.solve(&scaled);
        Ok(DVector::from_fn(l, |i, _| solved[i] / g_sqrt[i]))
    }

    fn cluster_parts(
        &self,
        ys: &DVector<f64>,
        xs: &DMatrix<f64>,
        theta: &ParamVector,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let eta = xs * theta.as_vector();
        let l = eta.len();
        let mut resid = DVector::zeros(l);
        let mut deriv = DVector::zeros(l);
        let mut g_sqrt = DVector::zeros(l);
        for i in 0..l {
            let (mu, d, var) = mean_and_deriv(self.link, eta[i]);
            resid[i] = ys[i] - mu;
            deriv[i] = d;
            g_sqrt[i] = var.sqrt().max(f64::MIN_POSITIVE.sqrt());
        }
        (resid, deriv, g_sqrt)
    }

    fn psi(&mut self, ys: &DVector<f64>, xs: &DMatrix<f64>, theta: &ParamVector) -> Result<DVector<f64>> {
        let (resid, deriv, g_sqrt) = self.cluster_parts(ys, xs, theta);
        let w = self.solve_sigma(&g_sqrt, &resid)?;
        let dw = DVector::from_fn(w.len(), |i, _| deriv[i] * w[i]);
        Ok(xs.transpose() * dw / self.sigma2)
    }

    fn sensitivity_summand(
        &mut self,
        ys: &DVector<f64>,
        xs: &DMatrix<f64>,
        theta: &ParamVector,
    ) -> Result<DMatrix<f64>> {
        let (_, deriv, g_sqrt) = self.cluster_parts(ys, xs, theta);
        let l = xs.nrows();
        let p = xs.ncols();
        // C = G^(-1/2) D X
        let mut c = DMatrix::zeros(l, p);
        for i in 0..l {
            let f = deriv[i] / g_sqrt[i];
            for j in 0..p {
                c[(i, j)] = f * xs[(i, j)];
            }
        }
        let rc = self.chol(l)?.solve(&c);
        Ok(c.transpose() * rc / self.sigma2)
    }
}

fn unpack<'a>(shard: &'a [Observation]) -> Result<Vec<(&'a DVector<f64>, &'a DMatrix<f64>)>> {
    shard
        .iter()
        .map(|o| match o {
            Observation::GeeCluster { ys, xs, .. } => Ok((ys, xs)),
            _ => Err(Error::Invalid("GEE model requires GeeCluster observations".into())),
        })
        .collect()
}

pub(super) fn psi_summand(
    ys: &DVector<f64>,
    xs: &DMatrix<f64>,
    theta: &ParamVector,
    link: LinkFunction,
    corr: WorkingCorrelation,
    sigma2: f64,
) -> Result<DVector<f64>> {
    Sweep::new(link, corr, sigma2)?.psi(ys, xs, theta)
}

pub(super) fn psi_summands(
    shard: &[Observation],
    theta: &ParamVector,
    link: LinkFunction,
    corr: WorkingCorrelation,
    sigma2: f64,
) -> Result<Vec<DVector<f64>>> {
    let clusters = unpack(shard)?;
    let mut sweep = Sweep::new(link, corr, sigma2)?;
    clusters.into_iter().map(|(ys, xs)| sweep.psi(ys, xs, theta)).collect()
}

/// `S = sigma^-2 n^-1 sum X' D Sigma^-1 D X`.
pub(super) fn sensitivity(
    shard: &[Observation],
    theta: &ParamVector,
    link: LinkFunction,
    corr: WorkingCorrelation,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    let clusters = unpack(shard)?;
    let n = clusters.len();
    let p = theta.len();
    let mut sweep = Sweep::new(link, corr, sigma2)?;
    let mut acc = DMatrix::zeros(p, p);
    for (ys, xs) in clusters {
        acc += sweep.sensitivity_summand(ys, xs, theta)?;
    }
    Ok(linalg::symmetrize(&acc) / n as f64)
}

/// Per-cluster Pearson residuals `(y - mu) / sqrt(V(mu))`.
pub fn pearson_residuals(
    shard: &[Observation],
    theta: &ParamVector,
    link: LinkFunction,
) -> Result<Vec<DVector<f64>>> {
    unpack(shard)?
        .into_iter()
        .map(|(ys, xs)| {
            let eta = xs * theta.as_vector();
            Ok(DVector::from_fn(eta.len(), |i, _| {
                let (mu, _, var) = mean_and_deriv(link, eta[i]);
                (ys[i] - mu) / var.sqrt().max(f64::MIN_POSITIVE.sqrt())
            }))
        })
        .collect()
}
