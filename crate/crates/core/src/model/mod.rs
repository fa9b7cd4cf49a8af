//! Estimating-function families: per-observation summands `psi`, the
//! empirical sensitivity matrix `S_n(theta)` and variability matrix
//! `V_n(theta)`, plus the moment estimator for GEE working correlation.
//!
//! Three families are implemented: quantile regression, GEE for clustered
//! responses (identity or logit link), and the Cox partial score. The shard
//! mean of the summands is the shard estimating function; its root is the
//! per-shard estimate produced by [`crate::solver::solve_shard`].

pub mod cox;
pub mod gee;
pub mod quantile;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub use cox::CoxRiskSet;

/// Regression coefficient vector; entries must be finite and `p >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("parameter vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("parameter vector must be finite".into()));
        }
        Ok(ParamVector(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_row_slice(values))
    }

    pub fn zeros(p: usize) -> Self {
        ParamVector(DVector::zeros(p.max(1)))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

impl std::ops::Deref for ParamVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Working correlation structure for GEE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum WorkingCorrelation {
    Independence,
    Ar1 { rho: f64 },
    Cs { rho: f64 },
}

impl WorkingCorrelation {
    pub fn validate(&self) -> Result<()> {
        match self {
            WorkingCorrelation::Independence => Ok(()),
            WorkingCorrelation::Ar1 { rho } | WorkingCorrelation::Cs { rho } => {
                if rho.abs() < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!("|rho| must be < 1, got {rho}")))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WorkingCorrelation::Independence => "independence",
            WorkingCorrelation::Ar1 { .. } => "ar1",
            WorkingCorrelation::Cs { .. } => "cs",
        }
    }

    pub fn with_rho(&self, rho: f64) -> WorkingCorrelation {
        match self {
            WorkingCorrelation::Independence => WorkingCorrelation::Independence,
            WorkingCorrelation::Ar1 { .. } => WorkingCorrelation::Ar1 { rho },
            WorkingCorrelation::Cs { .. } => WorkingCorrelation::Cs { rho },
        }
    }
}

/// GEE mean link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    Identity,
    Logit,
}

impl LinkFunction {
    pub fn name(&self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Logit => "logit",
        }
    }
}

/// Which estimating-function family a fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Quantile { tau: f64 },
    Gee { link: LinkFunction, corr: WorkingCorrelation },
    Cox,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Quantile { tau } => {
                if *tau > 0.0 && *tau < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!("tau must be in (0,1), got {tau}")))
                }
            }
            ModelSpec::Gee { corr, .. } => corr.validate(),
            ModelSpec::Cox => Ok(()),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelSpec::Quantile { .. } => "quantile",
            ModelSpec::Gee { .. } => "gee",
            ModelSpec::Cox => "cox",
        }
    }
}

/// One sampling unit: a regression row, a GEE cluster, or a survival record.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Quantile { y: f64, x: DVector<f64> },
    GeeCluster { ys: DVector<f64>, xs: DMatrix<f64>, cluster_id: u64 },
    Surv { time: f64, status: bool, x: DVector<f64> },
}

impl Observation {
    /// Number of regression coefficients this unit's design implies.
    pub fn width(&self) -> usize {
        match self {
            Observation::Quantile { x, .. } => x.len(),
            Observation::GeeCluster { xs, .. } => xs.ncols(),
            Observation::Surv { x, .. } => x.len(),
        }
    }

    /// Number of scalar responses in this unit (cluster size, else 1).
    pub fn n_responses(&self) -> usize {
        match self {
            Observation::GeeCluster { ys, .. } => ys.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            Observation::Quantile { y, x } => y.is_finite() && x.iter().all(|v| v.is_finite()),
            Observation::GeeCluster { ys, xs, .. } => {
                ys.len() == xs.nrows()
                    && ys.len() >= 1
                    && ys.iter().all(|v| v.is_finite())
                    && xs.iter().all(|v| v.is_finite())
            }
            Observation::Surv { time, x, .. } => {
                *time >= 0.0 && time.is_finite() && x.iter().all(|v| v.is_finite())
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Data("observation has non-finite or inconsistent fields".into()))
        }
    }
}

/// Empirical sensitivity matrix `S_n(theta)`, evaluated at `theta_at`.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    pub matrix: DMatrix<f64>,
    pub theta_at: ParamVector,
}

impl SensitivityMatrix {
    pub fn new(matrix: DMatrix<f64>, theta_at: ParamVector) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("sensitivity matrix has non-finite entries".into()));
        }
        Ok(SensitivityMatrix { matrix, theta_at })
    }
}

/// Empirical variability matrix `V_n(theta)`: the mean outer product of the
/// psi summands. Symmetric PSD up to rounding.
#[derive(Debug, Clone)]
pub struct VariabilityMatrix {
    pub matrix: DMatrix<f64>,
    pub theta_at: ParamVector,
}

impl VariabilityMatrix {
    pub fn new(matrix: DMatrix<f64>, theta_at: ParamVector) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("variability matrix has non-finite entries".into()));
        }
        let matrix = linalg::symmetrize(&matrix);
        let floor = -1e-10 * matrix.trace().abs().max(f64::MIN_POSITIVE);
        if linalg::min_eigenvalue(&matrix) < floor {
            return Err(Error::DegenerateData("variability matrix is not positive semidefinite".into()));
        }
        Ok(VariabilityMatrix { matrix, theta_at })
    }
}

/// Auxiliary state `psi` needs beyond `(obs, theta)`: the GEE nuisance
/// estimates, or the Cox risk-set sums over the whole shard.
#[derive(Debug, Clone)]
pub enum ModelAux {
    None,
    Gee { rho: f64, sigma2: f64 },
    Cox(CoxRiskSet),
}

impl ModelAux {
    pub fn gee_params(&self) -> Result<(f64, f64)> {
        match self {
            ModelAux::Gee { rho, sigma2 } => Ok((*rho, *sigma2)),
            _ => Err(Error::Invalid("GEE psi requires ModelAux::Gee { rho, sigma2 }".into())),
        }
    }

    fn cox_risk_set(&self) -> Result<&CoxRiskSet> {
        match self {
            ModelAux::Cox(rs) => Ok(rs),
            _ => Err(Error::Invalid("Cox psi requires a risk-set aux built from the shard".into())),
        }
    }
}

/// Sign relating the sensitivity matrix to the Jacobian of the shard-mean
/// estimating function: `d psi_bar / d theta = -orientation * S`.
///
/// GEE and Cox estimating functions are score-like (+1). The quantile
/// estimating function `x (I(y - x'theta <= 0) - tau)` increases in `theta`
/// while its sensitivity (the Powell density estimate) is positive, so its
/// orientation is -1. Newton updates must use this sign for the step to move
/// toward the root.
pub fn score_orientation(model: &ModelSpec) -> f64 {
    match model {
        ModelSpec::Quantile { .. } => -1.0,
        ModelSpec::Gee { .. } | ModelSpec::Cox => 1.0,
    }
}

fn check_dims(model: &ModelSpec, obs: &Observation, theta: &ParamVector) -> Result<()> {
    let ok = match (model, obs) {
        (ModelSpec::Quantile { .. }, Observation::Quantile { .. }) => true,
        (ModelSpec::Gee { .. }, Observation::GeeCluster { .. }) => true,
        (ModelSpec::Cox, Observation::Surv { .. }) => true,
        _ => false,
    };
    if !ok {
        return Err(Error::Invalid(format!(
            "observation kind does not match model family {}",
            model.family_name()
        )));
    }
    if obs.width() != theta.len() {
        return Err(Error::Dimension(format!(
            "design width {} != parameter length {}",
            obs.width(),
            theta.len()
        )));
    }
    Ok(())
}

/// The i-th summand of the shard estimating function, so that the shard mean
/// over units equals the shard estimating function.
pub fn psi(
    model: &ModelSpec,
    obs: &Observation,
    theta: &ParamVector,
    aux: &ModelAux,
) -> Result<DVector<f64>> {
    check_dims(model, obs, theta)?;
    match (model, obs) {
        (ModelSpec::Quantile { tau }, Observation::Quantile { y, x }) => {
            Ok(quantile::psi_summand(*y, x, theta, *tau))
        }
        (ModelSpec::Gee { link, corr }, Observation::GeeCluster { ys, xs, .. }) => {
            let (rho, sigma2) = aux.gee_params()?;
            gee::psi_summand(ys, xs, theta, *link, corr.with_rho(rho), sigma2)
        }
        (ModelSpec::Cox, Observation::Surv { status, x, .. }) => {
            let rs = aux.cox_risk_set()?;
            rs.psi_for(obs, *status, x)
        }
        _ => unreachable!(),
    }
}

fn shard_width(shard: &[Observation]) -> Result<usize> {
    let first = shard.first().ok_or_else(|| Error::Data("shard is empty".into()))?;
    let p = first.width();
    if shard.iter().any(|o| o.width() != p) {
        return Err(Error::Dimension("mixed design widths within a shard".into()));
    }
    Ok(p)
}

/// All psi summands for a shard in unit order.
pub fn psi_summands(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    aux: &ModelAux,
) -> Result<Vec<DVector<f64>>> {
    let p = shard_width(shard)?;
    if p != theta.len() {
        return Err(Error::Dimension(format!(
            "design width {p} != parameter length {}",
            theta.len()
        )));
    }
    match model {
        ModelSpec::Quantile { tau } => Ok(quantile::psi_summands(shard, theta, *tau)?),
        ModelSpec::Gee { link, corr } => {
            let (rho, sigma2) = aux.gee_params()?;
            gee::psi_summands(shard, theta, *link, corr.with_rho(rho), sigma2)
        }
        ModelSpec::Cox => {
            let rs = aux.cox_risk_set()?;
            cox::psi_summands(shard, rs)
        }
    }
}

/// Shard mean of the psi summands.
pub fn psi_mean(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    aux: &ModelAux,
) -> Result<DVector<f64>> {
    let summands = psi_summands(model, shard, theta, aux)?;
    let p = theta.len();
    let mut acc = DVector::zeros(p);
    for s in &summands {
        acc += s;
    }
    Ok(acc / summands.len() as f64)
}

/// Empirical sensitivity matrix `S_{n_k}(theta)` for a shard.
pub fn sensitivity(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    aux: &ModelAux,
) -> Result<SensitivityMatrix> {
    let p = shard_width(shard)?;
    if p != theta.len() {
        return Err(Error::Dimension("design width != parameter length".into()));
    }
    let matrix = match model {
        ModelSpec::Quantile { .. } => quantile::sensitivity_powell(shard, theta)?,
        ModelSpec::Gee { link, corr } => {
            let (rho, sigma2) = aux.gee_params()?;
            gee::sensitivity(shard, theta, *link, corr.with_rho(rho), sigma2)?
        }
        ModelSpec::Cox => cox::sensitivity(shard, theta)?,
    };
    SensitivityMatrix::new(linalg::symmetrize(&matrix), theta.clone())
}

/// Empirical variability matrix `V_{n_k}(theta)`: mean outer product of the
/// per-unit psi summands.
pub fn variability(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    aux: &ModelAux,
) -> Result<VariabilityMatrix> {
    let summands = psi_summands(model, shard, theta, aux)?;
    let p = theta.len();
    let mut acc = DMatrix::zeros(p, p);
    for s in &summands {
        linalg::add_scaled_outer(&mut acc, 1.0, s);
    }
    acc /= summands.len() as f64;
    VariabilityMatrix::new(acc, theta.clone())
}

/// Builds the per-shard auxiliary state for psi evaluation at `theta`.
///
/// GEE requires the nuisance pair `(rho, sigma2)`; Cox builds the risk-set
/// sums from the whole shard at `theta`; quantile needs nothing.
pub fn prepare_aux(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    gee_params: Option<(f64, f64)>,
) -> Result<ModelAux> {
    match model {
        ModelSpec::Quantile { .. } => Ok(ModelAux::None),
        ModelSpec::Gee { .. } => {
            let (rho, sigma2) = gee_params
                .ok_or_else(|| Error::Invalid("GEE aux requires (rho, sigma2)".into()))?;
            Ok(ModelAux::Gee { rho, sigma2 })
        }
        ModelSpec::Cox => Ok(ModelAux::Cox(CoxRiskSet::build(shard, theta)?)),
    }
}

/// Method-of-moments estimate of the working correlation parameter and the
/// dispersion from per-cluster Pearson residuals.
///
/// `sigma2 = sum r^2 / (N - p)` with `N` the total number of observations.
/// The correlation estimate is clamped to `[-0.99, 0.99]`.
pub fn estimate_correlation(
    pearson_residuals: &[DVector<f64>],
    structure: WorkingCorrelation,
    p: usize,
) -> Result<(f64, f64)> {
    let n_total: usize = pearson_residuals.iter().map(|r| r.len()).sum();
    if n_total <= p {
        return Err(Error::DegenerateData(format!(
            "need more than p = {p} residuals to estimate dispersion, got {n_total}"
        )));
    }
    let ss: f64 = pearson_residuals.iter().map(|r| r.norm_squared()).sum();
    let sigma2 = ss / (n_total - p) as f64;
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::DegenerateData("non-positive dispersion estimate".into()));
    }

    let rho = match structure {
        WorkingCorrelation::Independence => 0.0,
        WorkingCorrelation::Ar1 { .. } => {
            let usable = pearson_residuals.iter().filter(|r| r.len() >= 2).count();
            if usable < 2 {
                return Err(Error::DegenerateData(
                    "AR-1 moment estimate needs at least 2 clusters with 2+ observations".into(),
                ));
            }
            let num: f64 = pearson_residuals
                .iter()
                .map(|r| (0..r.len().saturating_sub(1)).map(|j| r[j] * r[j + 1]).sum::<f64>())
                .sum();
            let pairs: usize = pearson_residuals.iter().map(|r| r.len() - 1).sum();
            if pairs <= p {
                return Err(Error::DegenerateData("insufficient within-cluster pairs for AR-1".into()));
            }
            num / ((pairs - p) as f64 * sigma2)
        }
        WorkingCorrelation::Cs { .. } => {
            let usable = pearson_residuals.iter().filter(|r| r.len() >= 2).count();
            if usable < 2 {
                return Err(Error::DegenerateData(
                    "CS moment estimate needs at least 2 clusters with 2+ observations".into(),
                ));
            }
            let num: f64 = pearson_residuals
                .iter()
                .map(|r| {
                    let mut s = 0.0;
                    for j in 0..r.len() {
                        for jp in (j + 1)..r.len() {
                            s += r[j] * r[jp];
                        }
                    }
                    s
                })
                .sum();
            let pairs: usize = pearson_residuals.iter().map(|r| r.len() * (r.len() - 1) / 2).sum();
            if pairs <= p {
                return Err(Error::DegenerateData("insufficient within-cluster pairs for CS".into()));
            }
            num / ((pairs - p) as f64 * sigma2)
        }
    };
    Ok((rho.clamp(-0.99, 0.99), sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn qobs(y: f64, x: &[f64]) -> Observation {
        Observation::Quantile { y, x: DVector::from_row_slice(x) }
    }

    #[test]
    fn quantile_psi_indicator_convention() {
        // residual 1 > 0: indicator 0
        let model = ModelSpec::Quantile { tau: 0.5 };
        let theta = ParamVector::from_slice(&[2.0]).unwrap();
        let psi1 = psi(&model, &qobs(3.0, &[1.0]), &theta, &ModelAux::None).unwrap();
        assert_abs_diff_eq!(psi1[0], -0.5, epsilon = 1e-15);
        // boundary y - x'theta = 0 counts as <= 0
        let psi2 = psi(&model, &qobs(2.0, &[1.0]), &theta, &ModelAux::None).unwrap();
        assert_abs_diff_eq!(psi2[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gee_psi_identity_independence() {
        let model = ModelSpec::Gee {
            link: LinkFunction::Identity,
            corr: WorkingCorrelation::Independence,
        };
        let obs = Observation::GeeCluster {
            ys: DVector::from_row_slice(&[1.0, 1.0]),
            xs: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            cluster_id: 0,
        };
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let aux = ModelAux::Gee { rho: 0.0, sigma2: 1.0 };
        let v = psi(&model, &obs, &theta, &aux).unwrap();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cox_psi_two_subject_shard() {
        let model = ModelSpec::Cox;
        let shard = vec![
            Observation::Surv { time: 1.0, status: true, x: DVector::from_row_slice(&[1.0]) },
            Observation::Surv { time: 2.0, status: false, x: DVector::from_row_slice(&[3.0]) },
        ];
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let aux = prepare_aux(&model, &shard, &theta, None).unwrap();
        let s1 = psi(&model, &shard[0], &theta, &aux).unwrap();
        let s2 = psi(&model, &shard[1], &theta, &aux).unwrap();
        assert_abs_diff_eq!(s1[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s2[0], 0.0, epsilon = 1e-15);
        let mean = psi_mean(&model, &shard, &theta, &aux).unwrap();
        assert_abs_diff_eq!(mean[0], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn gee_sensitivity_single_row() {
        let model = ModelSpec::Gee {
            link: LinkFunction::Identity,
            corr: WorkingCorrelation::Independence,
        };
        let shard = vec![Observation::GeeCluster {
            ys: DVector::from_row_slice(&[0.0]),
            xs: DMatrix::from_row_slice(1, 1, &[2.0]),
            cluster_id: 0,
        }];
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let aux = ModelAux::Gee { rho: 0.0, sigma2: 1.0 };
        let s = sensitivity(&model, &shard, &theta, &aux).unwrap();
        assert_abs_diff_eq!(s.matrix[(0, 0)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cox_sensitivity_two_subject_shard() {
        let shard = vec![
            Observation::Surv { time: 1.0, status: true, x: DVector::from_row_slice(&[1.0]) },
            Observation::Surv { time: 2.0, status: false, x: DVector::from_row_slice(&[3.0]) },
        ];
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let s = sensitivity(&ModelSpec::Cox, &shard, &theta, &ModelAux::None).unwrap();
        // at theta=0 both subjects are at risk; weighted variance of {1,3} is 1
        assert_abs_diff_eq!(s.matrix[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn variability_zero_summands() {
        // GEE residuals all zero means every summand vanishes
        let model = ModelSpec::Gee {
            link: LinkFunction::Identity,
            corr: WorkingCorrelation::Independence,
        };
        let shard = vec![Observation::GeeCluster {
            ys: DVector::from_row_slice(&[3.0]),
            xs: DMatrix::from_row_slice(1, 1, &[1.0]),
            cluster_id: 0,
        }];
        let theta = ParamVector::from_slice(&[3.0]).unwrap();
        let aux = ModelAux::Gee { rho: 0.0, sigma2: 1.0 };
        let v = variability(&model, &shard, &theta, &aux).unwrap();
        assert_abs_diff_eq!(v.matrix[(0, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn variability_quantile_at_median() {
        let model = ModelSpec::Quantile { tau: 0.5 };
        let shard = vec![qobs(1.0, &[1.0]), qobs(2.0, &[1.0]), qobs(3.0, &[1.0])];
        let theta = ParamVector::from_slice(&[2.0]).unwrap();
        let v = variability(&model, &shard, &theta, &ModelAux::None).unwrap();
        assert_abs_diff_eq!(v.matrix[(0, 0)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn gee_variability_single_residual() {
        let model = ModelSpec::Gee {
            link: LinkFunction::Identity,
            corr: WorkingCorrelation::Independence,
        };
        let r = 1.7;
        let shard = vec![Observation::GeeCluster {
            ys: DVector::from_row_slice(&[r]),
            xs: DMatrix::from_row_slice(1, 1, &[1.0]),
            cluster_id: 0,
        }];
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let aux = ModelAux::Gee { rho: 0.0, sigma2: 1.0 };
        let v = variability(&model, &shard, &theta, &aux).unwrap();
        assert_abs_diff_eq!(v.matrix[(0, 0)], r * r, epsilon = 1e-12);
    }

    #[test]
    fn correlation_cs_clamps_at_high_rho() {
        let resid = vec![
            DVector::from_row_slice(&[1.0, 1.0]),
            DVector::from_row_slice(&[1.0, 1.0]),
        ];
        let (rho, sigma2) =
            estimate_correlation(&resid, WorkingCorrelation::Cs { rho: 0.0 }, 0).unwrap();
        assert_abs_diff_eq!(sigma2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rho, 0.99, epsilon = 1e-12);
    }

    #[test]
    fn correlation_ar1_alternating_is_negative() {
        let resid = vec![
            DVector::from_row_slice(&[1.0, -1.0, 1.0, -1.0]),
            DVector::from_row_slice(&[1.0, -1.0, 1.0, -1.0]),
        ];
        let (rho, _) =
            estimate_correlation(&resid, WorkingCorrelation::Ar1 { rho: 0.0 }, 0).unwrap();
        assert!(rho < 0.0, "alternating residuals must give negative rho, got {rho}");
    }

    #[test]
    fn correlation_independence_returns_zero() {
        let resid = vec![DVector::from_row_slice(&[0.5, -0.5])];
        let (rho, _) = estimate_correlation(&resid, WorkingCorrelation::Independence, 0).unwrap();
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn correlation_insufficient_pairs_errors() {
        let resid = vec![DVector::from_row_slice(&[1.0]), DVector::from_row_slice(&[1.0])];
        let err = estimate_correlation(&resid, WorkingCorrelation::Ar1 { rho: 0.0 }, 0);
        assert!(err.is_err());
    }

    #[test]
    fn psi_dimension_mismatch_rejected() {
        let model = ModelSpec::Quantile { tau: 0.5 };
        let theta = ParamVector::from_slice(&[1.0, 2.0]).unwrap();
        let out = psi(&model, &qobs(1.0, &[1.0]), &theta, &ModelAux::None);
        assert!(matches!(out, Err(Error::Dimension(_))));
    }

    #[test]
    fn gee_psi_translation_equivariance() {
        // shifting y by x*delta and theta by delta leaves psi unchanged
        let model = ModelSpec::Gee {
            link: LinkFunction::Identity,
            corr: WorkingCorrelation::Ar1 { rho: 0.3 },
        };
        let xs = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, -0.7, 1.0, 1.4]);
        let ys = DVector::from_row_slice(&[0.3, 1.1, -0.4]);
        let delta = DVector::from_row_slice(&[0.5, -1.25]);
        let shifted = &ys + &xs * &delta;
        let theta = ParamVector::from_slice(&[0.1, 0.9]).unwrap();
        let theta_shift = ParamVector::new(theta.as_vector() + &delta).unwrap();
        let aux = ModelAux::Gee { rho: 0.3, sigma2: 1.7 };
        let a = psi(
            &model,
            &Observation::GeeCluster { ys, xs: xs.clone(), cluster_id: 0 },
            &theta,
            &aux,
        )
        .unwrap();
        let b = psi(
            &model,
            &Observation::GeeCluster { ys: shifted, xs, cluster_id: 0 },
            &theta_shift,
            &aux,
        )
        .unwrap();
        assert!((a - b).amax() < 1e-12);
    }
}
