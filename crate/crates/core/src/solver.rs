//! Per-shard solver: finds the root of the shard-mean estimating function
//! and packages the map-step summary.
//!
//! GEE and Cox use damped Newton with step halving and a relative diagonal
//! ridge. The quantile equation is non-smooth, so the indicator is replaced
//! by a logistic sigmoid whose width shrinks over a continuation schedule;
//! the final iterate is checked against the attainable discreteness bound of
//! the unsmoothed equation, `p * max_i |x_i|_inf / n_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    self, gee, quantile, LinkFunction, ModelAux, ModelSpec, Observation, ParamVector,
    SensitivityMatrix, VariabilityMatrix,
};

/// Solver knobs; `ridge` and `quantile_smoothing_eps` are relative scales.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Infinity-norm tolerance on the shard-mean estimating function.
    pub tol: f64,
    /// Diagonal jitter added as `ridge * trace(S)/p` before Newton solves.
    pub ridge: f64,
    pub step_halving_max: usize,
    /// Sigmoid width for the smoothed quantile equation, as a fraction of
    /// the residual scale.
    pub quantile_smoothing_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 100,
            tol: 1e-8,
            ridge: 1e-8,
            step_halving_max: 30,
            quantile_smoothing_eps: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::Invalid("max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Invalid("tol must be positive".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::Invalid("ridge must be non-negative".into()));
        }
        Ok(())
    }
}

/// The map-step output: everything the reduce step needs from one shard.
#[derive(Debug, Clone)]
pub struct ShardSummary {
    pub shard_id: usize,
    pub n_k: usize,
    pub theta_hat: ParamVector,
    pub s_hat: SensitivityMatrix,
    pub v_hat: VariabilityMatrix,
    pub rho_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_psi_norm: f64,
}

impl ShardSummary {
    pub fn p(&self) -> usize {
        self.theta_hat.len()
    }

    /// The nuisance pair evaluate_at must reuse (never re-estimated).
    pub fn aux_params(&self) -> (Option<f64>, Option<f64>) {
        (self.rho_hat, self.sigma2_hat)
    }
}

/// Ratio below which the smallest eigenvalue of the sensitivity at the
/// solution, relative to its value at the start, indicates a runaway fit
/// (monotone partial likelihood, logistic separation).
const DEGENERACY_EIGEN_RATIO: f64 = 1e-6;

fn ridged(s: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let p = s.nrows();
    let mut out = s.clone();
    let jitter = ridge * s.trace().abs().max(f64::MIN_POSITIVE) / p as f64;
    for i in 0..p {
        out[(i, i)] += jitter;
    }
    out
}

fn design_rows_gram(shard: &[Observation]) -> DMatrix<f64> {
    let p = shard[0].width();
    let mut gram = DMatrix::zeros(p, p);
    let mut row = DVector::zeros(p);
    for obs in shard {
        match obs {
            Observation::Quantile { x, .. } | Observation::Surv { x, .. } => {
                linalg::add_scaled_outer(&mut gram, 1.0, x);
            }
            Observation::GeeCluster { xs, .. } => {
                for r in 0..xs.nrows() {
                    for c in 0..p {
                        row[c] = xs[(r, c)];
                    }
                    linalg::add_scaled_outer(&mut gram, 1.0, &row);
                }
            }
        }
    }
    gram
}

fn check_shard(shard: &[Observation]) -> Result<usize> {
    let first = shard.first().ok_or_else(|| Error::Data("cannot solve an empty shard".into()))?;
    let p = first.width();
    for obs in shard {
        obs.validate()?;
        if obs.width() != p {
            return Err(Error::Dimension("mixed design widths within a shard".into()));
        }
    }
    let bad = linalg::deficient_columns(&design_rows_gram(shard));
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    Ok(p)
}

fn ols_init(shard: &[Observation]) -> Result<ParamVector> {
    let p = shard[0].width();
    let mut gram = design_rows_gram(shard);
    let mut xty = DVector::zeros(p);
    let mut row = DVector::zeros(p);
    for obs in shard {
        match obs {
            Observation::Quantile { y, x } => xty.axpy(*y, x, 1.0),
            Observation::Surv { .. } => {}
            Observation::GeeCluster { ys, xs, .. } => {
                for r in 0..xs.nrows() {
                    for c in 0..p {
                        row[c] = xs[(r, c)];
                    }
                    xty.axpy(ys[r], &row, 1.0);
                }
            }
        }
    }
    // tiny jitter keeps near-collinear designs solvable after the rank check
    gram = ridged(&gram, 1e-12);
    let theta = linalg::sym_solve(&gram, &xty, "OLS initialization")?;
    ParamVector::new(theta)
}

struct NewtonOutcome {
    theta: ParamVector,
    iterations: usize,
    psi_norm: f64,
    reached_tol: bool,
}

/// Damped Newton on `psi_bar(theta) = 0` where `d psi_bar/d theta ~= -S`
/// (score orientation). Steps that fail to reduce the norm are halved.
fn newton_root<FP, FS>(
    theta0: ParamVector,
    mut psi_fn: FP,
    mut sens_fn: FS,
    cfg: &SolverConfig,
    budget: usize,
) -> Result<NewtonOutcome>
where
    FP: FnMut(&ParamVector) -> Result<DVector<f64>>,
    FS: FnMut(&ParamVector) -> Result<DMatrix<f64>>,
{
    let mut theta = theta0;
    let mut psi = psi_fn(&theta)?;
    let mut norm = psi.amax();
    let mut iterations = 0;
    while norm > cfg.tol && iterations < budget {
        let s = sens_fn(&theta)?;
        let step = linalg::sym_solve(&ridged(&s, cfg.ridge), &psi, "Newton step")?;
        let mut scale = 1.0;
        let mut accepted = false;
        for halving in 0..=cfg.step_halving_max {
            let cand = ParamVector::new(theta.as_vector() + scale * &step)?;
            let cand_psi = psi_fn(&cand)?;
            let cand_norm = cand_psi.amax();
            if cand_norm < norm || halving == cfg.step_halving_max {
                if cand_norm < norm {
                    theta = cand;
                    psi = cand_psi;
                    norm = cand_norm;
                    accepted = true;
                }
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(NewtonOutcome { theta, iterations, psi_norm: norm, reached_tol: norm <= cfg.tol })
}

fn solve_gee(
    link: LinkFunction,
    corr: model::WorkingCorrelation,
    shard: &[Observation],
    cfg: &SolverConfig,
    shard_id: usize,
) -> Result<ShardSummary> {
    let p = shard[0].width();
    let n_k = shard.len();
    let theta0 = ols_init(shard)?;
    let model_spec = ModelSpec::Gee { link, corr };

    let mut theta = theta0.clone();
    let mut rho = match corr {
        model::WorkingCorrelation::Independence => 0.0,
        model::WorkingCorrelation::Ar1 { rho } | model::WorkingCorrelation::Cs { rho } => rho,
    };
    let mut sigma2 = 1.0;
    let mut iterations = 0;
    let mut norm = f64::INFINITY;
    let mut converged = false;

    while iterations < cfg.max_iter {
        let resid = gee::pearson_residuals(shard, &theta, link)?;
        let (rho_new, sigma2_new) = model::estimate_correlation(&resid, corr, p)?;
        rho = rho_new;
        sigma2 = sigma2_new;
        let aux = ModelAux::Gee { rho, sigma2 };

        let psi = model::psi_mean(&model_spec, shard, &theta, &aux)?;
        norm = psi.amax();
        if norm <= cfg.tol {
            converged = true;
            break;
        }
        let out = newton_root(
            theta.clone(),
            |t| model::psi_mean(&model_spec, shard, t, &aux),
            |t| Ok(model::sensitivity(&model_spec, shard, t, &aux)?.matrix),
            cfg,
            cfg.max_iter - iterations,
        )?;
        theta = out.theta;
        norm = out.psi_norm;
        iterations += out.iterations.max(1);
    }

    let aux = ModelAux::Gee { rho, sigma2 };
    let s_hat = model::sensitivity(&model_spec, shard, &theta, &aux)?;
    let v_hat = model::variability(&model_spec, shard, &theta, &aux)?;

    if converged && link == LinkFunction::Logit {
        let s0 = model::sensitivity(&model_spec, shard, &theta0, &aux)?;
        if linalg::min_eigenvalue(&s_hat.matrix)
            < DEGENERACY_EIGEN_RATIO * linalg::min_eigenvalue(&s0.matrix)
        {
            converged = false;
        }
    }

    Ok(ShardSummary {
        shard_id,
        n_k,
        theta_hat: theta,
        s_hat,
        v_hat,
        rho_hat: Some(rho),
        sigma2_hat: Some(sigma2),
        converged,
        iterations,
        final_psi_norm: if norm.is_finite() { norm } else { f64::MAX },
    })
}

fn solve_cox(shard: &[Observation], cfg: &SolverConfig, shard_id: usize) -> Result<ShardSummary> {
    let p = shard[0].width();
    let n_k = shard.len();
    if model::cox::event_count(shard)? == 0 {
        return Err(Error::NonIdentifiable(
            "Cox shard has zero observed events; the partial score is identically zero".into(),
        ));
    }
    let model_spec = ModelSpec::Cox;
    let theta0 = ParamVector::zeros(p);
    let psi_fn = |t: &ParamVector| {
        let aux = model::prepare_aux(&model_spec, shard, t, None)?;
        model::psi_mean(&model_spec, shard, t, &aux)
    };
    let sens_fn =
        |t: &ParamVector| Ok(model::sensitivity(&model_spec, shard, t, &ModelAux::None)?.matrix);
    let out = newton_root(theta0.clone(), psi_fn, sens_fn, cfg, cfg.max_iter)?;

    let s_hat = model::sensitivity(&model_spec, shard, &out.theta, &ModelAux::None)?;
    let aux = model::prepare_aux(&model_spec, shard, &out.theta, None)?;
    let v_hat = model::variability(&model_spec, shard, &out.theta, &aux)?;

    // a vanishing observed information relative to the start marks a
    // monotone partial likelihood: the score norm crosses tol while the
    // estimate runs away, so the tol check alone would mislabel it
    let s0 = model::sensitivity(&model_spec, shard, &theta0, &ModelAux::None)?;
    let degenerate = linalg::min_eigenvalue(&s_hat.matrix)
        < DEGENERACY_EIGEN_RATIO * linalg::min_eigenvalue(&s0.matrix);

    Ok(ShardSummary {
        shard_id,
        n_k,
        theta_hat: out.theta,
        s_hat,
        v_hat,
        rho_hat: None,
        sigma2_hat: None,
        converged: out.reached_tol && !degenerate,
        iterations: out.iterations,
        final_psi_norm: if out.psi_norm.is_finite() { out.psi_norm } else { f64::MAX },
    })
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    }
}

fn quantile_smoothed_psi(
    shard: &[Observation],
    theta: &ParamVector,
    tau: f64,
    eps: f64,
) -> Result<DVector<f64>> {
    let p = theta.len();
    let mut acc = DVector::zeros(p);
    for obs in shard {
        if let Observation::Quantile { y, x } = obs {
            let r = y - x.dot(theta.as_vector());
            acc.axpy(sigmoid(r / eps) - tau, x, 1.0);
        }
    }
    Ok(acc / shard.len() as f64)
}

fn quantile_smoothed_jacobian(
    shard: &[Observation],
    theta: &ParamVector,
    eps: f64,
) -> Result<DMatrix<f64>> {
    let p = theta.len();
    let mut acc = DMatrix::zeros(p, p);
    for obs in shard {
        if let Observation::Quantile { y, x } = obs {
            let u = (y - x.dot(theta.as_vector())) / eps;
            let s = sigmoid(u);
            let w = s * (1.0 - s) / eps;
            if w > 0.0 {
                linalg::add_scaled_outer(&mut acc, w, x);
            }
        }
    }
    Ok(acc / shard.len() as f64)
}

fn solve_quantile(
    tau: f64,
    shard: &[Observation],
    cfg: &SolverConfig,
    shard_id: usize,
) -> Result<ShardSummary> {
    let p = shard[0].width();
    let n_k = shard.len();
    let model_spec = ModelSpec::Quantile { tau };

    let mut theta = ols_init(shard)?;
    let resid = quantile::residuals(shard, &theta)?;
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let scale = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0))
        .sqrt()
        .max(1e-6);

    let eps_target = cfg.quantile_smoothing_eps * scale;
    let mut schedule: Vec<f64> = Vec::new();
    let mut eps = 0.1 * scale;
    while eps > eps_target {
        schedule.push(eps);
        eps *= 0.1;
    }
    schedule.push(eps_target);

    let mut iterations = 0;
    for &eps in &schedule {
        let out = newton_root(
            theta,
            |t| quantile_smoothed_psi(shard, t, tau, eps),
            |t| quantile_smoothed_jacobian(shard, t, eps),
            cfg,
            cfg.max_iter,
        )?;
        theta = out.theta;
        iterations += out.iterations;
    }

    // the unsmoothed equation cannot be driven to zero; the attainable
    // bound is one observation's worth of design mass per coordinate
    let max_x = shard
        .iter()
        .map(|o| match o {
            Observation::Quantile { x, .. } => x.amax(),
            _ => 0.0,
        })
        .fold(0.0_f64, f64::max);
    let bound = p as f64 * max_x / n_k as f64;
    let psi_unsmoothed = model::psi_mean(&model_spec, shard, &theta, &ModelAux::None)?;
    let norm = psi_unsmoothed.amax();

    let s_hat = model::sensitivity(&model_spec, shard, &theta, &ModelAux::None)?;
    let v_hat = model::variability(&model_spec, shard, &theta, &ModelAux::None)?;
    Ok(ShardSummary {
        shard_id,
        n_k,
        theta_hat: theta,
        s_hat,
        v_hat,
        rho_hat: None,
        sigma2_hat: None,
        converged: norm <= bound,
        iterations,
        final_psi_norm: norm,
    })
}

/// Solves the shard estimating equation and packages the map-step summary.
///
/// Deterministic: identical shard and config give a bit-identical summary.
pub fn solve_shard(
    model: &ModelSpec,
    shard: &[Observation],
    cfg: &SolverConfig,
    shard_id: usize,
) -> Result<ShardSummary> {
    model.validate()?;
    cfg.validate()?;
    check_shard(shard)?;
    match model {
        ModelSpec::Quantile { tau } => solve_quantile(*tau, shard, cfg, shard_id),
        ModelSpec::Gee { link, corr } => solve_gee(*link, *corr, shard, cfg, shard_id),
        ModelSpec::Cox => solve_cox(shard, cfg, shard_id),
    }
}

/// Re-evaluates the shard-mean estimating function and sensitivity at an
/// external `theta`, reusing the shard's own nuisance estimates.
pub fn evaluate_at(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    rho_hat: Option<f64>,
    sigma2_hat: Option<f64>,
) -> Result<(DVector<f64>, SensitivityMatrix)> {
    let gee_params = match model {
        ModelSpec::Gee { .. } => Some((rho_hat.unwrap_or(0.0), sigma2_hat.unwrap_or(1.0))),
        _ => None,
    };
    let aux = model::prepare_aux(model, shard, theta, gee_params)?;
    let psi = model::psi_mean(model, shard, theta, &aux)?;
    let s = model::sensitivity(model, shard, theta, &aux)?;
    Ok((psi, s))
}

/// Variability at an external theta with the shard's own nuisance estimates.
pub fn variability_at(
    model: &ModelSpec,
    shard: &[Observation],
    theta: &ParamVector,
    rho_hat: Option<f64>,
    sigma2_hat: Option<f64>,
) -> Result<VariabilityMatrix> {
    let gee_params = match model {
        ModelSpec::Gee { .. } => Some((rho_hat.unwrap_or(0.0), sigma2_hat.unwrap_or(1.0))),
        _ => None,
    };
    let aux = model::prepare_aux(model, shard, theta, gee_params)?;
    model::variability(model, shard, theta, &aux)
}
