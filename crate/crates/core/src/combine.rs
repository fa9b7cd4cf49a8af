//! The reduce step: closed-form inverse-variance ("Wald") combination of
//! shard summaries, the one-step Newton refinement toward the root of the
//! aggregated weighted estimating equation ("Rao"), the sensitivity-weighted
//! AEE competitor, aggregated Godambe information, and the full-data
//! benchmark fit.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, ModelSpec, Observation, ParamVector};
use crate::solver::{self, ShardSummary, SolverConfig};

/// Aggregated (or per-shard) Godambe information `S' V^-1 S`.
#[derive(Debug, Clone)]
pub struct GodambeInfo {
    pub matrix: DMatrix<f64>,
}

/// Evaluates `(psi_bar_k(theta), S_k(theta))` for every used shard, in the
/// order of the `used` slice handed to the combiner.
pub type ShardEvaluator<'a> =
    dyn FnMut(&ParamVector) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> + 'a;

/// Combined meta estimate with its aggregated-information variance.
#[derive(Debug, Clone)]
pub struct MetaEstimate {
    pub theta_wcd: ParamVector,
    pub theta_rcd: ParamVector,
    pub theta_aee: Option<ParamVector>,
    pub j_agg: GodambeInfo,
    /// `(sum_k n_k J_k)^-1`
    pub covariance: DMatrix<f64>,
    pub ase: Vec<f64>,
    pub k: usize,
    pub n: usize,
    pub shards_used: Vec<usize>,
    pub level: f64,
    /// False when no data pass was available and `theta_rcd` repeats
    /// `theta_wcd`.
    pub rcd_refined: bool,
    /// True when the refinement hit its divergence guard.
    pub rcd_flagged: bool,
}

/// Reduce-step policy knobs.
#[derive(Debug, Clone, Copy)]
pub struct CombineOptions {
    pub include_nonconverged: bool,
    pub extra_steps: usize,
    pub level: f64,
    pub with_aee: bool,
    pub step_halving_max: usize,
}

impl Default for CombineOptions {
    fn default() -> Self {
        CombineOptions {
            include_nonconverged: false,
            extra_steps: 1,
            level: 0.95,
            with_aee: false,
            step_halving_max: 30,
        }
    }
}

/// Selects the summaries entering the combination, sorted by shard id so the
/// reduce fold is bit-identical under any input ordering.
pub fn usable_summaries(
    summaries: &[ShardSummary],
    include_nonconverged: bool,
) -> Result<Vec<&ShardSummary>> {
    let mut used: Vec<&ShardSummary> = summaries
        .iter()
        .filter(|s| include_nonconverged || s.converged)
        .collect();
    if used.is_empty() {
        return Err(Error::Combination("no usable shard summaries (all non-converged)".into()));
    }
    used.sort_by_key(|s| s.shard_id);
    let p = used[0].p();
    if used.iter().any(|s| s.p() != p) {
        return Err(Error::Combination("shard summaries disagree on parameter dimension".into()));
    }
    Ok(used)
}

/// Per-shard Godambe information `J_k = S' V^-1 S` at the map-step estimate.
fn shard_info(s: &ShardSummary) -> Result<DMatrix<f64>> {
    let vis =
        linalg::sym_solve_mat(&s.v_hat.matrix, &s.s_hat.matrix, "inverting shard variability")?;
    Ok(linalg::symmetrize(&(s.s_hat.matrix.transpose() * vis)))
}

/// Closed-form inverse-variance weighted combination:
/// `(sum n_k S'V^-1S)^-1 (sum n_k S'V^-1S theta_k)`.
pub fn combine_wald(used: &[&ShardSummary]) -> Result<ParamVector> {
    let p = used[0].p();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for s in used {
        let w = shard_info(s)? * s.n_k as f64;
        b += &w * s.theta_hat.as_vector();
        a += w;
    }
    let theta = linalg::sym_solve(&a, &b, "aggregating shard weights")
        .map_err(|_| Error::Combination("aggregate weight matrix is singular".into()))?;
    ParamVector::new(theta)
}

/// Linearized aggregated-estimating-equation combination:
/// `(sum n_k S)^-1 (sum n_k S theta_k)`.
pub fn combine_aee(used: &[&ShardSummary]) -> Result<ParamVector> {
    let p = used[0].p();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for s in used {
        let w = &s.s_hat.matrix * s.n_k as f64;
        b += &w * s.theta_hat.as_vector();
        a += w;
    }
    let theta = linalg::sym_solve(&linalg::symmetrize(&a), &b, "aggregating sensitivities")
        .map_err(|_| Error::Combination("aggregate sensitivity matrix is singular".into()))?;
    ParamVector::new(theta)
}

/// Sandwich covariance of the AEE combination, using each shard's own
/// Godambe information for `Var(theta_k)`.
pub fn aee_covariance(used: &[&ShardSummary]) -> Result<DMatrix<f64>> {
    let p = used[0].p();
    let mut m = DMatrix::zeros(p, p);
    let mut core = DMatrix::zeros(p, p);
    for s in used {
        let n_k = s.n_k as f64;
        m += &s.s_hat.matrix * n_k;
        let j_inv = linalg::sym_inv(&shard_info(s)?, "inverting shard information")?;
        core += n_k * &s.s_hat.matrix * j_inv * &s.s_hat.matrix;
    }
    let m_inv = linalg::sym_inv(&linalg::symmetrize(&m), "inverting aggregate sensitivity")?;
    Ok(linalg::symmetrize(&(&m_inv * core * &m_inv)))
}

/// Aggregated Godambe information `J = n^-1 sum n_k J_k` from the map-step
/// summaries alone, and the meta covariance `(n J)^-1`.
pub fn meta_variance(used: &[&ShardSummary]) -> Result<(GodambeInfo, DMatrix<f64>)> {
    let p = used[0].p();
    let n: usize = used.iter().map(|s| s.n_k).sum();
    let mut acc = DMatrix::zeros(p, p);
    for s in used {
        acc += shard_info(s)? * s.n_k as f64;
    }
    let covariance = linalg::sym_inv(&acc, "inverting aggregated information")
        .map_err(|_| Error::Combination("aggregated Godambe information is singular".into()))?;
    Ok((GodambeInfo { matrix: acc / n as f64 }, linalg::symmetrize(&covariance)))
}

pub fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

/// Per-coordinate normal-pivot interval `theta_j +/- z_(1+level)/2 * ase_j`.
pub fn confidence_intervals(theta: &[f64], ase: &[f64], level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level must be in (0,1), got {level}")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(theta.iter().zip(ase).map(|(&t, &se)| (t - z * se, t + z * se)).collect())
}

/// Two-sided normal-pivot p-values.
pub fn normal_p_values(theta: &[f64], ase: &[f64]) -> Vec<f64> {
    let std = Normal::standard();
    theta
        .iter()
        .zip(ase)
        .map(|(&t, &se)| if se > 0.0 { 2.0 * (1.0 - std.cdf((t / se).abs())) } else { 0.0 })
        .collect()
}

pub struct RaoRefinement {
    pub theta: ParamVector,
    pub flagged: bool,
}

fn fold_equation(
    used: &[&ShardSummary],
    evals: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if evals.len() != used.len() {
        return Err(Error::Combination(format!(
            "evaluator returned {} shards, expected {}",
            evals.len(),
            used.len()
        )));
    }
    let p = used[0].p();
    let mut a = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    for (s, (psi, smat)) in used.iter().zip(evals) {
        let n_k = s.n_k as f64;
        let vis = linalg::sym_solve_mat(&s.v_hat.matrix, smat, "inverting shard variability")?;
        let vip = linalg::sym_solve(&s.v_hat.matrix, psi, "inverting shard variability")?;
        a += n_k * smat.transpose() * vis;
        g += n_k * smat.transpose() * vip;
    }
    Ok((linalg::symmetrize(&a), g))
}

/// Newton refinement of the aggregated weighted estimating equation,
/// starting from the Wald combination and holding each shard's variability
/// fixed at its map-step value. One step by default; with more steps a
/// divergence guard halves steps that increase the equation norm.
pub fn refine_rao(
    model: &ModelSpec,
    used: &[&ShardSummary],
    evaluate: &mut ShardEvaluator,
    theta_wcd: &ParamVector,
    extra_steps: usize,
    step_halving_max: usize,
) -> Result<RaoRefinement> {
    if extra_steps < 1 {
        return Err(Error::Invalid("extra_steps must be >= 1".into()));
    }
    let orient = model::score_orientation(model);
    let mut theta = theta_wcd.clone();
    let evals = evaluate(&theta)?;
    let (mut a, mut g) = fold_equation(used, &evals)?;
    let mut gnorm = g.amax();
    let mut flagged = false;

    for step in 0..extra_steps {
        let delta = linalg::sym_solve(&a, &g, "Rao refinement curvature")
            .map_err(|_| Error::Combination("singular aggregated curvature in refinement".into()))?
            * orient;
        if step + 1 == extra_steps {
            // final step taken as-is; no further data pass follows
            theta = ParamVector::new(theta.as_vector() + &delta)?;
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for halving in 0..=step_halving_max {
            let cand = ParamVector::new(theta.as_vector() + scale * &delta)?;
            let cand_evals = evaluate(&cand)?;
            let (ca, cg) = fold_equation(used, &cand_evals)?;
            let cnorm = cg.amax();
            if cnorm < gnorm || halving == step_halving_max {
                if cnorm >= gnorm {
                    flagged = true;
                }
                theta = cand;
                a = ca;
                g = cg;
                gnorm = cnorm;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || gnorm == 0.0 {
            break;
        }
    }
    Ok(RaoRefinement { theta, flagged })
}

/// The quadratic form `sum_k n_k psi_bar_k(theta)' Vhat_k^-1 psi_bar_k(theta)`
/// that the Rao combination minimizes; used as a test oracle.
pub fn gmm_objective(
    theta: &ParamVector,
    used: &[&ShardSummary],
    evaluate: &mut ShardEvaluator,
) -> Result<f64> {
    let evals = evaluate(theta)?;
    if evals.len() != used.len() {
        return Err(Error::Combination("evaluator returned wrong shard count".into()));
    }
    let mut total = 0.0;
    for (s, (psi, _)) in used.iter().zip(&evals) {
        let vip = linalg::sym_solve(&s.v_hat.matrix, psi, "inverting shard variability")?;
        total += s.n_k as f64 * psi.dot(&vip);
    }
    Ok(total.max(0.0))
}

/// Full-data benchmark fit with its sandwich covariance `(S'V^-1S)^-1 / n`.
pub struct FullFit {
    pub summary: ShardSummary,
    pub j_full: GodambeInfo,
    pub covariance: DMatrix<f64>,
    pub ase: Vec<f64>,
}

pub fn solve_full(model: &ModelSpec, data: &[Observation], cfg: &SolverConfig) -> Result<FullFit> {
    let summary = solver::solve_shard(model, data, cfg, 0)?;
    let j = shard_info(&summary)?;
    let covariance =
        linalg::sym_inv(&(j.clone() * summary.n_k as f64), "inverting full information")?;
    let ase = (0..covariance.nrows()).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
    Ok(FullFit { summary, j_full: GodambeInfo { matrix: j }, covariance, ase })
}

/// Runs the whole reduce step over a set of summaries. When `evaluator` is
/// present the Rao refinement performs its data pass; otherwise the Rao
/// estimate falls back to the Wald combination and is marked unrefined.
pub fn combine_meta(
    model: &ModelSpec,
    summaries: &[ShardSummary],
    mut evaluator: Option<&mut ShardEvaluator>,
    opts: &CombineOptions,
) -> Result<MetaEstimate> {
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Invalid("confidence level must be in (0,1)".into()));
    }
    let used = usable_summaries(summaries, opts.include_nonconverged)?;
    let theta_wcd = combine_wald(&used)?;
    let (theta_rcd, rcd_refined, rcd_flagged) = match evaluator.as_deref_mut() {
        Some(eval) => {
            let r =
                refine_rao(model, &used, eval, &theta_wcd, opts.extra_steps, opts.step_halving_max)?;
            (r.theta, true, r.flagged)
        }
        None => (theta_wcd.clone(), false, false),
    };
    let theta_aee = if opts.with_aee { Some(combine_aee(&used)?) } else { None };
    let (j_agg, covariance) = meta_variance(&used)?;
    let ase: Vec<f64> =
        (0..covariance.nrows()).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
    Ok(MetaEstimate {
        theta_wcd,
        theta_rcd,
        theta_aee,
        j_agg,
        covariance,
        ase,
        k: summaries.len(),
        n: used.iter().map(|s| s.n_k).sum(),
        shards_used: used.iter().map(|s| s.shard_id).collect(),
        level: opts.level,
        rcd_refined,
        rcd_flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SensitivityMatrix, VariabilityMatrix};
    use approx::assert_abs_diff_eq;

    fn scalar_summary(shard_id: usize, n_k: usize, s: f64, v: f64, theta: f64) -> ShardSummary {
        let th = ParamVector::from_slice(&[theta]).unwrap();
        ShardSummary {
            shard_id,
            n_k,
            theta_hat: th.clone(),
            s_hat: SensitivityMatrix::new(DMatrix::from_element(1, 1, s), th.clone()).unwrap(),
            v_hat: VariabilityMatrix::new(DMatrix::from_element(1, 1, v), th).unwrap(),
            rho_hat: None,
            sigma2_hat: None,
            converged: true,
            iterations: 1,
            final_psi_norm: 0.0,
        }
    }

    #[test]
    fn wald_single_shard_is_identity() {
        let s = vec![scalar_summary(0, 100, 2.0, 1.0, 0.7)];
        let used = usable_summaries(&s, false).unwrap();
        let theta = combine_wald(&used).unwrap();
        assert_abs_diff_eq!(theta[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn wald_equal_weights_is_mean() {
        let s =
            vec![scalar_summary(0, 100, 1.0, 1.0, 0.4), scalar_summary(1, 100, 1.0, 1.0, 0.6)];
        let used = usable_summaries(&s, false).unwrap();
        let theta = combine_wald(&used).unwrap();
        assert_abs_diff_eq!(theta[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn wald_scalar_weighting() {
        // weights n S^2/V: 400 and 100
        let s =
            vec![scalar_summary(0, 100, 2.0, 1.0, 1.0), scalar_summary(1, 100, 1.0, 1.0, 2.0)];
        let used = usable_summaries(&s, false).unwrap();
        let theta = combine_wald(&used).unwrap();
        assert_abs_diff_eq!(theta[0], 1.2, epsilon = 1e-12);
    }

    #[test]
    fn aee_scalar_weighting() {
        let s =
            vec![scalar_summary(0, 100, 2.0, 1.0, 1.0), scalar_summary(1, 100, 1.0, 1.0, 2.0)];
        let used = usable_summaries(&s, false).unwrap();
        let theta = combine_aee(&used).unwrap();
        assert_abs_diff_eq!(theta[0], 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn aee_identical_sensitivity_is_mean() {
        let s = vec![scalar_summary(0, 50, 3.0, 1.0, 1.0), scalar_summary(1, 50, 3.0, 2.0, 3.0)];
        let used = usable_summaries(&s, false).unwrap();
        let theta = combine_aee(&used).unwrap();
        assert_abs_diff_eq!(theta[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn meta_variance_scalar() {
        let s = vec![scalar_summary(0, 100, 2.0, 1.0, 0.0)];
        let used = usable_summaries(&s, false).unwrap();
        let (j, cov) = meta_variance(&used).unwrap();
        assert_abs_diff_eq!(j.matrix[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 0)], 1.0 / 400.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[(0, 0)].sqrt(), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn meta_variance_identical_shards_equals_single() {
        let s =
            vec![scalar_summary(0, 100, 2.0, 1.5, 0.0), scalar_summary(1, 100, 2.0, 1.5, 0.0)];
        let used = usable_summaries(&s, false).unwrap();
        let (j, _) = meta_variance(&used).unwrap();
        let single = usable_summaries(&s[..1], false).unwrap();
        let (j1, _) = meta_variance(&single).unwrap();
        assert_abs_diff_eq!(j.matrix[(0, 0)], j1.matrix[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn bartlett_case_information_additivity() {
        // S = V per shard: J_agg = n^-1 sum n_k S_k
        let s =
            vec![scalar_summary(0, 100, 1.5, 1.5, 0.0), scalar_summary(1, 300, 2.5, 2.5, 0.0)];
        let used = usable_summaries(&s, false).unwrap();
        let (j, _) = meta_variance(&used).unwrap();
        let expect = (100.0 * 1.5 + 300.0 * 2.5) / 400.0;
        assert_abs_diff_eq!(j.matrix[(0, 0)], expect, epsilon = 1e-12);
    }

    #[test]
    fn confidence_interval_oracle() {
        let ci = confidence_intervals(&[1.2], &[0.05], 0.95).unwrap();
        assert_abs_diff_eq!(ci[0].0, 1.102, epsilon = 1e-3);
        assert_abs_diff_eq!(ci[0].1, 1.298, epsilon = 1e-3);
    }

    #[test]
    fn confidence_interval_degenerate_and_monotone() {
        let ci = confidence_intervals(&[3.0], &[0.0], 0.5).unwrap();
        assert_eq!(ci[0], (3.0, 3.0));
        let mut prev = 0.0;
        for level in [0.5, 0.9, 0.99, 0.999] {
            let ci = confidence_intervals(&[0.0], &[1.0], level).unwrap();
            let width = ci[0].1 - ci[0].0;
            assert!(width > prev);
            prev = width;
        }
    }

    #[test]
    fn nonconverged_excluded_and_recorded() {
        let mut s =
            vec![scalar_summary(0, 100, 1.0, 1.0, 0.4), scalar_summary(1, 100, 1.0, 1.0, 0.8)];
        s[1].converged = false;
        let meta = combine_meta(&ModelSpec::Cox, &s, None, &CombineOptions::default()).unwrap();
        assert_eq!(meta.shards_used, vec![0]);
        assert_abs_diff_eq!(meta.theta_wcd[0], 0.4, epsilon = 1e-12);
        assert_eq!(meta.n, 100);
        assert_eq!(meta.k, 2);
    }

    #[test]
    fn reduce_order_is_bit_identical() {
        let a = vec![
            scalar_summary(0, 137, 1.3, 0.9, 0.41),
            scalar_summary(1, 212, 2.1, 1.7, 0.39),
            scalar_summary(2, 88, 0.7, 1.1, 0.52),
        ];
        let mut b = a.clone();
        b.reverse();
        let ua = usable_summaries(&a, false).unwrap();
        let ub = usable_summaries(&b, false).unwrap();
        let ta = combine_wald(&ua).unwrap();
        let tb = combine_wald(&ub).unwrap();
        assert_eq!(ta[0].to_bits(), tb[0].to_bits());
        let (ja, _) = meta_variance(&ua).unwrap();
        let (jb, _) = meta_variance(&ub).unwrap();
        assert_eq!(ja.matrix[(0, 0)].to_bits(), jb.matrix[(0, 0)].to_bits());
    }

    #[test]
    fn rescaling_variability_leaves_wald_invariant() {
        let base = vec![
            scalar_summary(0, 120, 1.3, 0.9, 0.41),
            scalar_summary(1, 250, 2.1, 1.7, 0.39),
        ];
        let c = 7.5;
        let scaled: Vec<ShardSummary> = base
            .iter()
            .map(|s| {
                let mut s2 = s.clone();
                s2.v_hat =
                    VariabilityMatrix::new(&s.v_hat.matrix * c, s.theta_hat.clone()).unwrap();
                s2
            })
            .collect();
        let t1 = combine_wald(&usable_summaries(&base, false).unwrap()).unwrap();
        let t2 = combine_wald(&usable_summaries(&scaled, false).unwrap()).unwrap();
        assert_abs_diff_eq!(t1[0], t2[0], epsilon = 1e-10);
        let (_, cov1) = meta_variance(&usable_summaries(&base, false).unwrap()).unwrap();
        let (_, cov2) = meta_variance(&usable_summaries(&scaled, false).unwrap()).unwrap();
        assert_abs_diff_eq!(cov2[(0, 0)], c * cov1[(0, 0)], epsilon = 1e-12);
    }
}
