//! Cox partial-score estimating function.
//!
//! The summand for subject `i` is `delta_i (x_i - xbar(T_i))` where
//! `xbar(t)` is the exp(x'theta)-weighted mean of covariates over the risk
//! set `{j : T_j >= t}`. Risk-set sums are accumulated once by sorting the
//! shard on descending time, so a full evaluation is O(n log n). Tied event
//! times share one risk set (Breslow). Weights are rescaled by the running
//! maximum of the linear predictor, which keeps the sums finite for any
//! theta.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Observation, ParamVector};

/// Risk-set weighted covariate means keyed by event time, for one shard at
/// one theta.
#[derive(Debug, Clone)]
pub struct CoxRiskSet {
    xbar_by_time: BTreeMap<u64, DVector<f64>>,
    pub theta_at: ParamVector,
}

fn unpack(shard: &[Observation]) -> Result<Vec<(f64, bool, &DVector<f64>)>> {
    shard
        .iter()
        .map(|o| match o {
            Observation::Surv { time, status, x } => Ok((*time, *status, x)),
            _ => Err(Error::Invalid("Cox model requires Surv observations".into())),
        })
        .collect()
}

/// Indices sorted by descending observed time.
fn descending_order(subjects: &[(f64, bool, &DVector<f64>)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.sort_by(|&a, &b| {
        subjects[b].0.partial_cmp(&subjects[a].0).unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

struct RunningSums {
    max_eta: f64,
    s0: f64,
    s1: DVector<f64>,
    s2: Option<DMatrix<f64>>,
}

impl RunningSums {
    fn new(p: usize, with_s2: bool) -> Self {
        RunningSums {
            max_eta: f64::NEG_INFINITY,
            s0: 0.0,
            s1: DVector::zeros(p),
            s2: if with_s2 { Some(DMatrix::zeros(p, p)) } else { None },
        }
    }

    fn add(&mut self, eta: f64, x: &DVector<f64>) {
        if eta > self.max_eta {
            let scale = if self.max_eta.is_finite() { (self.max_eta - eta).exp() } else { 0.0 };
            self.s0 *= scale;
            self.s1 *= scale;
            if let Some(s2) = self.s2.as_mut() {
                *s2 *= scale;
            }
            self.max_eta = eta;
        }
        let w = (eta - self.max_eta).exp();
        self.s0 += w;
        self.s1.axpy(w, x, 1.0);
        if let Some(s2) = self.s2.as_mut() {
            linalg::add_scaled_outer(s2, w, x);
        }
    }

    fn xbar(&self) -> Result<DVector<f64>> {
        if self.s0 <= 0.0 {
            return Err(Error::DegenerateData("empty risk set at an event time".into()));
        }
        Ok(&self.s1 / self.s0)
    }
}

impl CoxRiskSet {
    /// Accumulates the per-event-time weighted covariate means for a shard.
    pub fn build(shard: &[Observation], theta: &ParamVector) -> Result<Self> {
        let subjects = unpack(shard)?;
        let p = theta.len();
        let order = descending_order(&subjects);
        let mut sums = RunningSums::new(p, false);
        let mut xbar_by_time = BTreeMap::new();

        let mut i = 0;
        while i < order.len() {
            let t = subjects[order[i]].0;
            let mut any_event = false;
            let mut j = i;
            while j < order.len() && subjects[order[j]].0 == t {
                let (_, status, x) = subjects[order[j]];
                sums.add(x.dot(theta.as_vector()), x);
                any_event |= status;
                j += 1;
            }
            if any_event {
                xbar_by_time.insert(t.to_bits(), sums.xbar()?);
            }
            i = j;
        }
        Ok(CoxRiskSet { xbar_by_time, theta_at: theta.clone() })
    }

    pub(super) fn psi_for(
        &self,
        obs: &Observation,
        status: bool,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if !status {
            return Ok(DVector::zeros(x.len()));
        }
        let time = match obs {
            Observation::Surv { time, .. } => *time,
            _ => return Err(Error::Invalid("Cox psi requires a Surv observation".into())),
        };
        let xbar = self.xbar_by_time.get(&time.to_bits()).ok_or_else(|| {
            Error::DegenerateData(format!("no risk set recorded at event time {time}"))
        })?;
        Ok(x - xbar)
    }
}

pub(super) fn psi_summands(shard: &[Observation], rs: &CoxRiskSet) -> Result<Vec<DVector<f64>>> {
    shard
        .iter()
        .map(|o| match o {
            Observation::Surv { status, x, .. } => rs.psi_for(o, *status, x),
            _ => Err(Error::Invalid("Cox model requires Surv observations".into())),
        })
        .collect()
}

/// Observed partial-likelihood information divided by the shard size:
/// `n^-1 sum over events of [S2/S0 - xbar xbar']`, the exact negative
/// Jacobian of the shard-mean partial score.
pub(super) fn sensitivity(shard: &[Observation], theta: &ParamVector) -> Result<DMatrix<f64>> {
    let subjects = unpack(shard)?;
    let n = subjects.len();
    let p = theta.len();
    let order = descending_order(&subjects);
    let mut sums = RunningSums::new(p, true);
    let mut acc = DMatrix::zeros(p, p);

    let mut i = 0;
    while i < order.len() {
        let t = subjects[order[i]].0;
        let mut events_here = 0usize;
        let mut j = i;
        while j < order.len() && subjects[order[j]].0 == t {
            let (_, status, x) = subjects[order[j]];
            sums.add(x.dot(theta.as_vector()), x);
            if status {
                events_here += 1;
            }
            j += 1;
        }
        if events_here > 0 {
            let xbar = sums.xbar()?;
            let s2 = sums.s2.as_ref().expect("sensitivity sweep tracks s2");
            let mut info = s2 / sums.s0;
            linalg::add_scaled_outer(&mut info, -1.0, &xbar);
            acc += info * events_here as f64;
        }
        i = j;
    }
    Ok(acc / n as f64)
}

/// Number of observed events in a shard.
pub fn event_count(shard: &[Observation]) -> Result<usize> {
    Ok(unpack(shard)?.iter().filter(|(_, status, _)| *status).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn surv(time: f64, status: bool, x: &[f64]) -> Observation {
        Observation::Surv { time, status, x: DVector::from_row_slice(x) }
    }

    #[test]
    fn tied_events_share_risk_set() {
        let shard = vec![
            surv(1.0, true, &[1.0]),
            surv(1.0, true, &[2.0]),
            surv(2.0, false, &[0.0]),
        ];
        let theta = ParamVector::from_slice(&[0.0]).unwrap();
        let rs = CoxRiskSet::build(&shard, &theta).unwrap();
        let s = psi_summands(&shard, &rs).unwrap();
        // both events see the full risk set {0,1,2} with xbar = 1
        assert_abs_diff_eq!(s[0][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2][0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn extreme_theta_stays_finite() {
        let shard = vec![
            surv(1.0, true, &[1.0, -2.0]),
            surv(2.0, true, &[3.0, 0.5]),
            surv(3.0, false, &[-1.0, 1.0]),
        ];
        for scale in [-400.0, 400.0] {
            let theta = ParamVector::from_slice(&[scale, scale / 2.0]).unwrap();
            let rs = CoxRiskSet::build(&shard, &theta).unwrap();
            for s in psi_summands(&shard, &rs).unwrap() {
                assert!(s.iter().all(|v| v.is_finite()));
            }
            let sens = sensitivity(&shard, &theta).unwrap();
            assert!(sens.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn event_count_counts_events() {
        let shard = vec![surv(1.0, true, &[1.0]), surv(2.0, false, &[1.0])];
        assert_eq!(event_count(&shard).unwrap(), 1);
    }
}
