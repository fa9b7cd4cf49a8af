//! Parallel map execution and the map/reduce serialization boundary.
//!
//! Shard summaries cross the boundary as newline-delimited JSON, one record
//! per line, matrices row-major, floats printed as shortest round-trip
//! decimals so a write/read cycle is bit-exact.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    LinkFunction, ModelSpec, Observation, ParamVector, SensitivityMatrix, VariabilityMatrix,
    WorkingCorrelation,
};
use crate::partition::ShardData;
use crate::solver::{self, ShardSummary, SolverConfig};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;

/// Applies `f` to every item on a fixed-size worker pool and returns results
/// in input order. Each item is processed by exactly one worker, so the
/// output is independent of worker count and scheduling.
pub fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, U)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                if tx.send((i, out)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut results: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
        for (i, u) in rx {
            results[i] = Some(u);
        }
        results.into_iter().map(|r| r.expect("worker dropped an item")).collect()
    })
}

/// Outcome of one shard's solve; failures are captured per shard instead of
/// aborting the batch.
#[derive(Debug)]
pub struct ShardOutcome {
    pub shard_id: usize,
    pub n_k: usize,
    pub result: Result<ShardSummary>,
}

/// Solves every shard on a pool of `parallelism` workers. The output is
/// sorted by shard id regardless of completion order.
pub fn run_map(
    model: &ModelSpec,
    shards: &[ShardData],
    cfg: &SolverConfig,
    parallelism: usize,
) -> Vec<ShardOutcome> {
    let mut outcomes = parallel_map(shards, parallelism, |_, shard| ShardOutcome {
        shard_id: shard.shard_id,
        n_k: shard.observations.len(),
        result: solver::solve_shard(model, &shard.observations, cfg, shard.shard_id),
    });
    outcomes.sort_by_key(|o| o.shard_id);
    outcomes
}

/// Collects the successful summaries, with any failures rendered as
/// `(shard_id, message)` pairs.
pub fn split_outcomes(outcomes: Vec<ShardOutcome>) -> (Vec<ShardSummary>, Vec<(usize, String)>) {
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o.result {
            Ok(s) => summaries.push(s),
            Err(e) => failures.push((o.shard_id, e.to_string())),
        }
    }
    (summaries, failures)
}

/// Model identity stamped into every summary record; the reduce step refuses
/// to mix fingerprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub family: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr: Option<String>,
    pub p: usize,
}

impl ModelFingerprint {
    pub fn of(model: &ModelSpec, p: usize) -> Self {
        match model {
            ModelSpec::Quantile { tau } => ModelFingerprint {
                family: "quantile".into(),
                tau: Some(*tau),
                link: None,
                corr: None,
                p,
            },
            ModelSpec::Gee { link, corr } => ModelFingerprint {
                family: "gee".into(),
                tau: None,
                link: Some(link.name().into()),
                corr: Some(corr.name().into()),
                p,
            },
            ModelSpec::Cox => {
                ModelFingerprint { family: "cox".into(), tau: None, link: None, corr: None, p }
            }
        }
    }

    /// Reconstructs the model spec (working-correlation rho defaults to 0;
    /// per-shard estimates live in the records).
    pub fn to_model(&self) -> Result<ModelSpec> {
        match self.family.as_str() {
            "quantile" => {
                let tau = self
                    .tau
                    .ok_or_else(|| Error::Format("quantile fingerprint missing tau".into()))?;
                Ok(ModelSpec::Quantile { tau })
            }
            "gee" => {
                let link = match self.link.as_deref() {
                    Some("identity") => LinkFunction::Identity,
                    Some("logit") => LinkFunction::Logit,
                    other => {
                        return Err(Error::Format(format!("unknown GEE link {other:?}")));
                    }
                };
                let corr = match self.corr.as_deref() {
                    Some("independence") => WorkingCorrelation::Independence,
                    Some("ar1") => WorkingCorrelation::Ar1 { rho: 0.0 },
                    Some("cs") => WorkingCorrelation::Cs { rho: 0.0 },
                    other => {
                        return Err(Error::Format(format!("unknown working correlation {other:?}")));
                    }
                };
                Ok(ModelSpec::Gee { link, corr })
            }
            "cox" => Ok(ModelSpec::Cox),
            other => Err(Error::Format(format!("unknown model family `{other}`"))),
        }
    }
}

/// Wire form of a shard summary: one NDJSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub format_version: u32,
    pub shard_id: usize,
    pub n_k: usize,
    pub theta_hat: Vec<f64>,
    /// Row-major `p x p`.
    pub s_hat: Vec<f64>,
    /// Row-major `p x p`.
    pub v_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2_hat: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_psi_norm: f64,
    pub fingerprint: ModelFingerprint,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_row_major(values: &[f64], p: usize) -> Result<DMatrix<f64>> {
    if values.len() != p * p {
        return Err(Error::Format(format!("matrix payload has {} entries, expected {}", values.len(), p * p)));
    }
    Ok(DMatrix::from_row_slice(p, p, values))
}

impl SummaryRecord {
    pub fn from_summary(summary: &ShardSummary, model: &ModelSpec) -> Self {
        SummaryRecord {
            format_version: SUMMARY_FORMAT_VERSION,
            shard_id: summary.shard_id,
            n_k: summary.n_k,
            theta_hat: summary.theta_hat.iter().cloned().collect(),
            s_hat: row_major(&summary.s_hat.matrix),
            v_hat: row_major(&summary.v_hat.matrix),
            rho_hat: summary.rho_hat,
            sigma2_hat: summary.sigma2_hat,
            converged: summary.converged,
            iterations: summary.iterations,
            final_psi_norm: summary.final_psi_norm,
            fingerprint: ModelFingerprint::of(model, summary.p()),
        }
    }

    pub fn to_summary(&self) -> Result<ShardSummary> {
        let p = self.fingerprint.p;
        if self.theta_hat.len() != p {
            return Err(Error::Format("theta length disagrees with fingerprint p".into()));
        }
        let theta = ParamVector::new(DVector::from_row_slice(&self.theta_hat))?;
        Ok(ShardSummary {
            shard_id: self.shard_id,
            n_k: self.n_k,
            theta_hat: theta.clone(),
            s_hat: SensitivityMatrix::new(from_row_major(&self.s_hat, p)?, theta.clone())?,
            v_hat: VariabilityMatrix::new(from_row_major(&self.v_hat, p)?, theta)?,
            rho_hat: self.rho_hat,
            sigma2_hat: self.sigma2_hat,
            converged: self.converged,
            iterations: self.iterations,
            final_psi_norm: self.final_psi_norm,
        })
    }
}

/// Writes one record per line.
pub fn write_summary_records(records: &[SummaryRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_summaries(summaries: &[ShardSummary], model: &ModelSpec, path: &Path) -> Result<()> {
    let records: Vec<SummaryRecord> =
        summaries.iter().map(|s| SummaryRecord::from_summary(s, model)).collect();
    write_summary_records(&records, path)
}

/// Reads newline-delimited records. An empty file is an empty list; a
/// version mismatch is an error. Fingerprint homogeneity is checked by
/// [`check_fingerprints`] on the reduce side, not here.
pub fn read_summary_records(path: &Path) -> Result<Vec<SummaryRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SummaryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        if record.format_version != SUMMARY_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported summary format_version {} (supported: {})",
                record.format_version, SUMMARY_FORMAT_VERSION
            )));
        }
        records.push(record);
    }
    Ok(records)
}

/// All records combined together must agree on the model fingerprint.
pub fn check_fingerprints(records: &[SummaryRecord]) -> Result<&ModelFingerprint> {
    let first = records
        .first()
        .map(|r| &r.fingerprint)
        .ok_or_else(|| Error::Format("no summary records to combine".into()))?;
    for r in records {
        if r.fingerprint != *first {
            return Err(Error::Fingerprint(format!(
                "shard {} was fitted with a different model: {:?} vs {:?}",
                r.shard_id, r.fingerprint, first
            )));
        }
    }
    Ok(first)
}

/// Builds the combiner's per-shard evaluator over in-memory shards, fanning
/// the evaluate calls out to `parallelism` workers and folding in shard-id
/// order.
pub fn make_evaluator<'a>(
    model: &'a ModelSpec,
    shards: &'a [ShardData],
    used: &[&ShardSummary],
    parallelism: usize,
) -> Result<impl FnMut(&ParamVector) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> + 'a> {
    let mut picked: Vec<(&'a ShardData, (Option<f64>, Option<f64>))> = Vec::with_capacity(used.len());
    for summary in used {
        let shard = shards
            .iter()
            .find(|s| s.shard_id == summary.shard_id)
            .ok_or_else(|| Error::Combination(format!("no shard data for shard {}", summary.shard_id)))?;
        picked.push((shard, summary.aux_params()));
    }
    Ok(move |theta: &ParamVector| {
        let evals = parallel_map(&picked, parallelism, |_, (shard, aux)| {
            solver::evaluate_at(model, &shard.observations, theta, aux.0, aux.1)
                .map(|(psi, s)| (psi, s.matrix))
        });
        evals.into_iter().collect()
    })
}
