//! Splitting a dataset into disjoint shards.
//!
//! Units of partition are GEE clusters or plain rows; a cluster is never
//! split across shards. Random plans shuffle unit indices with a seeded
//! ChaCha8 stream and deal them round-robin, so shard sizes differ by at
//! most one unit and membership replicates across platforms for a given
//! seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Observation};

/// How to split the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionKind {
    Random { k: usize, seed: u64 },
    ByKey { column: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub kind: PartitionKind,
    /// Minimum units per shard; defaults to `10 * p` when unset.
    pub min_shard_size: Option<usize>,
}

impl PartitionPlan {
    pub fn random(k: usize, seed: u64) -> Self {
        PartitionPlan { kind: PartitionKind::Random { k, seed }, min_shard_size: None }
    }

    pub fn by_key(column: impl Into<String>) -> Self {
        PartitionPlan { kind: PartitionKind::ByKey { column: column.into() }, min_shard_size: None }
    }
}

/// One shard of observations, identified by its reduce-side id.
#[derive(Debug, Clone)]
pub struct ShardData {
    pub shard_id: usize,
    pub observations: Vec<Observation>,
}

/// Deterministic shard assignment for `n_units` units: a seeded shuffle
/// followed by a round-robin deal. Returns the shard index of each unit.
pub fn assign_units(n_units: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_units).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_units];
    for (pos, &unit) in order.iter().enumerate() {
        assignment[unit] = pos % k;
    }
    assignment
}

fn group_by_assignment(units: Vec<Observation>, assignment: &[usize], k: usize) -> Vec<ShardData> {
    let mut shards: Vec<ShardData> =
        (0..k).map(|shard_id| ShardData { shard_id, observations: Vec::new() }).collect();
    for (obs, &sid) in units.into_iter().zip(assignment) {
        shards[sid].observations.push(obs);
    }
    shards
}

fn check_min_size(shards: &[ShardData], min_size: usize) -> Result<()> {
    let offenders: Vec<String> = shards
        .iter()
        .filter(|s| s.observations.len() < min_size)
        .map(|s| format!("shard {} has {} units", s.shard_id, s.observations.len()))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Partition(format!(
            "shards below the minimum size of {min_size} units: {}",
            offenders.join("; ")
        )))
    }
}

/// Splits the dataset's units according to the plan.
pub fn partition(
    handle: &DatasetHandle,
    model: &ModelSpec,
    plan: &PartitionPlan,
) -> Result<Vec<ShardData>> {
    let units = handle.observations(model)?;
    let p = units.first().map(|o| o.width()).unwrap_or(1);
    let min_size = plan.min_shard_size.unwrap_or(10 * p);
    let shards = match &plan.kind {
        PartitionKind::Random { k, seed } => {
            if *k < 1 {
                return Err(Error::Partition("K must be >= 1".into()));
            }
            if k * min_size > units.len() {
                return Err(Error::Partition(format!(
                    "{} units cannot fill K = {k} shards of at least {min_size} units",
                    units.len()
                )));
            }
            let assignment = assign_units(units.len(), *k, *seed);
            group_by_assignment(units, &assignment, *k)
        }
        PartitionKind::ByKey { column } => {
            let keys = unit_keys(handle, model, column, units.len())?;
            let mut distinct: Vec<&str> = Vec::new();
            for key in &keys {
                if !distinct.contains(&key.as_str()) {
                    distinct.push(key);
                }
            }
            let assignment: Vec<usize> = keys
                .iter()
                .map(|key| distinct.iter().position(|d| d == key).unwrap())
                .collect();
            group_by_assignment(units, &assignment, distinct.len())
        }
    };
    check_min_size(&shards, min_size)?;
    Ok(shards)
}

/// Per-unit key values for by-key partitioning. For clustered models each
/// cluster must carry a single key value.
fn unit_keys(
    handle: &DatasetHandle,
    model: &ModelSpec,
    column: &str,
    n_units: usize,
) -> Result<Vec<String>> {
    let raw = if handle.has_raw_column(column) {
        handle.raw_column(column)?.to_vec()
    } else {
        handle.numeric_column(column)?.iter().map(|v| v.to_string()).collect()
    };
    match model {
        ModelSpec::Gee { .. } => {
            let cluster_col = handle
                .schema
                .cluster
                .as_ref()
                .ok_or_else(|| Error::Partition("GEE by-key split needs a cluster column".into()))?;
            let cluster = handle.numeric_column(cluster_col)?;
            let mut order: Vec<u64> = Vec::new();
            let mut key_by_cluster: std::collections::BTreeMap<u64, String> = Default::default();
            for i in 0..handle.n_rows {
                let id = cluster[i].to_bits();
                match key_by_cluster.get(&id) {
                    None => {
                        order.push(id);
                        key_by_cluster.insert(id, raw[i].clone());
                    }
                    Some(existing) if *existing != raw[i] => {
                        return Err(Error::Partition(format!(
                            "cluster {} spans multiple `{}` values; clusters cannot be split",
                            cluster[i], column
                        )));
                    }
                    Some(_) => {}
                }
            }
            let keys: Vec<String> = order.into_iter().map(|id| key_by_cluster[&id].clone()).collect();
            if keys.len() != n_units {
                return Err(Error::Partition("cluster/key bookkeeping mismatch".into()));
            }
            Ok(keys)
        }
        _ => {
            if raw.len() != n_units {
                return Err(Error::Partition("key column length mismatch".into()));
            }
            Ok(raw)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SchemaMapping;

    fn quantile_handle(n: usize) -> DatasetHandle {
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        DatasetHandle::from_numeric_columns(
            vec![("y".into(), y), ("x1".into(), x)],
            SchemaMapping::parse("y=y,x=1+x1").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn round_robin_sizes() {
        let handle = quantile_handle(100);
        let model = ModelSpec::Quantile { tau: 0.5 };
        let mut plan = PartitionPlan::random(4, 7);
        plan.min_shard_size = Some(1);
        let shards = partition(&handle, &model, &plan).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.observations.len()).collect();
        assert_eq!(sizes, vec![25, 25, 25, 25]);
    }

    #[test]
    fn round_robin_remainder() {
        let handle = quantile_handle(10);
        let model = ModelSpec::Quantile { tau: 0.5 };
        let mut plan = PartitionPlan::random(3, 42);
        plan.min_shard_size = Some(1);
        let shards = partition(&handle, &model, &plan).unwrap();
        let mut sizes: Vec<usize> = shards.iter().map(|s| s.observations.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn same_seed_same_membership() {
        let a = assign_units(1000, 7, 99);
        let b = assign_units(1000, 7, 99);
        assert_eq!(a, b);
        let c = assign_units(1000, 7, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn partition_is_a_bijection() {
        let n = 503;
        let k = 13;
        let assignment = assign_units(n, k, 5);
        assert_eq!(assignment.len(), n);
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), n);
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1, "round-robin sizes differ by more than one: {counts:?}");
    }

    #[test]
    fn min_shard_size_enforced() {
        let handle = quantile_handle(30);
        let model = ModelSpec::Quantile { tau: 0.5 };
        // default min size is 10 * p = 20; K=3 needs 60 units
        let plan = PartitionPlan::random(3, 1);
        let err = partition(&handle, &model, &plan).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }
}
