//! Dataset ingestion and the columnar handle the partitioner consumes.
//!
//! CSV files are comma-separated with a header row and "." decimals. A
//! schema mapping names the columns by role, e.g.
//! `y=bmi,x=1+dp1+dp2,cluster=vehicle` where the covariate token `1` stands
//! for an intercept column of ones.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Observation};

pub const INTERCEPT_TOKEN: &str = "1";

/// Column roles for one fit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaMapping {
    pub response: Option<String>,
    /// Covariate columns in design order; `INTERCEPT_TOKEN` injects a column
    /// of ones.
    pub covariates: Vec<String>,
    pub cluster: Option<String>,
    pub time: Option<String>,
    pub status: Option<String>,
}

impl SchemaMapping {
    /// Parses the `key=value` comma list, covariates joined by `+`.
    /// Keys: `y`, `x`, `cluster`, `time`, `status`.
    pub fn parse(text: &str) -> Result<SchemaMapping> {
        let mut response = None;
        let mut covariates = Vec::new();
        let mut cluster = None;
        let mut time = None;
        let mut status = None;
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("schema entry `{part}` is not key=value")))?;
            match key.trim() {
                "y" => response = Some(value.trim().to_string()),
                "x" => {
                    covariates =
                        value.split('+').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
                }
                "cluster" => cluster = Some(value.trim().to_string()),
                "time" => time = Some(value.trim().to_string()),
                "status" => status = Some(value.trim().to_string()),
                other => return Err(Error::Invalid(format!("unknown schema key `{other}`"))),
            }
        }
        if covariates.is_empty() {
            return Err(Error::Invalid("schema must map at least one covariate (x=...)".into()));
        }
        Ok(SchemaMapping { response, covariates, cluster, time, status })
    }

    pub fn validate_for(&self, model: &ModelSpec) -> Result<()> {
        match model {
            ModelSpec::Quantile { .. } | ModelSpec::Gee { .. } => {
                if self.response.is_none() {
                    return Err(Error::Invalid(format!(
                        "{} model needs a response column (y=...)",
                        model.family_name()
                    )));
                }
                if matches!(model, ModelSpec::Gee { .. }) && self.cluster.is_none() {
                    return Err(Error::Invalid("GEE needs a cluster column (cluster=...)".into()));
                }
            }
            ModelSpec::Cox => {
                if self.time.is_none() || self.status.is_none() {
                    return Err(Error::Invalid(
                        "Cox needs time and status columns (time=..., status=...)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// In-memory columnar table with role assignments.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub schema: SchemaMapping,
    pub n_rows: usize,
    numeric: BTreeMap<String, Vec<f64>>,
    /// Raw text per mapped-or-key column, kept for by-key partitioning.
    raw: BTreeMap<String, Vec<String>>,
}

impl DatasetHandle {
    /// Builds a handle from numeric columns (the simulation generators use
    /// this path).
    pub fn from_numeric_columns(
        columns: Vec<(String, Vec<f64>)>,
        schema: SchemaMapping,
    ) -> Result<DatasetHandle> {
        let n_rows = columns.first().map(|(_, v)| v.len()).unwrap_or(0);
        if columns.iter().any(|(_, v)| v.len() != n_rows) {
            return Err(Error::Data("columns have unequal lengths".into()));
        }
        let mut numeric = BTreeMap::new();
        for (name, values) in columns {
            numeric.insert(name, values);
        }
        Ok(DatasetHandle { schema, n_rows, numeric, raw: BTreeMap::new() })
    }

    pub fn numeric_column(&self, name: &str) -> Result<&[f64]> {
        self.numeric
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("column `{name}` not found or not numeric")))
    }

    /// Raw text values of a column (available for ingested CSVs).
    pub fn raw_column(&self, name: &str) -> Result<&[String]> {
        self.raw
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("column `{name}` not found")))
    }

    pub fn has_raw_column(&self, name: &str) -> bool {
        self.raw.contains_key(name)
    }

    fn design_row(&self, row: usize) -> Result<Vec<f64>> {
        self.schema
            .covariates
            .iter()
            .map(|c| {
                if c == INTERCEPT_TOKEN {
                    Ok(1.0)
                } else {
                    Ok(self.numeric_column(c)?[row])
                }
            })
            .collect()
    }

    /// Materializes the model's observation units. GEE clusters group rows
    /// by the value of the cluster column, in order of first appearance.
    pub fn observations(&self, model: &ModelSpec) -> Result<Vec<Observation>> {
        self.schema.validate_for(model)?;
        let p = self.schema.covariates.len();
        match model {
            ModelSpec::Quantile { .. } => {
                let y = self.numeric_column(self.schema.response.as_ref().unwrap())?;
                (0..self.n_rows)
                    .map(|i| {
                        Ok(Observation::Quantile {
                            y: y[i],
                            x: DVector::from_vec(self.design_row(i)?),
                        })
                    })
                    .collect()
            }
            ModelSpec::Gee { .. } => {
                let y = self.numeric_column(self.schema.response.as_ref().unwrap())?;
                let cluster = self.numeric_column(self.schema.cluster.as_ref().unwrap())?;
                let mut order: Vec<u64> = Vec::new();
                let mut rows_by_cluster: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
                for i in 0..self.n_rows {
                    let id = cluster[i].to_bits();
                    rows_by_cluster.entry(id).or_insert_with(|| {
                        order.push(id);
                        Vec::new()
                    });
                    rows_by_cluster.get_mut(&id).unwrap().push(i);
                }
                order
                    .iter()
                    .enumerate()
                    .map(|(cid, id)| {
                        let rows = &rows_by_cluster[id];
                        let l = rows.len();
                        let mut xs = DMatrix::zeros(l, p);
                        let mut ys = DVector::zeros(l);
                        for (r, &i) in rows.iter().enumerate() {
                            ys[r] = y[i];
                            for (c, v) in self.design_row(i)?.into_iter().enumerate() {
                                xs[(r, c)] = v;
                            }
                        }
                        Ok(Observation::GeeCluster { ys, xs, cluster_id: cid as u64 })
                    })
                    .collect()
            }
            ModelSpec::Cox => {
                let time = self.numeric_column(self.schema.time.as_ref().unwrap())?;
                let status = self.numeric_column(self.schema.status.as_ref().unwrap())?;
                (0..self.n_rows)
                    .map(|i| {
                        let st = status[i];
                        if st != 0.0 && st != 1.0 {
                            return Err(Error::Data(format!(
                                "status column must be 0/1; row {} has {}",
                                i + 1,
                                st
                            )));
                        }
                        if !(time[i] >= 0.0) {
                            return Err(Error::Data(format!(
                                "time column must be >= 0; row {} has {}",
                                i + 1,
                                time[i]
                            )));
                        }
                        Ok(Observation::Surv {
                            time: time[i],
                            status: st == 1.0,
                            x: DVector::from_vec(self.design_row(i)?),
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Reads a CSV file and validates the mapped columns. Numeric parses are
/// strict: any unparseable mapped field names its row and column.
pub fn ingest_csv(path: &Path, schema: SchemaMapping) -> Result<DatasetHandle> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::Data(format!("bad header row: {e}")))?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Data("CSV has no header row".into()));
    }

    let mut mapped: Vec<&String> = Vec::new();
    if let Some(c) = &schema.response {
        mapped.push(c);
    }
    for c in &schema.covariates {
        if c != INTERCEPT_TOKEN {
            mapped.push(c);
        }
    }
    for c in [&schema.cluster, &schema.time, &schema.status].into_iter().flatten() {
        mapped.push(c);
    }
    for c in &mapped {
        if !headers.iter().any(|h| h == *c) {
            return Err(Error::Data(format!("mapped column `{c}` missing from header")));
        }
    }

    let mut raw: BTreeMap<String, Vec<String>> =
        headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    let mut n_rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", idx + 1)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {} has {} fields, header has {}",
                idx + 1,
                record.len(),
                headers.len()
            )));
        }
        for (h, field) in headers.iter().zip(record.iter()) {
            raw.get_mut(h).unwrap().push(field.to_string());
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Data(format!("{} contains no data rows", path.display())));
    }

    let mut numeric = BTreeMap::new();
    for name in mapped {
        let values: Result<Vec<f64>> = raw[name]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("row {} column `{}`: cannot parse `{}` as a number", i + 1, name, s))
                })
            })
            .collect();
        numeric.insert(name.clone(), values?);
    }

    Ok(DatasetHandle { schema, n_rows, numeric, raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinkFunction, WorkingCorrelation};
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_small_csv() {
        let f = write_csv("y,x1\n1.0,2.0\n2.0,3.0\n3.5,-1.0\n");
        let schema = SchemaMapping::parse("y=y,x=1+x1").unwrap();
        let handle = ingest_csv(f.path(), schema).unwrap();
        assert_eq!(handle.n_rows, 3);
        let obs = handle.observations(&ModelSpec::Quantile { tau: 0.5 }).unwrap();
        assert_eq!(obs.len(), 3);
        match &obs[0] {
            Observation::Quantile { y, x } => {
                assert_eq!(*y, 1.0);
                assert_eq!(x.as_slice(), &[1.0, 2.0]);
            }
            _ => panic!("wrong observation kind"),
        }
    }

    #[test]
    fn cox_status_must_be_binary() {
        let f = write_csv("t,d,x1\n1.0,1,0.5\n2.0,2,0.7\n");
        let schema = SchemaMapping::parse("x=x1,time=t,status=d").unwrap();
        let handle = ingest_csv(f.path(), schema).unwrap();
        let err = handle.observations(&ModelSpec::Cox).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "error must name the row: {msg}");
    }

    #[test]
    fn gee_clusters_group_by_value() {
        let f = write_csv("y,x1,cid\n1,0.1,7\n2,0.2,3\n3,0.3,7\n4,0.4,3\n5,0.5,9\n");
        let schema = SchemaMapping::parse("y=y,x=x1,cluster=cid").unwrap();
        let handle = ingest_csv(f.path(), schema).unwrap();
        let model = ModelSpec::Gee {
            link: LinkFunction::Identity,
            corr: WorkingCorrelation::Independence,
        };
        let obs = handle.observations(&model).unwrap();
        assert_eq!(obs.len(), 3, "three distinct cluster ids");
        let sizes: Vec<usize> = obs.iter().map(|o| o.n_responses()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn missing_column_errors() {
        let f = write_csv("y,x1\n1.0,2.0\n");
        let schema = SchemaMapping::parse("y=y,x=x2").unwrap();
        assert!(ingest_csv(f.path(), schema).is_err());
    }

    #[test]
    fn unparseable_field_names_row() {
        let f = write_csv("y,x1\n1.0,2.0\nbad,3.0\n");
        let schema = SchemaMapping::parse("y=y,x=x1").unwrap();
        let err = ingest_csv(f.path(), schema).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("`y`"), "{err}");
    }

    #[test]
    fn empty_file_errors() {
        let f = write_csv("y,x1\n");
        let schema = SchemaMapping::parse("y=y,x=x1").unwrap();
        assert!(ingest_csv(f.path(), schema).is_err());
    }
}
