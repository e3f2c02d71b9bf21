use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt_f64;

pub const DEFAULT_ALPHAS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Parses a comma-separated list of probabilities. The list must be strictly
/// increasing and inside (0, 1).
pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    let alphas = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("invalid alpha '{t}'"))))
        .collect::<Result<Vec<_>>>()?;
    validate_alphas(&alphas)?;
    Ok(alphas)
}

pub(crate) fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list is empty".into()));
    }
    if let Some(&a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Config(format!("alpha {a} is outside (0, 1)")));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("alphas must be strictly increasing".into()));
    }
    Ok(())
}

/// Predicted quantiles per (area, alpha) for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    pub method: String,
    pub area_ids: Vec<String>,
    pub alphas: Vec<f64>,
    /// `values[k][a]` is the quantile of area `k` at `alphas[a]`.
    pub values: Vec<Vec<f64>>,
}

impl QuantileTable {
    pub fn new(method: impl Into<String>, area_ids: Vec<String>, alphas: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != area_ids.len() || values.iter().any(|r| r.len() != alphas.len()) {
            return Err(Error::Dimension(format!(
                "quantile table is {} x ? for {} areas and {} alphas",
                values.len(),
                area_ids.len(),
                alphas.len()
            )));
        }
        Ok(Self { method: method.into(), area_ids, alphas, values })
    }

    pub fn num_areas(&self) -> usize {
        self.area_ids.len()
    }

    /// True when every area's row is non-decreasing in alpha.
    pub fn is_monotone(&self) -> bool {
        self.values.iter().all(|r| r.windows(2).all(|w| w[0] <= w[1]))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Self::write_many(std::slice::from_ref(self), path)
    }

    /// Writes several tables into one long-format CSV.
    pub fn write_many(tables: &[QuantileTable], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["area_id", "alpha", "quantile", "method"]).map_err(|e| Error::csv(path, e))?;
        for t in tables {
            for (k, id) in t.area_ids.iter().enumerate() {
                for (a, &alpha) in t.alphas.iter().enumerate() {
                    w.write_record([id.as_str(), &alpha.to_string(), &fmt_f64(t.values[k][a]), &t.method])
                        .map_err(|e| Error::csv(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`QuantileTable::write_many`], one table per method,
    /// in order of first appearance.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<QuantileTable>> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut tables: Vec<QuantileTable> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Validation(format!("{}: bad number in column {i}", path.display())))
            };
            let (id, alpha, q, method) = (rec.get(0).unwrap_or(""), parse(1)?, parse(2)?, rec.get(3).unwrap_or(""));
            let t = match tables.iter_mut().position(|t| t.method == method) {
                Some(i) => &mut tables[i],
                None => {
                    tables.push(QuantileTable { method: method.into(), area_ids: vec![], alphas: vec![], values: vec![] });
                    tables.last_mut().unwrap()
                }
            };
            let k = match t.area_ids.iter().position(|a| a == id) {
                Some(k) => k,
                None => {
                    t.area_ids.push(id.into());
                    t.values.push(Vec::new());
                    t.area_ids.len() - 1
                }
            };
            if k == 0 {
                t.alphas.push(alpha);
            }
            t.values[k].push(q);
        }
        for t in &tables {
            if t.values.iter().any(|r| r.len() != t.alphas.len()) {
                return Err(Error::Validation(format!("{}: ragged quantile table", path.display())));
            }
        }
        Ok(tables)
    }
}
