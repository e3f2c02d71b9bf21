//! CSV ingestion and export for surveys and census frames.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{AreaSample, CensusArea, CensusFrame, SurveySample};
use crate::error::{Error, Result};
use crate::fmt_f64;

/// Column mapping for a survey file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveySchema {
    pub area_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
}

impl Default for SurveySchema {
    fn default() -> Self {
        Self { area_col: "area".into(), y_col: "y".into(), x_cols: vec!["x1".into()] }
    }
}

/// Column mapping for a census file.
///
/// A census area is either unit level (one row per population unit) or
/// means only: a single row whose `row_type` column reads `mean` and whose
/// `size` column carries `N_k`. The optional sampled-flag column marks the
/// census rows that make up the survey sample, in survey row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusSchema {
    pub area_col: String,
    pub x_cols: Vec<String>,
    #[serde(default)]
    pub sampled_col: Option<String>,
    #[serde(default = "default_row_type_col")]
    pub row_type_col: String,
    #[serde(default = "default_size_col")]
    pub size_col: String,
}

fn default_row_type_col() -> String {
    "row_type".into()
}

fn default_size_col() -> String {
    "N".into()
}

impl Default for CensusSchema {
    fn default() -> Self {
        Self {
            area_col: "area".into(),
            x_cols: vec!["x1".into()],
            sampled_col: None,
            row_type_col: default_row_type_col(),
            size_col: default_size_col(),
        }
    }
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        Error::Validation(format!("{}: missing column '{name}'", path.display()))
    })
}

fn number(rec: &csv::StringRecord, idx: usize, col: &str, line: u64, path: &Path) -> Result<f64> {
    let cell = rec.get(idx).unwrap_or("");
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Validation(format!(
            "{} line {line}: column '{col}' has non-numeric value '{cell}'",
            path.display()
        ))),
    }
}

fn flag(cell: &str) -> Option<bool> {
    match cell.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "t" => Some(true),
        "0" | "false" | "no" | "n" | "f" | "" => Some(false),
        _ => None,
    }
}

/// Groups rows by area in first-appearance order, keeping file order within each area.
struct Grouper<T> {
    order: Vec<String>,
    index: HashMap<String, usize>,
    groups: Vec<Vec<T>>,
}

impl<T> Grouper<T> {
    fn new() -> Self {
        Self { order: Vec::new(), index: HashMap::new(), groups: Vec::new() }
    }

    fn push(&mut self, area: &str, item: T) {
        let k = *self.index.entry(area.to_owned()).or_insert_with(|| {
            self.order.push(area.to_owned());
            self.groups.push(Vec::new());
            self.order.len() - 1
        });
        self.groups[k].push(item);
    }
}

pub fn load_survey_csv(path: impl AsRef<Path>, schema: &SurveySchema) -> Result<SurveySample> {
    let path = path.as_ref();
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let area_i = column(&headers, &schema.area_col, path)?;
    let y_i = column(&headers, &schema.y_col, path)?;
    let x_i = schema
        .x_cols
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    if x_i.is_empty() {
        return Err(Error::Config("at least one covariate column is required".into()));
    }

    let mut groups: Grouper<(Vec<f64>, f64)> = Grouper::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let area = rec.get(area_i).unwrap_or("");
        if area.is_empty() {
            return Err(Error::Validation(format!("{} line {line}: empty area id", path.display())));
        }
        let y = number(&rec, y_i, &schema.y_col, line, path)?;
        let x = x_i
            .iter()
            .zip(&schema.x_cols)
            .map(|(&i, c)| number(&rec, i, c, line, path))
            .collect::<Result<Vec<_>>>()?;
        groups.push(area, (x, y));
    }

    let small: Vec<String> = groups
        .order
        .iter()
        .zip(&groups.groups)
        .filter(|(_, g)| g.len() < 2)
        .map(|(id, g)| format!("area \"{id}\" has {} row(s)", g.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::Validation(format!(
            "{}: every area needs at least 2 rows: {}",
            path.display(),
            small.join(", ")
        )));
    }

    let areas = groups
        .order
        .into_iter()
        .zip(groups.groups)
        .map(|(id, rows)| {
            let (x, y): (Vec<Vec<f64>>, Vec<f64>) = rows.into_iter().unzip();
            AreaSample::new(id, x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    SurveySample::new(areas)
}

pub fn write_survey_csv(sample: &SurveySample, path: impl AsRef<Path>, schema: &SurveySchema) -> Result<()> {
    let path = path.as_ref();
    if schema.x_cols.len() != sample.d() {
        return Err(Error::Config(format!(
            "schema names {} covariates, sample has {}",
            schema.x_cols.len(),
            sample.d()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec![schema.area_col.clone(), schema.y_col.clone()];
    header.extend(schema.x_cols.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for a in sample.areas() {
        for (j, &y) in a.y().iter().enumerate() {
            let mut rec = vec![a.area_id().to_owned(), fmt_f64(y)];
            rec.extend(a.row(j).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

enum CensusRow {
    Unit { x: Vec<f64>, sampled: bool },
    Mean { x: Vec<f64>, size: usize },
}

pub fn load_census_csv(path: impl AsRef<Path>, schema: &CensusSchema) -> Result<CensusFrame> {
    let path = path.as_ref();
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let area_i = column(&headers, &schema.area_col, path)?;
    let x_i = schema
        .x_cols
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let sampled_i = match &schema.sampled_col {
        Some(c) => Some(column(&headers, c, path)?),
        None => None,
    };
    let type_i = headers.iter().position(|h| h == schema.row_type_col);
    let size_i = headers.iter().position(|h| h == schema.size_col);

    let mut groups: Grouper<CensusRow> = Grouper::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let area = rec.get(area_i).unwrap_or("");
        if area.is_empty() {
            return Err(Error::Validation(format!("{} line {line}: empty area id", path.display())));
        }
        let x = x_i
            .iter()
            .zip(&schema.x_cols)
            .map(|(&i, c)| number(&rec, i, c, line, path))
            .collect::<Result<Vec<_>>>()?;
        let is_mean = type_i
            .and_then(|i| rec.get(i))
            .map(|t| t.eq_ignore_ascii_case("mean"))
            .unwrap_or(false);
        let row = if is_mean {
            let si = size_i.ok_or_else(|| {
                Error::Validation(format!(
                    "{} line {line}: mean row without a '{}' column",
                    path.display(),
                    schema.size_col
                ))
            })?;
            let size = number(&rec, si, &schema.size_col, line, path)?;
            if size < 1.0 || size.fract() != 0.0 {
                return Err(Error::Validation(format!(
                    "{} line {line}: population size {size} is not a positive integer",
                    path.display()
                )));
            }
            CensusRow::Mean { x, size: size as usize }
        } else {
            let sampled = match sampled_i {
                Some(i) => {
                    let cell = rec.get(i).unwrap_or("");
                    flag(cell).ok_or_else(|| {
                        Error::Validation(format!(
                            "{} line {line}: sampled flag '{cell}' is not boolean",
                            path.display()
                        ))
                    })?
                }
                None => false,
            };
            CensusRow::Unit { x, sampled }
        };
        groups.push(area, row);
    }

    let d = schema.x_cols.len();
    let mut areas = Vec::with_capacity(groups.order.len());
    for (id, rows) in groups.order.into_iter().zip(groups.groups) {
        let n_mean = rows.iter().filter(|r| matches!(r, CensusRow::Mean { .. })).count();
        if n_mean > 0 {
            if rows.len() != 1 {
                return Err(Error::Validation(format!(
                    "census area {id}: a mean row must be the only row of its area"
                )));
            }
            let Some(CensusRow::Mean { x, size }) = rows.into_iter().next() else { unreachable!() };
            areas.push(CensusArea::means_only(id, x, size)?);
        } else {
            let mut flat = Vec::with_capacity(rows.len() * d);
            let mut link = Vec::new();
            for (i, r) in rows.into_iter().enumerate() {
                if let CensusRow::Unit { x, sampled } = r {
                    flat.extend(x);
                    if sampled {
                        link.push(i);
                    }
                }
            }
            let link = sampled_i.map(|_| link);
            areas.push(CensusArea::full(id, d, flat, link)?);
        }
    }
    CensusFrame::new(areas)
}

pub fn write_census_csv(census: &CensusFrame, path: impl AsRef<Path>, schema: &CensusSchema) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let sampled_col = schema.sampled_col.clone().unwrap_or_else(|| "sampled".into());
    let mut header = vec![schema.area_col.clone()];
    header.extend(schema.x_cols.iter().cloned());
    header.extend([sampled_col, schema.row_type_col.clone(), schema.size_col.clone()]);
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for a in census.areas() {
        match a.x_flat() {
            Some(x) => {
                let mask = a.sampled_mask();
                for (i, row) in x.chunks_exact(a.d()).enumerate() {
                    let mut rec = vec![a.area_id().to_owned()];
                    rec.extend(row.iter().map(|&v| fmt_f64(v)));
                    rec.extend([
                        if mask[i] { "1".into() } else { "0".into() },
                        "unit".into(),
                        String::new(),
                    ]);
                    w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
                }
            }
            None => {
                let mut rec = vec![a.area_id().to_owned()];
                rec.extend(a.mean().iter().map(|&v| fmt_f64(v)));
                rec.extend(["0".into(), "mean".into(), a.size().to_string()]);
                w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
