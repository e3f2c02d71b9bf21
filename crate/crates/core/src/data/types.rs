use std::collections::HashSet;

use crate::error::{Error, Result};

/// The observed units of one small area: a row-major `n_k x d` covariate
/// matrix and the matching responses.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaSample {
    area_id: String,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl AreaSample {
    pub fn new(area_id: impl Into<String>, x_rows: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let area_id = area_id.into();
        let d = x_rows.first().map(Vec::len).unwrap_or(0);
        let mut x = Vec::with_capacity(x_rows.len() * d);
        for (j, row) in x_rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Validation(format!(
                    "area {area_id}: row {j} has {} covariates, expected {d}",
                    row.len()
                )));
            }
            x.extend_from_slice(row);
        }
        Self::from_flat(area_id, d, x, y)
    }

    pub fn from_flat(area_id: impl Into<String>, d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let area_id = area_id.into();
        if x.len() != y.len() * d {
            return Err(Error::Validation(format!(
                "area {area_id}: x has {} values but y has {} rows with d = {d}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("area {area_id}: non-finite value")));
        }
        Ok(Self { area_id, d, x, y })
    }

    pub fn area_id(&self) -> &str {
        &self.area_id
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.d..(j + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.x.chunks_exact(self.d.max(1)).take(self.n())
    }

    pub fn y_mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n() as f64
    }

    pub fn x_mean(&self) -> Vec<f64> {
        column_means(&self.x, self.d, self.n())
    }
}

pub(crate) fn column_means(x: &[f64], d: usize, n: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d.max(1)).take(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// A multi-area sample. Area order is meaningful: it is the order areas first
/// appeared in the input and the order of every per-area output.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveySample {
    areas: Vec<AreaSample>,
    d: usize,
}

impl SurveySample {
    pub fn new(areas: Vec<AreaSample>) -> Result<Self> {
        if areas.len() < 2 {
            return Err(Error::Validation(format!(
                "at least 2 areas are required, got {}",
                areas.len()
            )));
        }
        let d = areas[0].d();
        let mut seen = HashSet::new();
        for a in &areas {
            if a.d() != d {
                return Err(Error::Validation(format!(
                    "area {} has covariate dimension {}, expected {d}",
                    a.area_id(),
                    a.d()
                )));
            }
            if a.n() < 2 {
                return Err(Error::Validation(format!(
                    "area {} has {} observation(s); at least 2 are required",
                    a.area_id(),
                    a.n()
                )));
            }
            if !seen.insert(a.area_id().to_owned()) {
                return Err(Error::Validation(format!("duplicate area id {}", a.area_id())));
            }
        }
        Ok(Self { areas, d })
    }

    pub fn areas(&self) -> &[AreaSample] {
        &self.areas
    }

    pub fn area(&self, k: usize) -> &AreaSample {
        &self.areas[k]
    }

    pub fn num_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Total sample size `n`.
    pub fn n(&self) -> usize {
        self.areas.iter().map(AreaSample::n).sum()
    }

    pub fn area_index(&self, area_id: &str) -> Option<usize> {
        self.areas.iter().position(|a| a.area_id() == area_id)
    }

    pub fn area_ids(&self) -> Vec<String> {
        self.areas.iter().map(|a| a.area_id().to_owned()).collect()
    }

    /// `(n_k, n)` pairs; the exact rational sampling fractions.
    pub fn rho_counts(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        self.areas.iter().map(|a| (a.n(), n)).collect()
    }

    /// Sampling fractions `rho_k = n_k / n`.
    pub fn rho(&self) -> Vec<f64> {
        self.rho_counts()
            .into_iter()
            .map(|(nk, n)| nk as f64 / n as f64)
            .collect()
    }

    /// Sample covariate means per area.
    pub fn x_means(&self) -> Vec<Vec<f64>> {
        self.areas.iter().map(AreaSample::x_mean).collect()
    }
}

/// Census-side covariates for one area.
#[derive(Debug, Clone, PartialEq)]
pub enum CensusUnits {
    /// Every unit's covariates, row-major `N_k x d`.
    Full { x: Vec<f64>, n_units: usize },
    /// Only the population mean and size are known.
    MeansOnly { mean: Vec<f64>, size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensusArea {
    area_id: String,
    d: usize,
    units: CensusUnits,
    /// 0-based census rows of the sampled units, aligned with the survey rows.
    sample_link: Option<Vec<usize>>,
    cached_mean: Vec<f64>,
}

impl CensusArea {
    pub fn full(
        area_id: impl Into<String>,
        d: usize,
        x: Vec<f64>,
        sample_link: Option<Vec<usize>>,
    ) -> Result<Self> {
        let area_id = area_id.into();
        if d == 0 || x.len() % d != 0 || x.is_empty() {
            return Err(Error::Validation(format!(
                "census area {area_id}: {} values do not form rows of width {d}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("census area {area_id}: non-finite value")));
        }
        let n_units = x.len() / d;
        if let Some(link) = &sample_link {
            let mut seen = HashSet::new();
            for &i in link {
                if i >= n_units {
                    return Err(Error::Validation(format!(
                        "census area {area_id}: sampled row {} outside 1..{n_units}",
                        i + 1
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Validation(format!(
                        "census area {area_id}: sampled row {} listed twice",
                        i + 1
                    )));
                }
            }
        }
        let cached_mean = column_means(&x, d, n_units);
        Ok(Self { area_id, d, units: CensusUnits::Full { x, n_units }, sample_link, cached_mean })
    }

    pub fn means_only(area_id: impl Into<String>, mean: Vec<f64>, size: usize) -> Result<Self> {
        let area_id = area_id.into();
        if size == 0 || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "census area {area_id}: invalid mean row (size {size})"
            )));
        }
        Ok(Self {
            d: mean.len(),
            cached_mean: mean.clone(),
            units: CensusUnits::MeansOnly { mean, size },
            area_id,
            sample_link: None,
        })
    }

    pub fn area_id(&self) -> &str {
        &self.area_id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn units(&self) -> &CensusUnits {
        &self.units
    }

    /// Population size `N_k`.
    pub fn size(&self) -> usize {
        match &self.units {
            CensusUnits::Full { n_units, .. } => *n_units,
            CensusUnits::MeansOnly { size, .. } => *size,
        }
    }

    /// Population covariate mean.
    pub fn mean(&self) -> &[f64] {
        &self.cached_mean
    }

    pub fn is_full(&self) -> bool {
        matches!(self.units, CensusUnits::Full { .. })
    }

    pub fn sample_link(&self) -> Option<&[usize]> {
        self.sample_link.as_deref()
    }

    pub fn row(&self, j: usize) -> Option<&[f64]> {
        match &self.units {
            CensusUnits::Full { x, .. } => Some(&x[j * self.d..(j + 1) * self.d]),
            CensusUnits::MeansOnly { .. } => None,
        }
    }

    pub fn x_flat(&self) -> Option<&[f64]> {
        match &self.units {
            CensusUnits::Full { x, .. } => Some(x),
            CensusUnits::MeansOnly { .. } => None,
        }
    }

    /// Membership mask of sampled rows (all false without a link).
    pub fn sampled_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.size()];
        if let Some(link) = &self.sample_link {
            for &i in link {
                mask[i] = true;
            }
        }
        mask
    }

    pub fn with_sample_link(&self, link: Vec<usize>) -> Result<Self> {
        match &self.units {
            CensusUnits::Full { x, .. } => Self::full(self.area_id.clone(), self.d, x.clone(), Some(link)),
            CensusUnits::MeansOnly { .. } => Err(Error::Config(format!(
                "census area {}: a sample link needs unit-level covariates",
                self.area_id
            ))),
        }
    }
}

/// Auxiliary information for the whole population.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusFrame {
    areas: Vec<CensusArea>,
    d: usize,
}

impl CensusFrame {
    pub fn new(areas: Vec<CensusArea>) -> Result<Self> {
        let d = areas.first().map(CensusArea::d).ok_or_else(|| {
            Error::Validation("census frame has no areas".into())
        })?;
        let mut seen = HashSet::new();
        for a in &areas {
            if a.d() != d {
                return Err(Error::Validation(format!(
                    "census area {} has dimension {}, expected {d}",
                    a.area_id(),
                    a.d()
                )));
            }
            if !seen.insert(a.area_id().to_owned()) {
                return Err(Error::Validation(format!("duplicate census area {}", a.area_id())));
            }
        }
        Ok(Self { areas, d })
    }

    pub fn areas(&self) -> &[CensusArea] {
        &self.areas
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn area(&self, area_id: &str) -> Option<&CensusArea> {
        self.areas.iter().find(|a| a.area_id() == area_id)
    }

    pub fn is_full(&self) -> bool {
        self.areas.iter().all(CensusArea::is_full)
    }

    pub fn has_sample_link(&self) -> bool {
        self.areas.iter().all(|a| a.sample_link().is_some())
    }

    /// Census areas in the survey's area order, after checking that the two
    /// describe the same population: every survey area is present, `N_k >= n_k`,
    /// and any sample link lists exactly the sampled rows with matching covariates.
    pub fn aligned<'a>(&'a self, survey: &SurveySample) -> Result<Vec<&'a CensusArea>> {
        if self.d != survey.d() {
            return Err(Error::Validation(format!(
                "census has {} covariates, survey has {}",
                self.d,
                survey.d()
            )));
        }
        let mut out = Vec::with_capacity(survey.num_areas());
        for s in survey.areas() {
            let c = self.area(s.area_id()).ok_or_else(|| {
                Error::Validation(format!("area {} missing from census", s.area_id()))
            })?;
            if c.size() < s.n() {
                return Err(Error::Validation(format!(
                    "area {}: census size N_k = {} is smaller than sample size n_k = {}",
                    s.area_id(),
                    c.size(),
                    s.n()
                )));
            }
            if let Some(link) = c.sample_link() {
                if link.len() != s.n() {
                    return Err(Error::Validation(format!(
                        "area {}: census marks {} sampled rows, survey has {}",
                        s.area_id(),
                        link.len(),
                        s.n()
                    )));
                }
                for (j, &i) in link.iter().enumerate() {
                    let cr = c.row(i).expect("linked census is unit level");
                    let sr = s.row(j);
                    let close = cr.iter().zip(sr).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs()));
                    if !close {
                        return Err(Error::Validation(format!(
                            "area {}: sampled census row {} does not match survey row {}",
                            s.area_id(),
                            i + 1,
                            j + 1
                        )));
                    }
                }
            }
            out.push(c);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(id: &str, n: usize) -> AreaSample {
        AreaSample::new(id, (0..n).map(|j| vec![j as f64]).collect(), (0..n).map(|j| j as f64).collect())
            .unwrap()
    }

    #[test]
    fn rejects_small_area_by_name() {
        let err = SurveySample::new(vec![area("A", 1), area("B", 3)]).unwrap_err();
        assert!(err.to_string().contains("area A"), "{err}");
    }

    #[test]
    fn rejects_single_area_and_duplicates() {
        assert!(SurveySample::new(vec![area("A", 3)]).is_err());
        assert!(SurveySample::new(vec![area("A", 3), area("A", 3)]).is_err());
    }

    #[test]
    fn rho_counts_sum_exactly() {
        let s = SurveySample::new(vec![area("a", 3), area("b", 7), area("c", 11)]).unwrap();
        let counts = s.rho_counts();
        assert_eq!(counts.iter().map(|c| c.0).sum::<usize>(), s.n());
        assert!(counts.iter().all(|c| c.1 == 21));
        assert!((s.rho().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn census_link_validation() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(CensusArea::full("a", 1, x.clone(), Some(vec![0, 10])).is_err());
        assert!(CensusArea::full("a", 1, x.clone(), Some(vec![2, 2])).is_err());
        let c = CensusArea::full("a", 1, x, Some(vec![1, 3])).unwrap();
        assert_eq!(c.size(), 10);
        assert_eq!(c.mean(), &[4.5]);
        assert_eq!(c.sampled_mask().iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn aligned_checks_sizes() {
        let s = SurveySample::new(vec![area("a", 3), area("b", 3)]).unwrap();
        let small = CensusFrame::new(vec![
            CensusArea::full("a", 1, vec![0.0, 1.0], None).unwrap(),
            CensusArea::full("b", 1, vec![0.0, 1.0, 2.0, 3.0], None).unwrap(),
        ])
        .unwrap();
        assert!(small.aligned(&s).is_err());
        let ok = CensusFrame::new(vec![
            CensusArea::full("b", 1, vec![0.0, 1.0, 2.0, 3.0], Some(vec![0, 1, 2])).unwrap(),
            CensusArea::means_only("a", vec![1.0], 50).unwrap(),
        ])
        .unwrap();
        let al = ok.aligned(&s).unwrap();
        assert_eq!(al[0].area_id(), "a");
        assert_eq!(al[1].size(), 4);
    }
}
