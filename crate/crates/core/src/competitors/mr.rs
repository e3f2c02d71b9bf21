use rand_distr::{Distribution, StandardNormal};

use crate::data::{CensusArea, CensusFrame, SurveySample};
use crate::error::{Error, Result};
use crate::linalg::linpred;
use crate::ner::NerFit;
use crate::quantile::{CdfBuilder, CdfEstimate, CdfKind};
use crate::rng::RngStream;

/// Monte-Carlo replicates per out-of-sample unit.
pub const DEFAULT_MC_DRAWS: usize = 100;

/// Molina-Rao EBP-type CDF: observed indicators for sampled units and, for
/// every other census unit, the empirical CDF of `draws` simulated values
/// `mu_kj + u + e` with `u ~ N(0, (1 - gamma_k) sigma_v2)` shared by the
/// area within a replicate and `e ~ N(0, sigma_e2)`.
pub fn cdf_mr(
    ner: &NerFit,
    sample: &SurveySample,
    census: &CensusFrame,
    area: &str,
    draws: usize,
    stream: RngStream,
) -> Result<CdfEstimate> {
    let k = ner.area_index(area)?;
    let c = census
        .area(area)
        .ok_or_else(|| Error::Config(format!("area {area} missing from census")))?;
    cdf_mr_at(ner, sample, c, k, draws, stream)
}

pub(crate) fn cdf_mr_at(
    ner: &NerFit,
    sample: &SurveySample,
    census: &CensusArea,
    k: usize,
    draws: usize,
    stream: RngStream,
) -> Result<CdfEstimate> {
    let a = sample.area(k);
    if ner.area_ids.get(k).map(String::as_str) != Some(a.area_id()) {
        return Err(Error::Validation(format!("area {} does not match the NER fit", a.area_id())));
    }
    if draws == 0 {
        return Err(Error::Config("Monte-Carlo draw count must be positive".into()));
    }
    let x = census
        .x_flat()
        .ok_or_else(|| Error::Config(format!("area {}: MR needs unit-level census covariates", a.area_id())))?;
    if census.sample_link().is_none() {
        return Err(Error::Config(format!(
            "area {}: MR needs the census sample link to identify sampled units",
            a.area_id()
        )));
    }
    let mask = census.sampled_mask();
    let gamma = ner.gamma[k];
    let shrink = gamma * ner.nu[k];
    let means: Vec<f64> = x
        .chunks_exact(census.d())
        .zip(&mask)
        .filter(|(_, &s)| !s)
        .map(|(row, _)| linpred(&ner.beta, row, ner.intercept) + shrink)
        .collect();
    let sd_u = ((1.0 - gamma) * ner.sigma_v2).max(0.0).sqrt();
    let sd_e = ner.sigma_e();

    let big_n = census.size() as f64;
    let mut values = Vec::with_capacity(means.len() * draws);
    for l in 0..draws {
        let mut rng = stream.child(l as u64).rng();
        let z: f64 = StandardNormal.sample(&mut rng);
        let u = sd_u * z;
        for &mu in &means {
            let e: f64 = StandardNormal.sample(&mut rng);
            values.push(mu + u + sd_e * e);
        }
    }
    let w = 1.0 / (big_n * draws as f64);
    CdfBuilder::new()
        .kind(CdfKind::McMixture)
        .atoms_grouped(vec![(a.y().to_vec(), 1.0 / big_n), (values, w)])
        .build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AreaSample;
    use crate::ner::{fit_ner_mle, NerOptions};
    use crate::normal_cdf;
    use rand_distr::Uniform;

    fn setup(seed: u64) -> (SurveySample, CensusArea) {
        let mut rng = RngStream::new(seed, 0).rng();
        let u = Uniform::new(0.0, 4.0).unwrap();
        let areas = (0..4)
            .map(|k| {
                let x: Vec<Vec<f64>> = (0..6).map(|_| vec![u.sample(&mut rng)]).collect();
                let y = x
                    .iter()
                    .enumerate()
                    .map(|(j, r)| 1.0 + r[0] + 0.4 * k as f64 + ((j * 7 + k * 3) % 5) as f64 * 0.3)
                    .collect();
                AreaSample::new(format!("a{k}"), x, y).unwrap()
            })
            .collect();
        let s = SurveySample::new(areas).unwrap();
        let mut x = s.area(0).x_flat().to_vec();
        x.extend([0.5, 1.5, 2.5, 3.5]);
        let c = CensusArea::full("a0", 1, x, Some((0..6).collect())).unwrap();
        (s, c)
    }

    #[test]
    fn reproducible_and_requires_link() {
        let (s, c) = setup(1);
        let ner = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        let a = cdf_mr_at(&ner, &s, &c, 0, 50, RngStream::new(3, 4)).unwrap();
        let b = cdf_mr_at(&ner, &s, &c, 0, 50, RngStream::new(3, 4)).unwrap();
        assert_eq!(a, b);
        let nolink = CensusArea::full("a0", 1, c.x_flat().unwrap().to_vec(), None).unwrap();
        assert!(matches!(cdf_mr_at(&ner, &s, &nolink, 0, 50, RngStream::new(3, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn large_draws_match_analytic_mixture() {
        let (s, c) = setup(2);
        let mut ner = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        // Give the area effect some variance so both noise terms matter.
        ner.sigma_v2 = 0.5;
        ner.gamma[0] = crate::ner::shrinkage(6, 0.5, ner.sigma_e2);
        let f = cdf_mr_at(&ner, &s, &c, 0, 10_000, RngStream::new(9, 9)).unwrap();
        let sd = ((1.0 - ner.gamma[0]) * ner.sigma_v2 + ner.sigma_e2).sqrt();
        let big_n = 10.0;
        let oos = [0.5, 1.5, 2.5, 3.5];
        let analytic = |t: f64| {
            let ins = s.area(0).y().iter().filter(|&&y| y <= t).count() as f64;
            let out: f64 = oos
                .iter()
                .map(|&x| normal_cdf((t - linpred(&ner.beta, &[x], true) - ner.gamma[0] * ner.nu[0]) / sd))
                .sum();
            (ins + out) / big_n
        };
        let mut sup = 0.0f64;
        for i in 0..2000 {
            let t = -5.0 + 0.01 * i as f64;
            sup = sup.max((f.eval(t) - analytic(t)).abs());
        }
        assert!(sup < 0.02, "sup distance {sup}");
    }

    #[test]
    fn full_shrinkage_limit() {
        let (s, c) = setup(3);
        let mut ner = fit_ner_mle(&s, None, &NerOptions::default()).unwrap();
        ner.gamma[0] = 1.0;
        ner.sigma_e2 = 1e-12;
        let f = cdf_mr_at(&ner, &s, &c, 0, 20, RngStream::new(1, 1)).unwrap();
        // u has zero variance and e is negligible: out-of-sample mass sits at the
        // fully shrunk conditional means.
        let mu = linpred(&ner.beta, &[0.5], true) + ner.nu[0];
        assert!((f.eval(mu + 1e-3) - f.eval(mu - 1e-3) - 0.1).abs() < 1e-9);
    }
}
