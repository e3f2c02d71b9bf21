use super::QuantileTable;
use crate::error::{Error, Result};

/// Average squared quantile error per alpha, over all areas and repetitions:
/// `{R (m+1)}^-1 sum_r sum_k (pred - truth)^2`.
pub fn amse(predictions: &[QuantileTable], truths: &[QuantileTable]) -> Result<Vec<f64>> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::Dimension(format!(
            "{} prediction tables vs {} truth tables",
            predictions.len(),
            truths.len()
        )));
    }
    let n_alpha = predictions[0].alphas.len();
    let n_area = predictions[0].num_areas();
    let mut sums = vec![0.0; n_alpha];
    for (p, t) in predictions.iter().zip(truths) {
        if p.alphas != t.alphas || p.alphas.len() != n_alpha || p.num_areas() != n_area || t.num_areas() != n_area {
            return Err(Error::Dimension("prediction and truth tables do not match".into()));
        }
        for (pr, tr) in p.values.iter().zip(&t.values) {
            for (a, s) in sums.iter_mut().enumerate() {
                *s += (pr[a] - tr[a]).powi(2);
            }
        }
    }
    let denom = (predictions.len() * n_area) as f64;
    Ok(sums.into_iter().map(|s| s / denom).collect())
}

/// Mean of `estimated / simulated` over areas, leaving out the two areas with
/// the largest and the two with the smallest simulated MSE.
pub fn trimmed_ratio(estimated: &[f64], simulated: &[f64]) -> Result<f64> {
    if estimated.len() != simulated.len() {
        return Err(Error::Dimension(format!(
            "{} estimated vs {} simulated MSEs",
            estimated.len(),
            simulated.len()
        )));
    }
    if simulated.len() < 5 {
        return Err(Error::Validation(format!(
            "trimmed ratio needs at least 5 areas, got {}",
            simulated.len()
        )));
    }
    let mut order: Vec<usize> = (0..simulated.len()).collect();
    order.sort_by(|&a, &b| simulated[a].total_cmp(&simulated[b]).then(a.cmp(&b)));
    let kept = &order[2..order.len() - 2];
    Ok(kept.iter().map(|&k| estimated[k] / simulated[k]).sum::<f64>() / kept.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(v: Vec<Vec<f64>>) -> QuantileTable {
        let ids = (0..v.len()).map(|k| k.to_string()).collect();
        QuantileTable::new("t", ids, vec![0.5], v).unwrap()
    }

    #[test]
    fn amse_basics() {
        let p = table(vec![vec![1.3]]);
        let t = table(vec![vec![1.0]]);
        assert!((amse(&[p.clone()], &[t.clone()]).unwrap()[0] - 0.09).abs() < 1e-15);
        assert_eq!(amse(&[t.clone()], &[t.clone()]).unwrap(), vec![0.0]);
        assert!(amse(&[p], &[table(vec![vec![1.0], vec![2.0]])]).is_err());
    }

    #[test]
    fn amse_order_invariant() {
        let p1 = table(vec![vec![1.0], vec![2.0], vec![0.5]]);
        let p2 = table(vec![vec![0.0], vec![2.5], vec![1.5]]);
        let t = table(vec![vec![0.2], vec![2.2], vec![0.9]]);
        let a = amse(&[p1.clone(), p2.clone()], &[t.clone(), t.clone()]).unwrap();
        let b = amse(&[p2, p1], &[t.clone(), t]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-15);
    }

    #[test]
    fn trimmed() {
        let sim: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(trimmed_ratio(&sim, &sim).unwrap(), 1.0);
        let est: Vec<f64> = sim.iter().map(|s| 2.0 * s).collect();
        assert_eq!(trimmed_ratio(&est, &sim).unwrap(), 2.0);
        // Only areas 3..=18 (16 of them) count.
        let mut est = sim.clone();
        est[0] = 1e9;
        est[19] = 1e9;
        est[1] = 0.0;
        est[18] = 0.0;
        assert_eq!(trimmed_ratio(&est, &sim).unwrap(), 1.0);
        assert!(trimmed_ratio(&[1.0; 4], &[1.0; 4]).is_err());
    }
}
