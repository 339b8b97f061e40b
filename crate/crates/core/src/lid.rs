//! Local intrinsic dimensionality from k-nearest-neighbour distances, and
//! the loss `-mean ln LID` that rewards spread-out representations.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LidEstimator {
    #[serde(rename = "MoM", alias = "mom")]
    Mom,
    #[serde(rename = "MLE", alias = "mle")]
    Mle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    Euclidean,
    /// Euclidean distance after scaling every row to unit length.
    NormalizedEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidConfig {
    pub k: usize,
    pub estimator: LidEstimator,
    pub distance: DistanceMode,
    pub epsilon: f64,
    pub max_estimate: f64,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self {
            k: 16,
            estimator: LidEstimator::Mom,
            distance: DistanceMode::Euclidean,
            epsilon: 1e-8,
            max_estimate: 1e6,
        }
    }
}

impl LidConfig {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.k < 2 || self.k >= batch {
            return Err(Error::Config(format!(
                "LID neighbourhood size k = {} needs 2 <= k < batch size {batch}",
                self.k
            )));
        }
        if !(self.epsilon > 0.0 && self.max_estimate > self.epsilon) {
            return Err(Error::Config("LID guards need 0 < epsilon < max_estimate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidEstimate {
    pub query: usize,
    pub estimate: f64,
    /// Ascending.
    pub neighbor_distances: Vec<f64>,
    /// The degeneracy guard fired (collapsed neighbourhood).
    pub collapsed: bool,
}

/// `mean(r) / (w - mean(r))`, evaluated on the ratios `r / w`.
pub fn lid_mom(distances: &[f64], config: &LidConfig) -> (f64, bool) {
    let (eps, cap) = (config.epsilon, config.max_estimate);
    let Some(&w) = distances.last() else {
        return (eps, true);
    };
    if !(w > 0.0) {
        return (eps, true);
    }
    let m = distances.iter().map(|r| r / w).sum::<f64>() / distances.len() as f64;
    let denom = 1.0 - m;
    if denom < eps {
        return ((m / eps).clamp(eps, cap), true);
    }
    let est = m / denom;
    (est.clamp(eps, cap), !(eps..=cap).contains(&est))
}

/// `-1 / mean(ln(r / w))`, the k-th term contributing zero.
pub fn lid_mle(distances: &[f64], config: &LidConfig) -> (f64, bool) {
    let (eps, cap) = (config.epsilon, config.max_estimate);
    let Some(&w) = distances.last() else {
        return (eps, true);
    };
    if !(w > 0.0) {
        return (eps, true);
    }
    let s = distances.iter().map(|r| (r / w).max(eps).ln()).sum::<f64>() / distances.len() as f64;
    if s >= -eps {
        return ((1.0 / eps).min(cap), true);
    }
    let est = -1.0 / s;
    (est.clamp(eps, cap), !(eps..=cap).contains(&est))
}

pub fn estimate_from_distances(distances: &[f64], config: &LidConfig) -> (f64, bool) {
    match config.estimator {
        LidEstimator::Mom => lid_mom(distances, config),
        LidEstimator::Mle => lid_mle(distances, config),
    }
}

/// `M x M` Euclidean distances. Duplicated rows and the diagonal are exactly zero.
pub fn pairwise_distances<F: Element>(z: &Tensor<F>, mode: DistanceMode) -> Result<Tensor<F>> {
    if z.ndim() != 2 || z.shape()[0] < 2 {
        return Err(Error::shape("pairwise_distances", z.shape(), &[2, 1]));
    }
    if z.shape()[1] == 0 {
        return Err(Error::invalid("pairwise_distances: zero-dimensional points"));
    }
    let z = match mode {
        DistanceMode::Euclidean => z.clone(),
        DistanceMode::NormalizedEuclidean => z.l2_normalize(1, F::c(1e-12))?,
    };
    z.pairwise_sq_distances()?.sqrt()
}

/// Column indices of the `k` smallest off-diagonal entries of each row,
/// ascending, ties to the lower index.
pub fn knn_indices<F: Element>(d: &Tensor<F>, k: usize) -> Result<Vec<Vec<usize>>> {
    let &[m, m2] = d.shape() else {
        return Err(Error::shape("knn", d.shape(), &[k + 1, k + 1]));
    };
    if m != m2 || k == 0 || k >= m {
        return Err(Error::invalid(format!("knn: need 0 < k < M, got k = {k} for {m} x {m2}")));
    }
    let data = d.data();
    Ok((0..m)
        .map(|i| {
            let row = &data[i * m..(i + 1) * m];
            let mut cols: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            let cmp = |a: &usize, b: &usize| row[*a].partial_cmp(&row[*b]).unwrap_or(Ordering::Equal).then(a.cmp(b));
            cols.select_nth_unstable_by(k - 1, cmp);
            cols.truncate(k);
            cols.sort_by(cmp);
            cols
        })
        .collect())
}

/// `M x k` ascending neighbour distances; gradients reach only the selected entries.
pub fn knn_distances<F: Element>(d: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    d.gather_cols(&knn_indices(d, k)?)
}

/// Differentiable per-row estimates from an `M x k` ascending distance matrix.
pub fn lid_estimates<F: Element>(knn: &Tensor<F>, config: &LidConfig) -> Result<Tensor<F>> {
    if knn.ndim() != 2 || knn.shape()[1] == 0 {
        return Err(Error::shape("lid_estimates", knn.shape(), &[0, config.k]));
    }
    let k = knn.shape()[1];
    let (eps, cap) = (F::c(config.epsilon), F::c(config.max_estimate));
    let w = knn.column(k - 1)?.reshape(&[knn.shape()[0], 1])?;
    let ratios = knn.div(&w.clamp(eps, F::infinity()))?;
    let est = match config.estimator {
        LidEstimator::Mom => {
            let m = ratios.mean_axes(&[1], false)?;
            m.div(&m.affine(-F::one(), F::one()).clamp(eps, F::infinity()))?
        }
        LidEstimator::Mle => {
            let s = ratios.clamp(eps, F::one()).log()?.mean_axes(&[1], false)?;
            s.neg().clamp(eps, F::infinity()).powf(-F::one())
        }
    };
    // rows whose k-th distance is zero sit at the floor
    let w = w.reshape(&[knn.shape()[0]])?;
    let dead = w.map_detached(|v| if v > F::zero() { F::zero() } else { F::one() });
    let est = est.clamp(eps, cap);
    est.add(&dead.mul(&est.neg().add_scalar(eps))?)
}

/// Loss value with the per-query diagnostics behind it.
#[derive(Debug, Clone)]
pub struct LidLoss<F: Element> {
    pub loss: Tensor<F>,
    pub estimates: Vec<f64>,
    pub collapsed: Vec<bool>,
}

impl<F: Element> LidLoss<F> {
    pub fn any_collapsed(&self) -> bool {
        self.collapsed.iter().any(|&c| c)
    }

    pub fn mean_estimate(&self) -> f64 {
        self.estimates.iter().sum::<f64>() / self.estimates.len() as f64
    }
}

/// `-(1/M) sum_i ln LID_i` over the batch `z` (`M x d`).
pub fn dda_loss<F: Element>(z: &Tensor<F>, config: &LidConfig) -> Result<LidLoss<F>> {
    if z.ndim() != 2 {
        return Err(Error::shape("dda_loss", z.shape(), &[0, 0]));
    }
    config.validate(z.shape()[0])?;
    let d = pairwise_distances(z, config.distance)?;
    let knn = knn_distances(&d, config.k)?;
    let est = lid_estimates(&knn, config)?;
    let collapsed = knn
        .data()
        .chunks(config.k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            estimate_from_distances(&row, config).1
        })
        .collect();
    let loss = est.log()?.mean_all().neg();
    Ok(LidLoss {
        loss,
        estimates: est.data().iter().map(|v| v.f64()).collect(),
        collapsed,
    })
}

/// Non-differentiable estimates for a point cloud of `n` rows of length
/// `dim`, memory linear in `n`.
pub fn estimate_points(points: &[f64], dim: usize, config: &LidConfig) -> Result<Vec<LidEstimate>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::invalid(format!("{} values do not form rows of length {dim}", points.len())));
    }
    let n = points.len() / dim;
    config.validate(n)?;
    let k = config.k;
    let mut row = vec![(0.0f64, 0usize); n - 1];
    Ok((0..n)
        .map(|i| {
            let q = &points[i * dim..(i + 1) * dim];
            let mut t = 0;
            for j in (0..n).filter(|&j| j != i) {
                let p = &points[j * dim..(j + 1) * dim];
                let sq: f64 = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                row[t] = (sq.sqrt(), j);
                t += 1;
            }
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            row.select_nth_unstable_by(k - 1, cmp);
            let mut nn = row[..k].to_vec();
            nn.sort_by(cmp);
            let dists: Vec<f64> = nn.iter().map(|p| p.0).collect();
            let (estimate, collapsed) = estimate_from_distances(&dists, config);
            LidEstimate {
                query: i,
                estimate,
                neighbor_distances: dists,
                collapsed,
            }
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(estimator: LidEstimator) -> LidConfig {
        LidConfig {
            estimator,
            ..LidConfig::default()
        }
    }

    #[test]
    fn mom_hand_example() {
        let (e, c) = lid_mom(&[0.5, 1.0], &cfg(LidEstimator::Mom));
        assert!((e - 3.0).abs() < 1e-12);
        assert!(!c);
    }

    #[test]
    fn equal_distances_trigger_the_guard() {
        let c = LidConfig::default();
        assert_eq!(lid_mom(&[0.3; 4], &c), (1e6, true));
        assert_eq!(lid_mle(&[0.3; 4], &c), (1e6, true));
        assert_eq!(lid_mom(&[0.0; 4], &c), (1e-8, true));
        assert_eq!(lid_mle(&[0.0; 4], &c), (1e-8, true));
    }

    #[test]
    fn colinear_nearest_neighbours() {
        let z = Tensor::<f64>::new(&[3, 1], vec![0.0, 1.0, 3.0]).unwrap();
        let d = pairwise_distances(&z, DistanceMode::Euclidean).unwrap();
        assert_eq!(knn_distances(&d, 1).unwrap().data(), &[1.0, 1.0, 2.0]);
        assert_eq!(knn_distances(&d, 2).unwrap().data(), &[1.0, 3.0, 1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let z = Tensor::<f64>::new(&[3, 1], vec![0.0, -1.0, 1.0]).unwrap();
        let d = pairwise_distances(&z, DistanceMode::Euclidean).unwrap();
        assert_eq!(knn_indices(&d, 1).unwrap()[0], vec![1]);
    }

    #[test]
    fn config_rejects_bad_k() {
        let c = LidConfig {
            k: 8,
            ..LidConfig::default()
        };
        assert!(c.validate(8).is_err());
        assert!(c.validate(9).is_ok());
        assert!(LidConfig { k: 1, ..c }.validate(9).is_err());
    }

    #[test]
    fn tensor_and_scalar_estimates_agree() {
        let rows = [vec![0.1, 0.4, 0.5, 0.9], vec![0.2, 0.2, 0.3, 0.3], vec![0.0, 0.0, 0.0, 0.0]];
        for est in [LidEstimator::Mom, LidEstimator::Mle] {
            let c = cfg(est);
            let t = Tensor::<f64>::new(&[3, 4], rows.concat()).unwrap();
            let e = lid_estimates(&t, &c).unwrap();
            for (row, &v) in rows.iter().zip(e.data()) {
                let (s, _) = estimate_from_distances(row, &c);
                assert!((s - v).abs() <= 1e-9 * s.abs().max(1.0), "{est:?}: {s} vs {v}");
            }
        }
    }
}
