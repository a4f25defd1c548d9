use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{kernels, BallPoint, GeometryError};
use crate::{Error, Result};

pub const DEFAULT_ENTROPY_K: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub k: usize,
    pub num_points: usize,
    /// Mean normalised neighbourhood entropy of the class labels.
    pub class_entropy: f64,
    /// Same for domain labels, when available.
    pub domain_entropy: Option<f64>,
}

/// Indices of the `k` nearest other points of every point under the
/// geodesic distance; ties go to the lower index.
fn neighbours(points: &[BallPoint], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::Metric(format!("k = {k} requires 1 ≤ k < n = {n}")));
    }
    let c = points[0].curvature();
    let dim = points[0].dim();
    for p in points {
        if p.curvature() != c {
            return Err(GeometryError::CurvatureMismatch(c.value(), p.curvature().value()).into());
        }
        if p.dim() != dim {
            return Err(GeometryError::DimensionMismatch(dim, p.dim()).into());
        }
    }
    let cv = c.value();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let xi = points[i].coords();
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (kernels::dist(xi, points[j].coords(), cv), j))
                .collect();
            let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, by);
            cand.truncate(k);
            cand.sort_by(by);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

fn mean_entropy(neigh: &[Vec<usize>], labels: &[usize]) -> f64 {
    let alphabet = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; alphabet];
    for &l in labels {
        present[l] = true;
    }
    let distinct = present.iter().filter(|p| **p).count();
    if distinct < 2 {
        return 0.0;
    }
    let norm = (distinct as f64).ln();
    let mut total = 0.0;
    let mut counts = vec![0usize; alphabet];
    for nb in neigh {
        counts.iter_mut().for_each(|c| *c = 0);
        for &j in nb {
            counts[labels[j]] += 1;
        }
        let k = nb.len() as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / k;
                -p * p.ln()
            })
            .sum();
        total += h / norm;
    }
    total / neigh.len() as f64
}

/// Mean over points of the Shannon entropy of the labels among the `k`
/// nearest neighbours (self excluded), divided by `ln L` for the `L`
/// distinct labels of the whole set. A single label gives 0.
pub fn knn_entropy(points: &[BallPoint], labels: &[usize], k: usize) -> Result<f64> {
    if labels.len() != points.len() {
        return Err(Error::Metric(format!("{} labels for {} points", labels.len(), points.len())));
    }
    let neigh = neighbours(points, k)?;
    Ok(mean_entropy(&neigh, labels))
}

/// Class and (optionally) domain entropy sharing one neighbour search.
pub fn entropy_report(points: &[BallPoint], classes: &[usize], domains: Option<&[usize]>, k: usize) -> Result<EntropyReport> {
    if classes.len() != points.len() || domains.is_some_and(|d| d.len() != points.len()) {
        return Err(Error::Metric("label count does not match point count".into()));
    }
    let neigh = neighbours(points, k)?;
    Ok(EntropyReport {
        k,
        num_points: points.len(),
        class_entropy: mean_entropy(&neigh, classes),
        domain_entropy: domains.map(|d| mean_entropy(&neigh, d)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Curvature;

    fn pts(coords: &[[f64; 2]]) -> Vec<BallPoint> {
        coords.iter().map(|c| BallPoint::new(c.to_vec(), Curvature::default()).unwrap()).collect()
    }

    #[test]
    fn identical_labels_give_zero() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.2, 0.2]]);
        assert_eq!(knn_entropy(&p, &[3, 3, 3, 3], 2).unwrap(), 0.0);
    }

    #[test]
    fn uniform_neighbourhoods_give_one() {
        // Square: the two nearest neighbours of a vertex are its adjacent
        // vertices.
        let p = pts(&[[0.3, 0.0], [0.0, 0.3], [-0.3, 0.0], [0.0, -0.3]]);
        assert!((knn_entropy(&p, &[0, 0, 1, 1], 2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(knn_entropy(&p, &[0, 1, 0, 1], 2).unwrap(), 0.0);
        let e = knn_entropy(&p, &[0, 1, 0, 1], 3).unwrap();
        assert!(e > 0.0 && e < 1.0);
    }

    #[test]
    fn rejects_bad_k() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0]]);
        assert!(knn_entropy(&p, &[0, 1], 2).is_err());
        assert!(knn_entropy(&p, &[0, 1], 0).is_err());
    }

    #[test]
    fn report_matches_single_calls() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.2, 0.2], [-0.4, 0.1], [0.3, -0.5]]);
        let c = [0, 1, 0, 1, 2, 2];
        let d = [0, 0, 1, 1, 0, 1];
        let r = entropy_report(&p, &c, Some(&d), 3).unwrap();
        assert_eq!(r.class_entropy, knn_entropy(&p, &c, 3).unwrap());
        assert_eq!(r.domain_entropy, Some(knn_entropy(&p, &d, 3).unwrap()));
    }
}
