//! How vertical embeddings occupy the shared space: a PCA projection for
//! plotting and exact separation statistics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean, Matrix};

pub const ANALYSIS_FORMAT_VERSION: u32 = 1;

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and eigenvectors as matching columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(
            "symmetric_eigen",
            "square matrix",
            format!("{:?}", a.shape()),
        ));
    }
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off < JACOBI_TOLERANCE {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, src));
        }
    }
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `rows × out_dim`
    pub coordinates: Matrix,
    /// Variance captured by each kept component.
    pub explained_variance: Vec<f64>,
    /// Sum of all eigenvalues (total sample variance).
    pub total_variance: f64,
    /// `embedding_dim × out_dim` unit loadings.
    pub components: Matrix,
}

/// Projects mean-centered rows onto the top `out_dim` principal components of
/// the sample covariance (`1/(n−1)` normalization). Each component's first
/// nonzero loading is made positive. Accumulation runs over the rows in
/// sorted order, so the result does not depend on input row order.
pub fn pca_project(embeddings: &Matrix, out_dim: usize) -> Result<Projection> {
    let (n, d) = embeddings.shape();
    if n < 2 {
        return Err(Error::Usage(format!("PCA needs at least 2 rows, got {n}")));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::Usage(format!(
            "cannot project {d}-d data onto {out_dim} components"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| lexicographic(embeddings.row(i), embeddings.row(j)));

    let mut mean = vec![0.0; d];
    for &i in &order {
        mean.iter_mut().zip(embeddings.row(i)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for &i in &order {
        centered
            .iter_mut()
            .zip(embeddings.row(i))
            .zip(&mean)
            .for_each(|((c, x), m)| *c = x - m);
        for r in 0..d {
            for c in r..d {
                let v = cov.get(r, c) + centered[r] * centered[c];
                cov.set(r, c, v);
            }
        }
    }
    for r in 0..d {
        for c in r..d {
            let v = cov.get(r, c) / (n - 1) as f64;
            cov.set(r, c, v);
            cov.set(c, r, v);
        }
    }

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut components = Matrix::zeros(d, out_dim);
    for k in 0..out_dim {
        let flip = (0..d)
            .map(|r| vectors.get(r, k))
            .find(|x| x.abs() > 1e-12)
            .is_some_and(|x| x < 0.0);
        for r in 0..d {
            let x = vectors.get(r, k);
            components.set(r, k, if flip { -x } else { x });
        }
    }

    let mut coordinates = Matrix::zeros(n, out_dim);
    for i in 0..n {
        centered
            .iter_mut()
            .zip(embeddings.row(i))
            .zip(&mean)
            .for_each(|((c, x), m)| *c = x - m);
        for k in 0..out_dim {
            let proj: f64 = (0..d).map(|r| centered[r] * components.get(r, k)).sum();
            coordinates.set(i, k, proj);
        }
    }
    Ok(Projection {
        coordinates,
        explained_variance: values.iter().take(out_dim).map(|v| v.max(0.0)).collect(),
        total_variance: values.iter().map(|v| v.max(0.0)).sum(),
        components,
    })
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// `item_id,vertical,x,y` rows for external plotting.
pub fn projection_csv(item_ids: &[usize], verticals: &[&str], coordinates: &Matrix) -> Result<String> {
    if item_ids.len() != coordinates.rows() || verticals.len() != coordinates.rows() || coordinates.cols() < 2 {
        return Err(Error::shape(
            "projection_csv",
            format!("{} rows with >= 2 coordinates", item_ids.len()),
            format!("{:?}", coordinates.shape()),
        ));
    }
    let mut out = String::from("item_id,vertical,x,y\n");
    for (r, (id, v)) in item_ids.iter().zip(verticals).enumerate() {
        writeln!(out, "{id},{v},{},{}", coordinates.get(r, 0), coordinates.get(r, 1)).unwrap();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub format_version: u32,
    pub verticals: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    /// Mean pairwise Euclidean distance within each vertical.
    pub mean_intra_distance: Vec<f64>,
    /// Euclidean distances between centroids.
    pub inter_centroid_distance: Vec<Vec<f64>>,
    /// Mean silhouette over all samples, clusters being verticals.
    pub mean_silhouette: f64,
}

impl OccupancyReport {
    pub fn min_inter_centroid_distance(&self) -> f64 {
        let n = self.verticals.len();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| self.inter_centroid_distance[i][j])
            .fold(f64::INFINITY, f64::min)
    }

    /// Average of the per-vertical mean intra distances.
    pub fn overall_intra_distance(&self) -> f64 {
        self.mean_intra_distance.iter().sum::<f64>() / self.mean_intra_distance.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Separation statistics for embeddings grouped by vertical. Distances are
/// Euclidean (not squared).
pub fn occupancy(groups: &[(String, Matrix)]) -> Result<OccupancyReport> {
    if groups.len() < 2 {
        return Err(Error::Usage(
            "occupancy compares at least 2 verticals; use pca_project for a single one".into(),
        ));
    }
    let dim = groups[0].1.cols();
    for (v, m) in groups {
        if m.rows() < 2 {
            return Err(Error::Usage(format!("vertical `{v}` needs at least 2 samples")));
        }
        if m.cols() != dim {
            return Err(Error::shape("occupancy embedding dim", dim, m.cols()));
        }
    }
    let dist = |a: &[f64], b: &[f64]| squared_euclidean(a, b).sqrt();

    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, m)| {
            let mut c = vec![0.0; dim];
            for row in m.row_iter() {
                c.iter_mut().zip(row).for_each(|(c, x)| *c += x);
            }
            c.iter_mut().for_each(|c| *c /= m.rows() as f64);
            c
        })
        .collect();

    let mean_intra_distance = groups
        .iter()
        .map(|(_, m)| {
            let n = m.rows();
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    total += dist(m.row(i), m.row(j));
                }
            }
            total / (n * (n - 1) / 2) as f64
        })
        .collect();

    let g = groups.len();
    let mut inter = vec![vec![0.0; g]; g];
    for i in 0..g {
        for j in (i + 1)..g {
            let d = dist(&centroids[i], &centroids[j]);
            inter[i][j] = d;
            inter[j][i] = d;
        }
    }

    let mut silhouette_sum = 0.0;
    let mut samples = 0usize;
    for (ci, (_, mi)) in groups.iter().enumerate() {
        for r in 0..mi.rows() {
            let x = mi.row(r);
            let mut a = 0.0;
            let mut b = f64::INFINITY;
            for (cj, (_, mj)) in groups.iter().enumerate() {
                let sum: f64 = mj.row_iter().map(|y| dist(x, y)).sum();
                if ci == cj {
                    a = sum / (mj.rows() - 1) as f64;
                } else {
                    b = b.min(sum / mj.rows() as f64);
                }
            }
            let denom = a.max(b);
            silhouette_sum += if denom > 0.0 { (b - a) / denom } else { 0.0 };
            samples += 1;
        }
    }

    Ok(OccupancyReport {
        format_version: ANALYSIS_FORMAT_VERSION,
        verticals: groups.iter().map(|(v, _)| v.clone()).collect(),
        centroids,
        mean_intra_distance,
        inter_centroid_distance: inter,
        mean_silhouette: silhouette_sum / samples as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let a = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for (k, val) in vals.iter().enumerate() {
            let col: Vec<f64> = (0..3).map(|r| vecs.get(r, k)).collect();
            let av: Vec<f64> = (0..3).map(|r| (0..3).map(|c| a.get(r, c) * col[c]).sum()).collect();
            for (x, y) in av.iter().zip(&col) {
                assert!((x - val * y).abs() < 1e-10);
            }
        }
        let trace = 8.0;
        assert!((vals.iter().sum::<f64>() - trace).abs() < 1e-10);
    }

    #[test]
    fn identical_points_project_to_zero() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 4]).unwrap();
        let p = pca_project(&m, 2).unwrap();
        assert!(p.coordinates.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(p.explained_variance, vec![0.0, 0.0]);
    }

    #[test]
    fn pca_usage_errors() {
        assert!(matches!(pca_project(&Matrix::zeros(1, 3), 2), Err(Error::Usage(_))));
        assert!(matches!(pca_project(&Matrix::zeros(3, 2), 3), Err(Error::Usage(_))));
    }

    #[test]
    fn occupancy_needs_two_verticals() {
        let g = vec![("a".to_string(), Matrix::zeros(3, 2))];
        assert!(matches!(occupancy(&g), Err(Error::Usage(_))));
    }

    #[test]
    fn occupancy_distance_matrix_shape() {
        let g = vec![
            ("a".to_string(), Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap()),
            ("b".to_string(), Matrix::from_rows(&[[5.0, 0.0], [6.0, 0.0]]).unwrap()),
            ("c".to_string(), Matrix::from_rows(&[[0.0, 5.0], [0.0, 6.0]]).unwrap()),
        ];
        let r = occupancy(&g).unwrap();
        for i in 0..3 {
            assert_eq!(r.inter_centroid_distance[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(r.inter_centroid_distance[i][j], r.inter_centroid_distance[j][i]);
            }
        }
        assert_eq!(r.mean_intra_distance, vec![1.0, 1.0, 1.0]);
        assert!((r.inter_centroid_distance[0][1] - 5.0).abs() < 1e-12);
        assert!(r.mean_silhouette > 0.5 && r.mean_silhouette <= 1.0);
    }
}
