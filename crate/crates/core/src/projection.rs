//! 2-D layout of per-sample NERO vectors for the DR scatterplot.
//!
//! PCA is computed with a one-sided Jacobi SVD of the column-centered
//! matrix. Missing (NaN) entries are imputed with their column mean first.
//! Sign convention: in each principal direction, the entry of largest
//! magnitude is positive (ties go to the lowest index).
//!
//! Other layouts (t-SNE, UMAP, ...) can be computed elsewhere and merged in
//! through an external projection file.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::NeroRecord;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("projection needs at least one row and one column")]
    Empty,
    #[error("row {row} has {got} values, expected {want}")]
    Ragged { row: usize, got: usize, want: usize },
    #[error("column {0} has no finite values")]
    AllNanColumn(usize),
    #[error("external projection has no point for sample {0:?}")]
    MissingPoint(String),
    #[error("reading external projection: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing external projection: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Mean,
    Variance,
}

impl std::str::FromStr for ColorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(ColorMode::Mean),
            "variance" => Ok(ColorMode::Variance),
            other => Err(format!("unknown color mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrLayout {
    pub method: String,
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each of the two components.
    pub explained_variance: [f64; 2],
    pub coloring: ColorMode,
}

/// Principal directions and singular values of a centered matrix.
struct Svd {
    singular: Vec<f64>,
    /// Right singular vectors, one per entry, in descending singular order.
    directions: Vec<Vec<f64>>,
}

/// One-sided Jacobi: orthogonalizes the columns of `a` (rows × cols) by plane
/// rotations accumulated into `V`; on convergence `A V = U Σ`.
fn jacobi_svd(mut a: Vec<Vec<f64>>, cols: usize) -> Svd {
    let rows = a.len();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|i| (0..cols).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in &a {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    Svd {
        singular: order.iter().map(|&j| norms[j]).collect(),
        directions: order
            .iter()
            .map(|&j| (0..cols).map(|i| v[i][j]).collect())
            .collect(),
    }
}

/// Flips `dir` so that its largest-magnitude entry is positive.
pub fn orient(dir: &mut [f64]) {
    let mut best = 0;
    for (i, x) in dir.iter().enumerate() {
        if x.abs() > dir[best].abs() {
            best = i;
        }
    }
    if dir.get(best).is_some_and(|x| *x < 0.0) {
        dir.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Replaces NaN entries with their column mean and centers every column.
pub fn impute_and_center(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ProjectionError> {
    let s = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if s == 0 || n == 0 {
        return Err(ProjectionError::Empty);
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(ProjectionError::Ragged {
                row: i,
                got: r.len(),
                want: n,
            });
        }
    }
    let mut out = rows.to_vec();
    for j in 0..n {
        let finite: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
        if finite.is_empty() {
            return Err(ProjectionError::AllNanColumn(j));
        }
        let fill = finite.iter().sum::<f64>() / finite.len() as f64;
        for r in out.iter_mut() {
            if r[j].is_nan() {
                r[j] = fill;
            }
        }
        let mean = out.iter().map(|r| r[j]).sum::<f64>() / s as f64;
        for r in out.iter_mut() {
            r[j] -= mean;
        }
    }
    Ok(out)
}

/// Projects the rows of `matrix` onto their top two principal directions.
pub fn pca_project(matrix: &[Vec<f64>]) -> Result<DrLayout, ProjectionError> {
    let centered = impute_and_center(matrix)?;
    let (s, n) = (centered.len(), centered[0].len());
    let svd = jacobi_svd(centered.clone(), n);
    let total: f64 = svd.singular.iter().map(|x| x * x).sum();
    let top = svd.singular.first().copied().unwrap_or(0.0);
    // Centered data has rank at most S - 1.
    let usable = (s.saturating_sub(1)).min(n).min(2);
    let tol = top * 1e-10;

    let mut coords = vec![[0.0; 2]; s];
    let mut explained = [0.0; 2];
    for k in 0..usable {
        let sigma = svd.singular[k];
        if sigma <= tol || sigma == 0.0 {
            continue;
        }
        let mut dir = svd.directions[k].clone();
        orient(&mut dir);
        for (c, row) in coords.iter_mut().zip(&centered) {
            c[k] = row.iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
        explained[k] = sigma * sigma / total;
    }
    Ok(DrLayout {
        method: "pca".into(),
        coords,
        explained_variance: explained,
        coloring: ColorMode::Mean,
    })
}

/// Per-sample color values read from the records' stored stats.
pub fn color_values(records: &[NeroRecord], mode: ColorMode) -> Vec<f64> {
    records
        .iter()
        .map(|r| match mode {
            ColorMode::Mean => r.mean,
            ColorMode::Variance => r.variance,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPoint {
    pub id: String,
    pub u: f64,
    pub v: f64,
}

/// Externally computed layout: `{"method": "umap", "points": [{"id", "u", "v"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalProjection {
    pub method: String,
    pub points: Vec<ExternalPoint>,
}

impl ExternalProjection {
    pub fn load(path: &Path) -> Result<ExternalProjection, ProjectionError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Orders the points to match `sample_ids`.
    pub fn layout_for(&self, sample_ids: &[&str]) -> Result<DrLayout, ProjectionError> {
        let by_id: HashMap<&str, [f64; 2]> = self
            .points
            .iter()
            .map(|p| (p.id.as_str(), [p.u, p.v]))
            .collect();
        let coords = sample_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| ProjectionError::MissingPoint(id.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(DrLayout {
            method: self.method.clone(),
            coords,
            explained_variance: [0.0, 0.0],
            coloring: ColorMode::Mean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense covariance eigendecomposition, independent of the Jacobi SVD.
    fn oracle(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
        let centered = impute_and_center(rows).unwrap();
        let (s, n) = (centered.len(), centered[0].len());
        let x = DMatrix::from_fn(s, n, |i, j| centered[i][j]);
        let cov = x.transpose() * &x / s as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut out = vec![[0.0; 2]; s];
        for k in 0..2.min(n) {
            let mut dir: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            orient(&mut dir);
            for i in 0..s {
                out[i][k] = (0..n).map(|j| centered[i][j] * dir[j]).sum();
            }
        }
        out
    }

    fn random_matrix(rng: &mut ChaCha8Rng, s: usize, n: usize) -> Vec<Vec<f64>> {
        (0..s)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identical_rows_collapse_to_origin() {
        let rows = vec![vec![0.3, 0.7, 0.1]; 5];
        let dr = pca_project(&rows).unwrap();
        assert!(dr.coords.iter().all(|c| *c == [0.0, 0.0]));
        assert_eq!(dr.explained_variance, [0.0, 0.0]);
    }

    #[test]
    fn rank_one_rows_have_zero_second_coordinate() {
        let dir = [0.2, -0.5, 0.9, 0.1];
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| dir.iter().map(|d| 1.0 + d * (i as f64 - 2.5)).collect())
            .collect();
        let dr = pca_project(&rows).unwrap();
        for c in &dr.coords {
            assert!(c[1].abs() < 1e-9);
        }
        assert!((dr.explained_variance[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_covariance_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = random_matrix(&mut rng, 5, 4);
        let got = pca_project(&rows).unwrap();
        let want = oracle(&rows);
        for (a, b) in got.coords.iter().zip(&want) {
            assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8, "{a:?} vs {b:?}");
        }
        assert!(got.explained_variance[0] >= got.explained_variance[1]);
    }

    #[test]
    fn tiny_inputs_zero_fill() {
        let one = pca_project(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(one.coords, vec![[0.0, 0.0]]);
        let two = pca_project(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(two.coords[0][1], 0.0);
        assert!((two.coords[0][0] + two.coords[1][0]).abs() < 1e-12);
        let single_col = pca_project(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        assert!(single_col.coords.iter().all(|c| c[1] == 0.0));
    }

    #[test]
    fn nan_imputation_and_errors() {
        let rows = vec![vec![1.0, f64::NAN], vec![3.0, 2.0], vec![5.0, 4.0]];
        let imputed = impute_and_center(&rows).unwrap();
        assert_eq!(imputed[0][1], 0.0);
        assert!(matches!(
            pca_project(&[vec![1.0, f64::NAN], vec![2.0, f64::NAN]]),
            Err(ProjectionError::AllNanColumn(1))
        ));
        assert!(matches!(pca_project(&[]), Err(ProjectionError::Empty)));
        assert!(matches!(
            pca_project(&[vec![1.0], vec![1.0, 2.0]]),
            Err(ProjectionError::Ragged { .. })
        ));
    }

    #[test]
    fn external_layout_orders_by_sample() {
        let ext = ExternalProjection {
            method: "umap".into(),
            points: vec![
                ExternalPoint { id: "b".into(), u: 2.0, v: 3.0 },
                ExternalPoint { id: "a".into(), u: 0.5, v: -1.0 },
            ],
        };
        let dr = ext.layout_for(&["a", "b"]).unwrap();
        assert_eq!(dr.coords, vec![[0.5, -1.0], [2.0, 3.0]]);
        assert_eq!(dr.method, "umap");
        assert!(ext.layout_for(&["c"]).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariant(seed in any::<u64>(), shift in prop::collection::vec(-5.0f64..5.0, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_matrix(&mut rng, 6, 4);
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let a = pca_project(&rows).unwrap();
            let b = pca_project(&moved).unwrap();
            for (p, q) in a.coords.iter().zip(&b.coords) {
                prop_assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn projection_contracts_distances(seed in any::<u64>(), s in 2usize..9, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_matrix(&mut rng, s, n);
            let dr = pca_project(&rows).unwrap();
            for i in 0..s {
                for j in 0..s {
                    let orig: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let low = ((dr.coords[i][0] - dr.coords[j][0]).powi(2) + (dr.coords[i][1] - dr.coords[j][1]).powi(2)).sqrt();
                    prop_assert!(low <= orig + 1e-9);
                }
            }
            prop_assert!(dr.explained_variance[0] >= dr.explained_variance[1]);
            prop_assert!(dr.explained_variance.iter().all(|f| (0.0..=1.0 + 1e-12).contains(f)));
        }

        #[test]
        fn deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_matrix(&mut rng, 6, 5);
            prop_assert_eq!(pca_project(&rows).unwrap(), pca_project(&rows).unwrap());
        }
    }
}
