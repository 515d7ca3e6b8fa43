//! Sparse spatial weight matrices.

use serde::{Deserialize, Serialize};

use super::SpatialError;

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Haversine distance between two (lat, lon) points in degrees.
pub fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WeightScheme {
    /// k nearest neighbours, symmetrized by taking the max of `w_ij` and `w_ji`.
    Knn { k: usize },
    /// `1 / d_ij` for pairs closer than `cutoff_km`.
    InverseDistance { cutoff_km: f64 },
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme::Knn { k: 8 }
    }
}

/// Row-sparse weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: Vec<Vec<(usize, f64)>>,
    total: f64,
}

impl WeightMatrix {
    /// Build from explicit rows. Diagonal entries are rejected.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self, SpatialError> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|&(j, w)| j == i || j >= n || !w.is_finite() || w < 0.0) {
                return Err(SpatialError::DegenerateGeometry(format!("invalid entry in row {i}")));
            }
        }
        let total = rows.iter().flatten().map(|e| e.1).sum();
        Ok(Self { rows, total })
    }

    /// Binary rook contiguity on a `rows x cols` grid, cells numbered row-major.
    pub fn rook_grid(n_rows: usize, n_cols: usize) -> Self {
        let mut rows = vec![Vec::new(); n_rows * n_cols];
        for r in 0..n_rows {
            for c in 0..n_cols {
                let i = r * n_cols + c;
                if r > 0 {
                    rows[i].push((i - n_cols, 1.0));
                }
                if c > 0 {
                    rows[i].push((i - 1, 1.0));
                }
                if c + 1 < n_cols {
                    rows[i].push((i + 1, 1.0));
                }
                if r + 1 < n_rows {
                    rows[i].push((i + n_cols, 1.0));
                }
            }
        }
        Self::from_rows(rows).expect("grid weights are valid")
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Sum of all weights.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Dense copy, for testing and small problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut d = vec![vec![0.0; n]; n];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                d[i][j] += w;
            }
        }
        d
    }

    /// Scale every row with positive mass to sum to one.
    pub fn row_standardized(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let s: f64 = r.iter().map(|e| e.1).sum();
                if s > 0.0 {
                    r.iter().map(|&(j, w)| (j, w / s)).collect()
                } else {
                    r.clone()
                }
            })
            .collect();
        Self::from_rows(rows).expect("scaling keeps weights valid")
    }
}

/// Weights over region centroids given as (lat, lon).
pub fn build_weights(
    centroids: &[(f64, f64)],
    scheme: WeightScheme,
    row_standardize: bool,
) -> Result<WeightMatrix, SpatialError> {
    let n = centroids.len();
    if n < 2 {
        return Err(SpatialError::DegenerateGeometry("need at least two regions".into()));
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = great_circle_km(centroids[i], centroids[j]);
            if d == 0.0 {
                return Err(SpatialError::DegenerateGeometry(format!("regions {i} and {j} share a centroid")));
            }
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut dense = vec![vec![0.0; n]; n];
    match scheme {
        WeightScheme::Knn { k } => {
            if k == 0 || k >= n {
                return Err(SpatialError::DegenerateGeometry(format!("k = {k} with {n} regions")));
            }
            for i in 0..n {
                let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                order.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
                for &j in &order[..k] {
                    dense[i][j] = 1.0;
                    dense[j][i] = 1.0;
                }
            }
        }
        WeightScheme::InverseDistance { cutoff_km } => {
            if !(cutoff_km > 0.0) {
                return Err(SpatialError::DegenerateGeometry("cutoff must be positive".into()));
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j && dist[i][j] <= cutoff_km {
                        dense[i][j] = 1.0 / dist[i][j];
                    }
                }
            }
        }
    }
    let rows: Vec<Vec<(usize, f64)>> =
        dense.iter().map(|r| r.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(j, &w)| (j, w)).collect()).collect();
    if rows.iter().all(|r| r.is_empty()) {
        return Err(SpatialError::DegenerateGeometry("no region has a neighbour".into()));
    }
    let w = WeightMatrix::from_rows(rows)?;
    Ok(if row_standardize { w.row_standardized() } else { w })
}
