//! Cluster-robust sandwich covariance, one- or two-way.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{Factor, FitError};

/// Covariance plus the number of negative eigenvalues zeroed to restore
/// positive semi-definiteness.
#[derive(Debug, Clone)]
pub struct ClusteredCovariance {
    pub matrix: DMatrix<f64>,
    pub repaired_eigenvalues: usize,
    pub cluster_counts: Vec<usize>,
}

/// `G / (G - 1) * Σ_g s_g s_g'` where `s_g` sums the score rows of cluster `g`.
fn meat(scores: &DMatrix<f64>, codes: &[u32], n_clusters: usize) -> DMatrix<f64> {
    let k = scores.ncols();
    let mut sums = DMatrix::<f64>::zeros(n_clusters, k);
    for (i, &c) in codes.iter().enumerate() {
        for j in 0..k {
            sums[(c as usize, j)] += scores[(i, j)];
        }
    }
    let g = n_clusters as f64;
    sums.transpose() * &sums * (g / (g - 1.0))
}

/// Codes for the intersection of two cluster dimensions.
fn intersect(a: &Factor, b: &Factor) -> (Vec<u32>, usize) {
    let mut ids: HashMap<(u32, u32), u32> = HashMap::new();
    let codes = a
        .codes
        .iter()
        .zip(&b.codes)
        .map(|(&x, &y)| {
            let next = ids.len() as u32;
            *ids.entry((x, y)).or_insert(next)
        })
        .collect();
    (codes, ids.len())
}

/// Sandwich `B⁻¹ M B⁻¹` with
/// `M = M_A + M_B − M_{A∩B}` for two dimensions, `M_A` for one, and the
/// heteroskedasticity-robust meat (every row its own cluster) for none.
/// `bread` is the Hessian `X̃'WX̃`, `scores` holds one row per observation.
pub fn two_way_clustered_covariance(
    bread: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    clusters: &[&Factor],
) -> Result<ClusteredCovariance, FitError> {
    let n = scores.nrows();
    for f in clusters {
        if f.n_levels() < 2 {
            return Err(FitError::SingleCluster(f.name.clone()));
        }
    }
    let (m, counts) = match clusters {
        [] => {
            let codes: Vec<u32> = (0..n as u32).collect();
            (meat(scores, &codes, n), vec![n])
        }
        [a] => (meat(scores, &a.codes, a.n_levels()), vec![a.n_levels()]),
        [a, b] => {
            let (ab, g_ab) = intersect(a, b);
            let mut m = meat(scores, &a.codes, a.n_levels()) + meat(scores, &b.codes, b.n_levels());
            if g_ab > 1 {
                m -= meat(scores, &ab, g_ab);
            }
            (m, vec![a.n_levels(), b.n_levels()])
        }
        _ => return Err(FitError::Spec("at most two cluster dimensions".into())),
    };
    let inv = bread
        .clone()
        .cholesky()
        .ok_or_else(|| FitError::Numerical("Hessian is not positive definite".into()))?
        .inverse();
    let v = &inv * m * &inv;
    let v = (&v + v.transpose()) * 0.5;
    let (matrix, repaired) = repair_psd(v);
    Ok(ClusteredCovariance {
        matrix,
        repaired_eigenvalues: repaired,
        cluster_counts: counts,
    })
}

/// Zeroes negative eigenvalues of a symmetric matrix.
pub fn repair_psd(v: DMatrix<f64>) -> (DMatrix<f64>, usize) {
    if v.nrows() == 0 {
        return (v, 0);
    }
    let eig = SymmetricEigen::new(v.clone());
    let negative = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    if negative == 0 {
        return (v, 0);
    }
    let mut vals = eig.eigenvalues.clone();
    vals.iter_mut().for_each(|l| *l = l.max(0.0));
    let q = &eig.eigenvectors;
    let fixed = q * DMatrix::from_diagonal(&vals) * q.transpose();
    ((&fixed + fixed.transpose()) * 0.5, negative)
}
