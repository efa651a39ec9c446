use nalgebra::{DMatrix, SymmetricEigen};

use super::EvalError;

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// n x k projected coordinates.
    pub coords: DMatrix<f64>,
    /// d x k principal directions, one per column.
    pub components: DMatrix<f64>,
    pub mean: Vec<f64>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// `explained_variance` divided by the total variance.
    pub explained_variance_ratio: Vec<f64>,
}

/// Projects mean-centred rows onto the top `k` eigenvectors of their
/// covariance. Each direction is signed so that its first component with
/// magnitude above 1e-12 is positive.
pub fn pca_project(rows: &[&[f32]], k: usize) -> Result<PcaResult, EvalError> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if k == 0 || k > n.min(d) {
        return Err(EvalError::TooManyComponents { k, n, d });
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
    let mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = x.tr_mul(&x) / n as f64;
    let total: f64 = cov.diagonal().sum();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = DMatrix::zeros(d, k);
    let mut explained_variance = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        components.set_column(c, &v);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let coords = &x * &components;
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaResult {
        coords,
        components,
        mean,
        explained_variance,
        explained_variance_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rows_of(m: &[Vec<f32>]) -> Vec<&[f32]> {
        m.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn rejects_too_many_components() {
        let data = vec![vec![1.0f32, 2.0], vec![3.0, 4.0]];
        assert!(pca_project(&rows_of(&data), 3).is_err());
        assert!(pca_project(&rows_of(&data), 0).is_err());
        assert!(pca_project(&rows_of(&data), 2).is_ok());
    }

    #[test]
    fn exact_subspace_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // integer basis and coefficients keep every f32 entry exact
        let basis: Vec<Vec<i32>> = (0..3)
            .map(|_| (0..10).map(|_| rng.random_range(-3..=3)).collect())
            .collect();
        let data: Vec<Vec<f32>> = (0..50)
            .map(|_| {
                let a: Vec<i32> = (0..3).map(|_| rng.random_range(-5..=5)).collect();
                (0..10)
                    .map(|j| (1 + (0..3).map(|b| a[b] * basis[b][j]).sum::<i32>()) as f32)
                    .collect()
            })
            .collect();
        let p = pca_project(&rows_of(&data), 3).unwrap();
        let recon = &p.coords * p.components.transpose();
        let mut worst = 0.0f64;
        for i in 0..50 {
            for j in 0..10 {
                let orig = data[i][j] as f64 - p.mean[j];
                worst = worst.max((recon[(i, j)] - orig).abs());
            }
        }
        assert!(worst < 1e-8, "{worst}");
        let s: f64 = p.explained_variance_ratio.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_noise_shares_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 4;
        let n = 20_000;
        let data: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let p = pca_project(&rows_of(&data), d).unwrap();
        // sorted sample eigenvalues spread about 2 * sqrt(d / n) around the
        // true variance, so the shares move by that much over d
        let tol = 3.0 * 2.0 * (d as f64 / n as f64).sqrt() / d as f64;
        for r in &p.explained_variance_ratio {
            assert!((r - 0.25).abs() < tol, "{r} vs {tol}");
        }
        for w in p.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn full_rank_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let p = pca_project(&rows_of(&data), 5).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let orig: f64 = (0..5)
                    .map(|c| (data[i][c] as f64 - data[j][c] as f64).powi(2))
                    .sum();
                let proj: f64 = (0..5)
                    .map(|c| (p.coords[(i, c)] - p.coords[(j, c)]).powi(2))
                    .sum();
                assert!((orig.sqrt() - proj.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sign_convention_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data: Vec<Vec<f32>> = (0..200)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                vec![(-3.0 * a) as f32, b as f32, (0.1 * a) as f32]
            })
            .collect();
        let p = pca_project(&rows_of(&data), 3).unwrap();
        for c in 0..3 {
            let first = p
                .components
                .column(c)
                .iter()
                .copied()
                .find(|x| x.abs() > 1e-12)
                .unwrap();
            assert!(first > 0.0);
        }
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!(p.explained_variance[1] >= p.explained_variance[2]);
    }
}
