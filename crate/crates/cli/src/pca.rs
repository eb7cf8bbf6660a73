//! Two-component PCA, the built-in fallback for plotting embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};

/// Projects the rows of `x` onto its two leading principal axes. Each axis
/// is signed so that its largest-magnitude loading is positive.
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let k = d.min(2);
    if n == 0 || k == 0 {
        return Array2::zeros((n, 2));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let m = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = m.transpose() * &m / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Array2::zeros((n, 2));
    for (j, &axis) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(axis).into_owned();
        let peak = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if peak < 0.0 {
            v = -v;
        }
        let proj = &m * v;
        for i in 0..n {
            out[[i, j]] = proj[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recovers_dominant_axis() {
        let x = array![[-2.0, 0.1, 0.0], [-1.0, -0.1, 0.0], [1.0, -0.1, 0.0], [2.0, 0.1, 0.0]];
        let p = pca_2d(&x);
        assert_eq!(p.dim(), (4, 2));
        for (got, want) in p.column(0).iter().zip([-2.0, -1.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((p.column(1).mapv(|v| v * v).sum() - 0.04).abs() < 1e-9);
    }

    #[test]
    fn sign_convention_is_stable() {
        let x = array![[1.0, 2.0], [3.0, 1.0], [0.0, -1.0], [-4.0, 0.5]];
        let flipped = x.mapv(|v| -v);
        let (a, b) = (pca_2d(&x), pca_2d(&flipped));
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u.abs() - v.abs()).abs() < 1e-9);
        }
    }
}
