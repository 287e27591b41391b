use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Top-two principal axes of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-length axes; each has its largest-magnitude entry positive.
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues (divided by N − 1) for the two axes.
    pub variances: [f64; 2],
    /// `N×2` projections of the centered rows, row-major.
    pub projected: Vec<f64>,
}

/// Exact PCA from the eigendecomposition of the sample covariance.
pub fn pca_2d(features: &Tensor) -> Result<Pca> {
    let (n, d) = match *features.shape() {
        [n, d] if n >= 2 && d >= 2 => (n, d),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "PCA needs at least 2 rows and 2 columns, got {:?}",
                features.shape()
            )))
        }
    };
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    let mut centered = x;
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [axis(0), axis(1)];
    let mut projected = Vec::with_capacity(2 * n);
    for i in 0..n {
        for c in &components {
            projected.push(centered.row(i).iter().zip(c).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Pca {
        mean,
        components,
        variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        projected,
    })
}
