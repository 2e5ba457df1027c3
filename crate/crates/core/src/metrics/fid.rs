use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as numerical noise and clipped to 0.
pub const NEG_EIG_TOL: f64 = -1e-8;

/// Mean and unbiased (`1 / (N - 1)`) covariance of the rows of `feats`.
pub fn moments(feats: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("fid needs at least 2 samples, got {n}")));
    }
    if feats.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { phase: "fid".into(), what: "feature".into() });
    }
    let mu = feats.row_mean().transpose();
    let mut centred = feats.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < NEG_EIG_TOL * m.norm().max(1.0) {
            return Err(Error::Invalid(format!("fid: {what} has eigenvalue {v}, not positive semidefinite")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the matrix
/// square root taken as that of the symmetric `S_a^(1/2) S_b S_a^(1/2)`.
pub fn fid_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Invalid("fid: moment dimensions disagree".into()));
    }
    let sa = psd_sqrt(cov_a, "covariance A")?;
    let inner = &sa * cov_b * &sa;
    let cross = psd_sqrt(&inner, "cross term")?;
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// Frechet distance between Gaussian fits of two feature sets (`N x D`, `M x D`).
pub fn fid(feats_a: &DMatrix<f64>, feats_b: &DMatrix<f64>) -> Result<f64> {
    if feats_a.ncols() != feats_b.ncols() {
        return Err(Error::Invalid(format!(
            "fid: feature widths {} and {} differ",
            feats_a.ncols(),
            feats_b.ncols()
        )));
    }
    let (ma, ca) = moments(feats_a)?;
    let (mb, cb) = moments(feats_b)?;
    fid_from_moments(&ma, &ca, &mb, &cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero_and_symmetric() {
        let a = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 + (i as f64).sin());
        let b = DMatrix::from_fn(25, 3, |i, j| ((i * 5 + j) % 7) as f64 / 3.0);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let one = DMatrix::<f64>::zeros(1, 3);
        let two = DMatrix::<f64>::zeros(2, 3);
        assert!(fid(&one, &two).is_err());
        let mut bad = DMatrix::<f64>::zeros(3, 3);
        bad[(0, 0)] = f64::NAN;
        assert!(fid(&bad, &two).is_err());
        assert!(fid(&two, &DMatrix::zeros(2, 4)).is_err());
    }
}
