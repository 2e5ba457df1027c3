use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DEFAULT_SPLITS: usize = 10;
const ROW_SUM_TOL: f64 = 1e-5;

/// Mean and population standard deviation over splits of
/// `exp(E_x KL(p(y|x) || p(y)))`, where `p(y)` is the split's marginal.
///
/// Rows of `probs` are class distributions. The split count is capped at
/// the number of rows; consecutive rows form each split.
pub fn inception_score(probs: &DMatrix<f64>, splits: usize) -> Result<(f64, f64)> {
    let n = probs.nrows();
    if n == 0 || probs.ncols() == 0 {
        return Err(Error::Invalid("inception score of an empty probability matrix".into()));
    }
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid(format!("inception score: row {i} has a negative or non-finite entry")));
        }
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid(format!("inception score: row {i} sums to {s}, not 1")));
        }
    }
    let k = splits.clamp(1, n);
    let mut scores = Vec::with_capacity(k);
    for s in 0..k {
        let (lo, hi) = (s * n / k, (s + 1) * n / k);
        let part = probs.rows(lo, hi - lo);
        let marginal = part.row_mean();
        let mut kl = 0.0;
        for row in part.row_iter() {
            for (p, q) in row.iter().zip(marginal.iter()) {
                if *p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
        }
        scores.push((kl / (hi - lo) as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / k as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64;
    Ok((mean, var.sqrt()))
}
