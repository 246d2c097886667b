use crate::error::{Error, Result};
use crate::linalg::{lse_slice, Matrix};

/// Balanced soft assignment of `N` samples to `J` prototypes. Rows sum to 1,
/// columns to `N / J` (up to the Sinkhorn tolerance). Codes are targets only;
/// no gradient ever flows through them.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    q: Matrix,
}

impl CodeMatrix {
    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn into_matrix(self) -> Matrix {
        self.q
    }

    /// Largest absolute deviation of any row sum from 1.
    pub fn row_violation(&self) -> f64 {
        self.q
            .row_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute deviation of any column sum from `N / J`.
    pub fn col_violation(&self) -> f64 {
        let target = self.q.rows() as f64 / self.q.cols() as f64;
        self.q
            .col_sums()
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_violation(&self) -> f64 {
        self.row_violation().max(self.col_violation())
    }
}

/// Sinkhorn-Knopp codes for an `N × J` score matrix.
///
/// Starts from `exp(scores / epsilon)` and alternates column scaling (to
/// `N / J`) and row scaling (to 1) for `iters` rounds, then normalizes rows.
/// The iteration runs in the log domain, which is the same fixed sequence of
/// rescalings without overflow for small `epsilon`.
pub fn sinkhorn_codes(scores: &Matrix, epsilon: f64, iters: usize) -> Result<CodeMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sinkhorn epsilon must be positive, got {epsilon}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("sinkhorn score matrix".into()));
    }
    if iters == 0 {
        return Err(Error::InvalidParameter("sinkhorn needs at least one round".into()));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("sinkhorn scores".into()));
    }
    let (n, j) = scores.shape();
    let log_col_target = (n as f64 / j as f64).ln();
    let mut logq = scores.scale(1.0 / epsilon);
    let mut column = vec![0.0; n];
    for _ in 0..iters {
        for c in 0..j {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = logq.get(r, c);
            }
            let shift = lse_slice(&column) - log_col_target;
            for r in 0..n {
                let v = logq.get(r, c) - shift;
                logq.set(r, c, v);
            }
        }
        for r in 0..n {
            let shift = lse_slice(logq.row(r));
            logq.row_mut(r).iter_mut().for_each(|v| *v -= shift);
        }
    }
    let mut q = logq.map(f64::exp);
    for r in 0..n {
        let s: f64 = q.row(r).iter().sum();
        q.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    Ok(CodeMatrix { q })
}
