use std::collections::BTreeMap;

use super::{LossResult, ViewPairBatch};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows_backward, l2_normalize_rows_with_norms, lse_slice, Matrix};

/// Normalized-temperature cross-entropy over a batch of positive pairs.
///
/// Both views are stacked into `2N` rows and L2-normalized, so similarities
/// are dot products. Anchor `i` has its counterpart in the other view as
/// positive and all `2N − 1` non-self rows in the denominator. The returned
/// value is the mean over the `2N` anchors; gradients are `z1` and `z2`.
pub fn nt_xent_loss(batch: &ViewPairBatch, tau: f64) -> Result<LossResult> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let n = batch.len();
    let two_n = 2 * n;
    let stacked = Matrix::vstack(&[batch.z1(), batch.z2()])?;
    let (y, norms) = l2_normalize_rows_with_norms(&stacked)?;
    let sim = y.matmul_t(&y)?.scale(1.0 / tau);

    let mut value = 0.0;
    // d loss / d sim, diagonal stays zero
    let mut dsim = Matrix::zeros(two_n, two_n);
    let mut others = Vec::with_capacity(two_n - 1);
    for i in 0..two_n {
        let pos = (i + n) % two_n;
        others.clear();
        others.extend((0..two_n).filter(|&k| k != i).map(|k| sim.get(i, k)));
        let lse = lse_slice(&others);
        value += lse - sim.get(i, pos);
        for k in (0..two_n).filter(|&k| k != i) {
            let soft = (sim.get(i, k) - lse).exp();
            let target = if k == pos { 1.0 } else { 0.0 };
            dsim.set(i, k, (soft - target) / two_n as f64);
        }
    }
    value /= two_n as f64;

    // sim = Y Yᵀ / tau  =>  dY = (dS + dSᵀ) Y / tau
    let sym = dsim.add(&dsim.transpose())?;
    let dy = sym.matmul(&y)?.scale(1.0 / tau);
    let dz = l2_normalize_rows_backward(&y, &norms, &dy);

    let d = batch.dim();
    let (top, bottom) = dz.data().split_at(n * d);
    let mut grads = BTreeMap::new();
    grads.insert("z1".to_string(), Matrix::from_raw(n, d, top.to_vec()));
    grads.insert("z2".to_string(), Matrix::from_raw(n, d, bottom.to_vec()));
    Ok(LossResult { value, grads })
}
