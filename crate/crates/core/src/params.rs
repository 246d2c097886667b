//! A uniform view over the trainable tensors of any model, used by the
//! optimizers, the EMA teacher update, gradient accumulation and checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name and 2-D shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: [usize; 2],
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: [rows, cols],
        }
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything made of named real tensors. Gradients of a model are stored in
/// a value of the same type, so the two enumerate identical tensor lists.
pub trait Parameters {
    fn specs(&self) -> Vec<TensorSpec>;
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All scalars concatenated in declaration order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn set_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Fails unless both parameter sets enumerate the same names and shapes.
pub fn check_compatible(a: &impl Parameters, b: &impl Parameters) -> Result<()> {
    let (sa, sb) = (a.specs(), b.specs());
    if sa != sb {
        return Err(Error::ShapeMismatch(format!(
            "parameter sets differ: {} tensors vs {}",
            sa.len(),
            sb.len()
        )));
    }
    Ok(())
}

/// `params += alpha * other`, tensor by tensor.
pub fn axpy<P: Parameters>(params: &mut P, alpha: f64, other: &P) -> Result<()> {
    check_compatible(params, other)?;
    for (p, o) in params.tensors_mut().into_iter().zip(other.tensors()) {
        for (x, y) in p.iter_mut().zip(o) {
            *x += alpha * y;
        }
    }
    Ok(())
}

/// Exponential moving average: every scalar becomes `m·teacher + (1−m)·student`.
pub fn ema_update<P: Parameters>(teacher: &mut P, student: &P, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidParameter(format!(
            "EMA momentum must lie in [0, 1], got {m}"
        )));
    }
    check_compatible(teacher, student)?;
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (x, y) in t.iter_mut().zip(s) {
            *x = m * *x + (1.0 - m) * y;
        }
    }
    Ok(())
}

/// Rounds every scalar to the nearest `f32`, the precision of checkpoints.
pub fn round_to_f32(p: &mut impl Parameters) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
}

/// Hex SHA-256 over names, shapes and the exact bit patterns of all scalars.
pub fn param_hash(p: &impl Parameters) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (spec, t) in p.specs().iter().zip(p.tensors()) {
        h.update(spec.name.as_bytes());
        h.update((spec.shape[0] as u64).to_le_bytes());
        h.update((spec.shape[1] as u64).to_le_bytes());
        for v in t {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
