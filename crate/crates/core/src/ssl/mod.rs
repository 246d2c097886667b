//! Self-supervised objectives: contrastive (NT-Xent), swapped prediction
//! against prototypes with Sinkhorn codes, and self-distillation with a
//! centered, sharpened teacher.

mod dino;
mod ntxent;
mod sinkhorn;
mod swav;

use std::collections::BTreeMap;

pub use dino::{
    dino_loss, dino_multicrop_loss, ema_momentum_at, teacher_temperature, TeacherConfig, TeacherState,
};
pub use ntxent::nt_xent_loss;
pub use sinkhorn::{sinkhorn_codes, CodeMatrix};
pub use swav::{swav_loss, swav_loss_with_codes, swav_multicrop_loss, PrototypeBank};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Default contrastive temperature.
pub const NT_XENT_TAU: f64 = 0.1;
/// Default Sinkhorn entropic regularization.
pub const SINKHORN_EPSILON: f64 = 0.05;
/// Default Sinkhorn rounds.
pub const SINKHORN_ITERS: usize = 3;
/// Default number of SwAV prototypes.
pub const SWAV_PROTOTYPES: usize = 300;

/// Two augmented views of the same `N` instances, already encoded.
#[derive(Debug, Clone)]
pub struct ViewPairBatch {
    z1: Matrix,
    z2: Matrix,
}

impl ViewPairBatch {
    pub fn new(z1: Matrix, z2: Matrix) -> Result<Self> {
        if z1.shape() != z2.shape() {
            return Err(Error::ShapeMismatch(format!(
                "views have shapes {:?} and {:?}",
                z1.shape(),
                z2.shape()
            )));
        }
        if z1.rows() == 0 {
            return Err(Error::Empty("view batch has no rows".into()));
        }
        Ok(Self { z1, z2 })
    }

    pub fn z1(&self) -> &Matrix {
        &self.z1
    }

    pub fn z2(&self) -> &Matrix {
        &self.z2
    }

    pub fn len(&self) -> usize {
        self.z1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z1.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z1.cols()
    }

    pub fn swapped(&self) -> Self {
        Self {
            z1: self.z2.clone(),
            z2: self.z1.clone(),
        }
    }
}

/// Scalar loss plus gradients keyed by input name; each gradient has the
/// shape of the input it differentiates.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<String, Matrix>,
}

impl LossResult {
    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub(crate) fn take(&mut self, name: &str) -> Matrix {
        self.grads
            .remove(name)
            .unwrap_or_else(|| panic!("loss result has no gradient named {name}"))
    }
}

/// Default multi-crop pairing: every global view acts as the target for every
/// other view (global or local). Returns `(target_view, predicting_view)`.
pub fn multicrop_pairs(n_global: usize, n_local: usize) -> Vec<(usize, usize)> {
    let total = n_global + n_local;
    let mut pairs = Vec::new();
    for t in 0..n_global {
        for s in 0..total {
            if s != t {
                pairs.push((t, s));
            }
        }
    }
    pairs
}

pub(crate) fn check_pairs(pairs: &[(usize, usize)], n_views: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no view pairs given".into()));
    }
    for &(t, s) in pairs {
        if t >= n_views || s >= n_views {
            return Err(Error::InvalidParameter(format!(
                "view pair ({t}, {s}) out of range for {n_views} views"
            )));
        }
    }
    Ok(())
}
