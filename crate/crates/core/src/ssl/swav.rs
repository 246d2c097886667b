use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_pairs, sinkhorn_codes, LossResult, ViewPairBatch};
use crate::error::{Error, Result};
use crate::linalg::{
    l2_normalize_rows, l2_normalize_rows_backward, l2_normalize_rows_with_norms, log_softmax_rows,
    Matrix,
};
use crate::params::{Parameters, TensorSpec};

/// Cluster centroids, one unit-norm row per prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    c: Matrix,
}

impl PrototypeBank {
    /// Wraps the given rows after normalizing them to unit norm.
    pub fn new(c: Matrix) -> Result<Self> {
        Ok(Self {
            c: l2_normalize_rows(&c)?,
        })
    }

    /// Gaussian directions normalized onto the sphere.
    pub fn random(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::InvalidParameter("empty prototype bank".into()));
        }
        let c = Matrix::from_fn(count, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::new(c)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            c: Matrix::zeros(self.c.rows(), self.c.cols()),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.c.cols()
    }

    /// Projects every row back onto the unit sphere; call after each update.
    pub fn renormalize(&mut self) -> Result<()> {
        self.c = l2_normalize_rows(&self.c)?;
        Ok(())
    }
}

impl Parameters for PrototypeBank {
    fn specs(&self) -> Vec<TensorSpec> {
        vec![TensorSpec::new("prototypes", self.c.rows(), self.c.cols())]
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.c.data()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.c.data_mut()]
    }
}

fn check_temps(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Scores of normalized embeddings against normalized prototypes.
struct ViewScores {
    zhat: Matrix,
    znorms: Vec<f64>,
    scores: Matrix,
}

fn view_scores(z: &Matrix, chat: &Matrix) -> Result<ViewScores> {
    if z.cols() != chat.cols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs prototype dim {}",
            z.cols(),
            chat.cols()
        )));
    }
    let (zhat, znorms) = l2_normalize_rows_with_norms(z)?;
    let scores = zhat.matmul_t(chat)?;
    Ok(ViewScores {
        zhat,
        znorms,
        scores,
    })
}

/// Computes the swapped-prediction loss for an explicit set of codes, held
/// constant. `codes[v]` must be present for every target view named in
/// `pairs`; each pair `(t, s)` adds `weight · l(z_s, q_t)` where
/// `l(z, q) = −mean_n Σ_j q_nj log p_nj` and `p = softmax(ẑ ĉᵀ / tau)`.
fn swapped_prediction(
    views: &[&Matrix],
    bank: &PrototypeBank,
    codes: &[Option<Matrix>],
    pairs: &[(usize, usize)],
    weight: f64,
    tau: f64,
) -> Result<(f64, Vec<Matrix>, Matrix)> {
    check_temps(tau)?;
    check_pairs(pairs, views.len())?;
    let (chat, cnorms) = l2_normalize_rows_with_norms(bank.matrix())?;
    let scored = views
        .iter()
        .map(|z| view_scores(z, &chat))
        .collect::<Result<Vec<_>>>()?;
    let n = views[0].rows();
    if views.iter().any(|z| z.rows() != n) {
        return Err(Error::ShapeMismatch("views differ in batch size".into()));
    }

    let mut value = 0.0;
    let mut dscores: Vec<Option<Matrix>> = vec![None; views.len()];
    for &(t, s) in pairs {
        let q = codes[t]
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("no codes for view {t}")))?;
        let logp = log_softmax_rows(&scored[s].scores, tau)?;
        let ce: f64 = q.data().iter().zip(logp.data()).map(|(a, b)| a * b).sum();
        value -= weight * ce / n as f64;
        // d/dscores of −Σ q log softmax(scores/tau) = (p − q)/tau, rows of q sum to 1
        let scale = weight / (n as f64 * tau);
        let mut g = logp.map(f64::exp).sub(q)?;
        g.scale_in_place(scale);
        match &mut dscores[s] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
    }

    let mut dchat = Matrix::zeros(chat.rows(), chat.cols());
    let mut dviews = Vec::with_capacity(views.len());
    for (v, sc) in scored.iter().enumerate() {
        match &dscores[v] {
            Some(ds) => {
                dchat.add_assign(&ds.t_matmul(&sc.zhat)?)?;
                let dzhat = ds.matmul(&chat)?;
                dviews.push(l2_normalize_rows_backward(&sc.zhat, &sc.znorms, &dzhat));
            }
            None => dviews.push(Matrix::zeros(views[v].rows(), views[v].cols())),
        }
    }
    let dc = l2_normalize_rows_backward(&chat, &cnorms, &dchat);
    Ok((value, dviews, dc))
}

/// Sinkhorn codes for one view: scores of normalized embeddings against
/// normalized prototypes.
fn codes_for(z: &Matrix, bank: &PrototypeBank, epsilon: f64, iters: usize) -> Result<Matrix> {
    let chat = l2_normalize_rows(bank.matrix())?;
    let sc = view_scores(z, &chat)?;
    Ok(sinkhorn_codes(&sc.scores, epsilon, iters)?.into_matrix())
}

/// Two-view swapped prediction `l(z1, q2) + l(z2, q1)`, each term averaged
/// over the batch. Gradients: `z1`, `z2`, `prototypes`; codes are constants.
pub fn swav_loss(
    batch: &ViewPairBatch,
    bank: &PrototypeBank,
    tau: f64,
    epsilon: f64,
    iters: usize,
) -> Result<LossResult> {
    let q1 = codes_for(batch.z1(), bank, epsilon, iters)?;
    let q2 = codes_for(batch.z2(), bank, epsilon, iters)?;
    swav_loss_with_codes(batch, bank, &q1, &q2, tau)
}

/// [`swav_loss`] with precomputed codes (used to freeze the codes when
/// differentiating numerically).
pub fn swav_loss_with_codes(
    batch: &ViewPairBatch,
    bank: &PrototypeBank,
    q1: &Matrix,
    q2: &Matrix,
    tau: f64,
) -> Result<LossResult> {
    let expected = (batch.len(), bank.len());
    if q1.shape() != expected || q2.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "codes must be {expected:?}, got {:?} and {:?}",
            q1.shape(),
            q2.shape()
        )));
    }
    let codes = [Some(q1.clone()), Some(q2.clone())];
    let (value, mut dviews, dc) = swapped_prediction(
        &[batch.z1(), batch.z2()],
        bank,
        &codes,
        &[(1, 0), (0, 1)],
        1.0,
        tau,
    )?;
    let mut grads = BTreeMap::new();
    let dz2 = dviews.pop().expect("two views");
    let dz1 = dviews.pop().expect("two views");
    grads.insert("z1".to_string(), dz1);
    grads.insert("z2".to_string(), dz2);
    grads.insert("prototypes".to_string(), dc);
    Ok(LossResult { value, grads })
}

/// Multi-crop swapped prediction. Codes come from each target view named in
/// `pairs` (`(target, predictor)`); the value is `2 / |pairs|` times the sum
/// of the per-pair terms, which reduces to [`swav_loss`] for two views with
/// pairs `[(1, 0), (0, 1)]`. Gradients: `view{i}` and `prototypes`.
pub fn swav_multicrop_loss(
    views: &[Matrix],
    bank: &PrototypeBank,
    pairs: &[(usize, usize)],
    tau: f64,
    epsilon: f64,
    iters: usize,
) -> Result<LossResult> {
    check_pairs(pairs, views.len())?;
    let mut codes: Vec<Option<Matrix>> = vec![None; views.len()];
    for &(t, _) in pairs {
        if codes[t].is_none() {
            codes[t] = Some(codes_for(&views[t], bank, epsilon, iters)?);
        }
    }
    let refs: Vec<&Matrix> = views.iter().collect();
    let weight = 2.0 / pairs.len() as f64;
    let (value, dviews, dc) = swapped_prediction(&refs, bank, &codes, pairs, weight, tau)?;
    let mut grads: BTreeMap<String, Matrix> = dviews
        .into_iter()
        .enumerate()
        .map(|(i, g)| (format!("view{i}"), g))
        .collect();
    grads.insert("prototypes".to_string(), dc);
    Ok(LossResult { value, grads })
}
