//! Attention-based multiple instance learning head.
//!
//! Instance embeddings `z` (from the encoder) pass through a reducer `g`
//! to `k′` dimensions, a two-layer scorer produces one raw score per class
//! per instance, and each class column is softmax-normalized over the bag's
//! instances. Row `c` of the pooled bag matrix is the attention-weighted sum
//! of reduced instances for class `c`; an affine scorer per class maps it to
//! the class logit, trained with categorical cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, Mlp, MlpConfig};
use crate::error::{Error, Result};
use crate::linalg::{lse_slice, softmax_into, Matrix, Vector};
use crate::params::{Parameters, TensorSpec};

/// One weakly labelled sample: a set of instances sharing a class label.
pub const INIT_SHRINK: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub label: usize,
    pub instances: Matrix,
    pub instance_ids: Vec<u32>,
}

impl Bag {
    pub fn new(bag_id: impl Into<String>, label: usize, instances: Matrix) -> Result<Self> {
        if instances.rows() == 0 {
            return Err(Error::Empty("bag without instances".into()));
        }
        let instance_ids = (0..instances.rows() as u32).collect();
        Ok(Self {
            bag_id: bag_id.into(),
            label,
            instances,
            instance_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilConfig {
    /// Encoder output width `k`.
    pub k: usize,
    /// Reduced width `k′ < k`.
    pub k_reduced: usize,
    pub attention_hidden: usize,
    pub n_classes: usize,
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_reduced == 0 || self.k_reduced >= self.k {
            return Err(Error::InvalidParameter(format!(
                "reduced width {} must be positive and below {}",
                self.k_reduced, self.k
            )));
        }
        if self.attention_hidden == 0 || self.n_classes < 2 {
            return Err(Error::InvalidParameter(
                "attention width and class count must be positive (≥ 2 classes)".into(),
            ));
        }
        Ok(())
    }

    /// Four affine layers `k → k → k′ → k′`.
    pub fn reducer_config(&self) -> MlpConfig {
        MlpConfig::new(
            vec![self.k, self.k, self.k_reduced, self.k_reduced],
            Activation::Relu,
        )
    }

    /// Two layers `k′ → hidden → C`.
    pub fn attention_config(&self) -> MlpConfig {
        MlpConfig::new(
            vec![self.k_reduced, self.attention_hidden, self.n_classes],
            Activation::Tanh,
        )
    }
}

/// One affine scorer per class: `logit_c = w_c · Z_c + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    pub weight: Matrix,
    pub bias: Vector,
}

impl ClassHead {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Vector::zeros(self.bias.len()),
        }
    }
}

impl Parameters for ClassHead {
    fn specs(&self) -> Vec<TensorSpec> {
        vec![
            TensorSpec::new("weight", self.weight.rows(), self.weight.cols()),
            TensorSpec::new("bias", 1, self.bias.len()),
        ]
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), self.bias.data()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), self.bias.data_mut()]
    }
}

/// Trainable MIL parameters: reducer `g(·; φ)`, attention scorer `v_ω` and
/// the per-class classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub reducer: Mlp,
    pub attention: Mlp,
    pub classifier: ClassHead,
}

impl MilModel {
    /// He-uniform reducer; attention MLP and classifier drawn the same way
    /// then shrunk by [`INIT_SHRINK`].
    pub fn init(config: &MilConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reducer = Mlp::init(&config.reducer_config(), rng.random())?;
        let mut attention = Mlp::init(&config.attention_config(), rng.random())?;
        // attention starts close to mean pooling, logits close to uniform
        for t in attention.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= INIT_SHRINK);
        }
        let bound = INIT_SHRINK * (6.0 / config.k_reduced as f64).sqrt();
        let classifier = ClassHead {
            weight: Matrix::from_fn(config.n_classes, config.k_reduced, |_, _| {
                rng.random_range(-bound..bound)
            }),
            bias: Vector::zeros(config.n_classes),
        };
        Ok(Self {
            reducer,
            attention,
            classifier,
        })
    }

    pub fn config(&self) -> MilConfig {
        let r = self.reducer.config();
        let a = self.attention.config();
        MilConfig {
            k: r.dims[0],
            k_reduced: r.output_dim(),
            attention_hidden: a.dims[1],
            n_classes: a.output_dim(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            reducer: self.reducer.zeros_like(),
            attention: self.attention.zeros_like(),
            classifier: ClassHead {
                weight: Matrix::zeros(self.classifier.weight.rows(), self.classifier.weight.cols()),
                bias: Vector::zeros(self.classifier.bias.len()),
            },
        }
    }

    /// Checks the widths of reducer, scorer and classifier chain together.
    pub fn validate(&self) -> Result<()> {
        let kr = self.reducer.output_dim();
        if self.reducer.input_dim() <= kr {
            return Err(Error::ShapeMismatch("reducer must lower the dimension".into()));
        }
        if self.attention.input_dim() != kr || self.classifier.weight.cols() != kr {
            return Err(Error::ShapeMismatch("attention/classifier width vs reducer".into()));
        }
        if self.attention.output_dim() != self.n_classes()
            || self.classifier.bias.len() != self.n_classes()
        {
            return Err(Error::ShapeMismatch("class count disagreement".into()));
        }
        Ok(())
    }
}

fn prefixed(prefix: &str, specs: Vec<TensorSpec>) -> impl Iterator<Item = TensorSpec> + '_ {
    specs.into_iter().map(move |mut s| {
        s.name = format!("{prefix}.{}", s.name);
        s
    })
}

impl Parameters for MilModel {
    fn specs(&self) -> Vec<TensorSpec> {
        prefixed("reducer", self.reducer.specs())
            .chain(prefixed("attention", self.attention.specs()))
            .chain(prefixed("classifier", self.classifier.specs()))
            .collect()
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.reducer.tensors();
        v.extend(self.attention.tensors());
        v.extend(self.classifier.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.reducer.tensors_mut();
        v.extend(self.attention.tensors_mut());
        v.extend(self.classifier.tensors_mut());
        v
    }
}

/// Output of the MIL head for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub logits: Vector,
    pub probabilities: Vector,
    /// `N × C`, each column sums to 1 over the bag's instances.
    pub attention: Matrix,
    pub predicted_class: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn reduce_instances(reducer: &Mlp, z: &Matrix) -> Result<Matrix> {
    reducer.predict(z)
}

/// Softmax over instances (rows) independently for each class column.
fn column_softmax(raw: &Matrix) -> Matrix {
    let (n, c) = raw.shape();
    let mut out = Matrix::zeros(n, c);
    let mut col = vec![0.0; n];
    let mut soft = vec![0.0; n];
    for j in 0..c {
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = raw.get(i, j);
        }
        softmax_into(&col, 1.0, &mut soft);
        for (i, &v) in soft.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

/// Per-class attention weights over the bag's instances (`N × C`).
pub fn attention_scores(attention: &Mlp, z_reduced: &Matrix) -> Result<Matrix> {
    Ok(column_softmax(&attention.predict(z_reduced)?))
}

/// Bag representation: row `c` is `Σ_n a[n, c] · z_reduced[n]` (`C × k′`).
pub fn pool_bag(attention: &Matrix, z_reduced: &Matrix) -> Result<Matrix> {
    if attention.rows() != z_reduced.rows() {
        return Err(Error::ShapeMismatch(format!(
            "attention covers {} instances, features cover {}",
            attention.rows(),
            z_reduced.rows()
        )));
    }
    attention.t_matmul(z_reduced)
}

fn class_logits(head: &ClassHead, pooled: &Matrix) -> Vec<f64> {
    (0..pooled.rows())
        .map(|c| {
            pooled
                .row(c)
                .iter()
                .zip(head.weight.row(c))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + head.bias.data()[c]
        })
        .collect()
}

fn prediction(logits: Vec<f64>, attention: Matrix) -> BagPrediction {
    let mut probs = vec![0.0; logits.len()];
    softmax_into(&logits, 1.0, &mut probs);
    BagPrediction {
        predicted_class: argmax(&logits),
        logits: Vector::from_raw(logits),
        probabilities: Vector::from_raw(probs),
        attention,
    }
}

/// MIL forward pass from instance embeddings (encoder already applied).
pub fn predict_embedded(model: &MilModel, z: &Matrix) -> Result<BagPrediction> {
    model.validate()?;
    let reduced = model.reducer.predict(z)?;
    let a = attention_scores(&model.attention, &reduced)?;
    let pooled = pool_bag(&a, &reduced)?;
    Ok(prediction(class_logits(&model.classifier, &pooled), a))
}

/// Full prediction for a bag of raw instances.
pub fn predict_bag(bag: &Bag, encoder: &Mlp, model: &MilModel) -> Result<BagPrediction> {
    let z = encoder.predict(&bag.instances)?;
    predict_embedded(model, &z)
}

/// Loss value and gradients of one bag.
#[derive(Debug, Clone)]
pub struct MilLoss {
    pub value: f64,
    pub model_grads: MilModel,
    /// Present only when the encoder is trainable.
    pub encoder_grads: Option<Mlp>,
}

/// Per-bag part of the loss: everything after the instance-wise layers.
struct Segment {
    value: f64,
    classifier: ClassHead,
    dreduced: Matrix,
    draw: Matrix,
    pred: BagPrediction,
}

fn segment_loss(head: &ClassHead, reduced: &Matrix, raw: &Matrix, label: usize) -> Result<Segment> {
    let c_count = head.weight.rows();
    let attention = column_softmax(raw);
    let pooled = pool_bag(&attention, reduced)?;
    let logits = class_logits(head, &pooled);
    let value = lse_slice(&logits) - logits[label];
    let pred = prediction(logits, attention);

    let mut dlogits = pred.probabilities.data().to_vec();
    dlogits[label] -= 1.0;
    let kr = reduced.cols();
    let mut dw = Matrix::zeros(c_count, kr);
    let mut dpooled = Matrix::zeros(c_count, kr);
    for c in 0..c_count {
        for j in 0..kr {
            dw.set(c, j, dlogits[c] * pooled.get(c, j));
            dpooled.set(c, j, dlogits[c] * head.weight.get(c, j));
        }
    }
    // pooled = Aᵀ R
    let a = &pred.attention;
    let da = reduced.matmul_t(&dpooled)?;
    let dreduced = a.matmul(&dpooled)?;
    // column softmax backward
    let n = a.rows();
    let mut draw = Matrix::zeros(n, c_count);
    for c in 0..c_count {
        let inner: f64 = (0..n).map(|i| a.get(i, c) * da.get(i, c)).sum();
        for i in 0..n {
            draw.set(i, c, a.get(i, c) * (da.get(i, c) - inner));
        }
    }
    Ok(Segment {
        value,
        classifier: ClassHead {
            weight: dw,
            bias: Vector::from_raw(dlogits),
        },
        dreduced,
        draw,
        pred,
    })
}

fn check_label(model: &MilModel, label: usize) -> Result<()> {
    if label >= model.n_classes() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {} classes",
            model.n_classes()
        )));
    }
    Ok(())
}

/// Cross-entropy and gradients from embeddings; returns the gradient with
/// respect to `z` as well so a trainable encoder can continue the chain.
fn head_loss(
    model: &MilModel,
    z: &Matrix,
    label: usize,
    want_input_grad: bool,
) -> Result<(f64, MilModel, Option<Matrix>, BagPrediction)> {
    model.validate()?;
    check_label(model, label)?;
    let (reduced, reducer_cache) = model.reducer.forward(z)?;
    let (raw, attention_cache) = model.attention.forward(&reduced)?;
    let seg = segment_loss(&model.classifier, &reduced, &raw, label)?;
    let (attention, dfrom_att) = model.attention.backward(&attention_cache, &seg.draw)?;
    let mut dreduced = seg.dreduced;
    dreduced.add_assign(&dfrom_att)?;
    let (reducer, dz) = model
        .reducer
        .backward_with(&reducer_cache, &dreduced, want_input_grad)?;
    Ok((
        seg.value,
        MilModel {
            reducer,
            attention,
            classifier: seg.classifier,
        },
        dz,
        seg.pred,
    ))
}

/// Per-bag losses and the mean gradient over a group of embedded bags.
/// Equal to averaging [`mil_loss_embedded`] gradients, but the
/// instance-wise layers run once over all stacked instances.
pub fn mil_group_loss(model: &MilModel, bags: &[(&Matrix, usize)]) -> Result<(Vec<f64>, MilModel)> {
    model.validate()?;
    if bags.is_empty() {
        return Err(Error::Empty("no bags in the group".into()));
    }
    for &(z, label) in bags {
        check_label(model, label)?;
        if z.rows() == 0 {
            return Err(Error::Empty("bag without instances".into()));
        }
    }
    let stacked = Matrix::vstack(&bags.iter().map(|(z, _)| *z).collect::<Vec<_>>())?;
    let (reduced, reducer_cache) = model.reducer.forward(&stacked)?;
    let (raw, attention_cache) = model.attention.forward(&reduced)?;
    let mut values = Vec::with_capacity(bags.len());
    let mut dreduced = Matrix::zeros(reduced.rows(), reduced.cols());
    let mut draw = Matrix::zeros(raw.rows(), raw.cols());
    let mut classifier = model.classifier.zeros_like();
    let mut offset = 0;
    for &(z, label) in bags {
        let idx: Vec<usize> = (offset..offset + z.rows()).collect();
        let seg = segment_loss(&model.classifier, &reduced.select_rows(&idx), &raw.select_rows(&idx), label)?;
        for (i, &r) in idx.iter().enumerate() {
            dreduced.row_mut(r).copy_from_slice(seg.dreduced.row(i));
            draw.row_mut(r).copy_from_slice(seg.draw.row(i));
        }
        classifier.weight.add_assign(&seg.classifier.weight)?;
        classifier
            .bias
            .data_mut()
            .iter_mut()
            .zip(seg.classifier.bias.data())
            .for_each(|(a, b)| *a += b);
        values.push(seg.value);
        offset += z.rows();
    }
    let (attention, dfrom_att) = model.attention.backward(&attention_cache, &draw)?;
    dreduced.add_assign(&dfrom_att)?;
    let (reducer, _) = model.reducer.backward_with(&reducer_cache, &dreduced, false)?;
    let mut grads = MilModel {
        reducer,
        attention,
        classifier,
    };
    let inv = 1.0 / bags.len() as f64;
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((values, grads))
}

/// Loss for a bag whose instances are already embedded by a frozen encoder.
pub fn mil_loss_embedded(model: &MilModel, z: &Matrix, label: usize) -> Result<(MilLoss, BagPrediction)> {
    let (value, model_grads, _, pred) = head_loss(model, z, label, false)?;
    Ok((
        MilLoss {
            value,
            model_grads,
            encoder_grads: None,
        },
        pred,
    ))
}

/// Loss, head gradients and the gradient with respect to the embeddings
/// `z`, for callers that differentiate their own encoder.
pub fn mil_loss_with_input_grad(model: &MilModel, z: &Matrix, label: usize) -> Result<(f64, MilModel, Matrix)> {
    let (value, model_grads, dz, _) = head_loss(model, z, label, true)?;
    Ok((value, model_grads, dz.expect("requested")))
}

/// Categorical cross-entropy of one bag through encoder and MIL head. The
/// encoder is only differentiated when `train_encoder` is set; otherwise no
/// encoder gradient is computed or returned.
pub fn mil_forward_loss(
    bag: &Bag,
    encoder: &Mlp,
    model: &MilModel,
    train_encoder: bool,
) -> Result<(MilLoss, BagPrediction)> {
    if train_encoder {
        let (z, cache) = encoder.forward(&bag.instances)?;
        let (value, model_grads, dz, pred) = head_loss(model, &z, bag.label, true)?;
        let (eg, _) = encoder.backward_with(&cache, &dz.expect("requested"), false)?;
        Ok((
            MilLoss {
                value,
                model_grads,
                encoder_grads: Some(eg),
            },
            pred,
        ))
    } else {
        let z = encoder.predict(&bag.instances)?;
        mil_loss_embedded(model, &z, bag.label)
    }
}
