use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SslMethod, SslSection};
use crate::data::{InstancePool, MultiCropSpec};
use crate::encoder::{
    default_encoder_config, Activation, HeadRole, LrSchedule, Mlp, MlpConfig, OptimizerConfig,
    OptimizerState, ProjectionHead, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax_rows, Matrix};
use crate::params::{Parameters, TensorSpec};
use crate::ssl::{
    dino_multicrop_loss, ema_momentum_at, multicrop_pairs, nt_xent_loss, swav_multicrop_loss,
    teacher_temperature, PrototypeBank, TeacherState, ViewPairBatch,
};

/// Encoder plus method head (and prototypes for SwAV). Gradients are stored
/// in a value of the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct SslModel {
    pub encoder: Mlp,
    pub head: ProjectionHead,
    pub prototypes: Option<PrototypeBank>,
}

impl SslModel {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: ProjectionHead {
                role: self.head.role,
                mlp: self.head.mlp.zeros_like(),
            },
            prototypes: self.prototypes.as_ref().map(PrototypeBank::zeros_like),
        }
    }
}

fn prefixed(prefix: &str, specs: Vec<TensorSpec>) -> impl Iterator<Item = TensorSpec> + '_ {
    specs.into_iter().map(move |mut s| {
        s.name = format!("{prefix}.{}", s.name);
        s
    })
}

impl Parameters for SslModel {
    fn specs(&self) -> Vec<TensorSpec> {
        let mut v: Vec<TensorSpec> = prefixed("encoder", self.encoder.specs())
            .chain(prefixed("head", self.head.mlp.specs()))
            .collect();
        if let Some(p) = &self.prototypes {
            v.extend(p.specs());
        }
        v
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.extend(self.head.mlp.tensors());
        if let Some(p) = &self.prototypes {
            v.extend(p.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.mlp.tensors_mut());
        if let Some(p) = &mut self.prototypes {
            v.extend(p.tensors_mut());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Mlp,
    pub curve: Vec<EpochLoss>,
}

/// `epoch,loss,lr` lines.
pub fn curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss,lr\n");
    for e in curve {
        s.push_str(&format!("{},{:?},{:?}\n", e.epoch, e.loss, e.lr));
    }
    s
}

/// Untrained encoder with the default architecture.
pub fn random_encoder(input_dim: usize, seed: u64) -> Result<Mlp> {
    Mlp::init(&default_encoder_config(input_dim), seed)
}

fn head_config(input: usize, hidden: usize, out: usize) -> MlpConfig {
    MlpConfig::new(vec![input, hidden, out], Activation::Relu)
}

/// Forward through encoder and head; backward from head-output gradients.
struct Tape {
    enc_cache: crate::encoder::MlpCache,
    head_cache: crate::encoder::MlpCache,
}

fn forward(model: &SslModel, x: &Matrix) -> Result<(Matrix, Tape)> {
    let (h, enc_cache) = model.encoder.forward(x)?;
    let (z, head_cache) = model.head.mlp.forward(&h)?;
    Ok((z, Tape { enc_cache, head_cache }))
}

fn backward(model: &SslModel, tape: &Tape, dz: &Matrix, prototypes: Option<PrototypeBank>) -> Result<SslModel> {
    let (head, dh) = model.head.mlp.backward(&tape.head_cache, dz)?;
    let (encoder, _) = model.encoder.backward_with(&tape.enc_cache, &dh, false)?;
    Ok(SslModel {
        encoder,
        head: ProjectionHead {
            role: model.head.role,
            mlp: head,
        },
        prototypes,
    })
}

fn split_rows(m: &Matrix, parts: usize) -> Vec<Matrix> {
    let n = m.rows() / parts;
    (0..parts)
        .map(|p| m.select_rows(&(p * n..(p + 1) * n).collect::<Vec<_>>()))
        .collect()
}

fn stack_named(grads: &mut std::collections::BTreeMap<String, Matrix>, prefix: &str, count: usize) -> Result<Matrix> {
    let parts: Vec<Matrix> = (0..count)
        .map(|i| {
            grads
                .remove(&format!("{prefix}{i}"))
                .ok_or_else(|| Error::InvalidParameter(format!("missing gradient {prefix}{i}")))
        })
        .collect::<Result<_>>()?;
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < batch_size) {
        out.pop();
    }
    out
}

fn check_finite(value: f64, epoch: usize, last_good: Option<usize>) -> Result<()> {
    if !value.is_finite() {
        let last = last_good.map_or("none".to_string(), |e| e.to_string());
        return Err(Error::Divergence(format!(
            "loss {value} at epoch {epoch}; last finite epoch {last}"
        )));
    }
    Ok(())
}

/// Self-supervised pre-training on an unlabeled instance pool.
///
/// SimCLR and SwAV use SGD with LARC, DINO uses AdamW with an EMA teacher;
/// all follow linear warm-up then cosine decay. A non-finite loss aborts
/// with a divergence error naming the last finite epoch.
pub fn pretrain(ssl: &SslSection, pool: &InstancePool, seed: u64) -> Result<PretrainOutcome> {
    if !ssl.method.is_self_supervised() {
        return Err(Error::InvalidParameter(format!(
            "{} is not a self-supervised method",
            ssl.method
        )));
    }
    let x = pool.features();
    if x.rows() < 2 {
        return Err(Error::Empty("instance pool needs at least two instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = random_encoder(x.cols(), rng.random())?;
    let k = encoder.output_dim();
    let (head, prototypes) = match ssl.method {
        SslMethod::Simclr => (
            ProjectionHead::new(
                HeadRole::Contrastive,
                &head_config(k, ssl.simclr.head_hidden, ssl.simclr.head_out),
                k,
                rng.random(),
            )?,
            None,
        ),
        SslMethod::Swav => (
            ProjectionHead::new(
                HeadRole::Prototype,
                &head_config(k, ssl.swav.head_hidden, ssl.swav.head_out),
                k,
                rng.random(),
            )?,
            Some(PrototypeBank::random(ssl.swav.prototypes, ssl.swav.head_out, &mut rng)?),
        ),
        _ => (
            ProjectionHead::new(
                HeadRole::Distillation,
                &head_config(k, ssl.dino.head_hidden, ssl.dino.out_dim),
                k,
                rng.random(),
            )?,
            None,
        ),
    };
    let mut model = SslModel {
        encoder,
        head,
        prototypes,
    };

    let batch_size = ssl.batch_size.min(x.rows());
    let steps_per_epoch = batches(x.rows(), batch_size, &mut rng).len();
    let total = steps_per_epoch * ssl.epochs;
    let warmup = (ssl.warmup_epochs * steps_per_epoch).min(total);
    let (opt_config, base_lr) = if ssl.method == SslMethod::Dino {
        (OptimizerConfig::adamw(ssl.dino.weight_decay), ssl.dino.lr)
    } else {
        (
            OptimizerConfig::sgd_larc(ssl.momentum, ssl.weight_decay, ssl.trust_coefficient),
            ssl.lr,
        )
    };
    let schedule = LrSchedule::new(base_lr, total, warmup, ScheduleKind::Cosine)?;
    let mut opt = OptimizerState::new(opt_config, &model)?;

    let n_views = match ssl.method {
        SslMethod::Simclr => 2,
        _ => ssl.n_global_crops + ssl.n_local_crops,
    };
    let n_global = if ssl.method == SslMethod::Simclr { 2 } else { ssl.n_global_crops };
    let crops = MultiCropSpec::standard(x.cols(), n_global, n_views - n_global, ssl.noise_sigma)?;
    let pairs = multicrop_pairs(n_global, n_views - n_global);
    if batch_size == 1 && ssl.method != SslMethod::Simclr {
        warn!("batch of one: balanced codes and centering are degenerate");
    }

    let d = &ssl.dino;
    let mut teacher = if ssl.method == SslMethod::Dino {
        Some(TeacherState::new(&model, d.out_dim, d.tau_s, d.tau_t_start, d.ema_momentum, d.center_momentum)?)
    } else {
        None
    };

    let mut curve = Vec::with_capacity(ssl.epochs);
    let mut step = 0usize;
    let mut last_good = None;
    for epoch in 0..ssl.epochs {
        if let Some(t) = &mut teacher {
            let tau = teacher_temperature(epoch, d.tau_t_warmup_epochs, d.tau_t_start, d.tau_t_end);
            t.set_tau_t(tau)?;
        }
        let mut epoch_loss = 0.0;
        let epoch_batches = batches(x.rows(), batch_size, &mut rng);
        let mut lr = 0.0;
        for idx in &epoch_batches {
            let xb = x.select_rows(idx);
            let views = crops.views(&xb, rng.random())?;
            let stacked = Matrix::vstack(&views.iter().collect::<Vec<_>>())?;
            let (z, tape) = forward(&model, &stacked)?;
            let zs = split_rows(&z, n_views);
            let (value, grads) = match ssl.method {
                SslMethod::Simclr => {
                    let batch = ViewPairBatch::new(zs[0].clone(), zs[1].clone())?;
                    let mut r = nt_xent_loss(&batch, ssl.simclr.tau)?;
                    let dz = Matrix::vstack(&[&r.take("z1"), &r.take("z2")])?;
                    (r.value, backward(&model, &tape, &dz, None)?)
                }
                SslMethod::Swav => {
                    let s = &ssl.swav;
                    let bank = model.prototypes.as_ref().expect("swav has prototypes");
                    let mut r = swav_multicrop_loss(&zs, bank, &pairs, s.tau, s.epsilon, s.sinkhorn_iters)?;
                    let mut dc = PrototypeBank::zeros_like(bank);
                    if epoch >= s.freeze_prototypes_epochs {
                        dc.tensors_mut()[0].copy_from_slice(r.take("prototypes").data());
                    }
                    let dz = stack_named(&mut r.grads, "view", n_views)?;
                    (r.value, backward(&model, &tape, &dz, Some(dc))?)
                }
                _ => {
                    let t = teacher.as_mut().expect("dino has a teacher");
                    let globals = Matrix::vstack(&views[..n_global].iter().collect::<Vec<_>>())?;
                    let (tz, _) = forward(&t.theta_t, &globals)?;
                    let tviews = split_rows(&tz, n_global);
                    let mut r = dino_multicrop_loss(&zs, &tviews, &pairs, t)?;
                    let dz = stack_named(&mut r.grads, "student", n_views)?;
                    let g = backward(&model, &tape, &dz, None)?;
                    t.update_center(&tz)?;
                    (r.value, g)
                }
            };
            check_finite(value, epoch, last_good)?;
            lr = schedule.lr_at(step)?;
            opt.step(&mut model, &grads, lr)?;
            if let Some(bank) = &mut model.prototypes {
                bank.renormalize()?;
            }
            if let Some(t) = &mut teacher {
                let m = ema_momentum_at(d.ema_momentum, step, total);
                t.set_ema_momentum(m)?;
                t.update_teacher(&model)?;
            }
            epoch_loss += value;
            step += 1;
        }
        let loss = epoch_loss / epoch_batches.len() as f64;
        check_finite(loss, epoch, last_good)?;
        last_good = Some(epoch);
        debug!("{} epoch {epoch}: loss {loss:.6} lr {lr:.3e}", ssl.method);
        curve.push(EpochLoss { epoch, loss, lr });
    }
    info!(
        "{} pre-training done: {} epochs, final loss {:.6}",
        ssl.method,
        ssl.epochs,
        curve.last().map_or(f64::NAN, |e| e.loss)
    );
    Ok(PretrainOutcome {
        encoder: model.encoder,
        curve,
    })
}

/// Instance-level supervised training of the encoder on pseudo-labels,
/// the proxy for an encoder pre-trained on annotated single cells.
/// Optimizer and schedule settings are shared with the SGD methods.
pub fn pretrain_supervised_proxy(
    ssl: &SslSection,
    x: &Matrix,
    pseudo_labels: &[usize],
    n_labels: usize,
    seed: u64,
) -> Result<PretrainOutcome> {
    if pseudo_labels.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} pseudo-labels for {} instances",
            pseudo_labels.len(),
            x.rows()
        )));
    }
    if x.rows() < 2 || n_labels < 2 || pseudo_labels.iter().any(|&l| l >= n_labels) {
        return Err(Error::InvalidParameter("proxy training needs ≥ 2 instances and valid labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = random_encoder(x.cols(), rng.random())?;
    let k = encoder.output_dim();
    let head = ProjectionHead::new(
        HeadRole::Supervised,
        &MlpConfig::new(vec![k, n_labels], Activation::Relu),
        k,
        rng.random(),
    )?;
    let mut model = SslModel {
        encoder,
        head,
        prototypes: None,
    };
    let batch_size = ssl.batch_size.min(x.rows());
    let steps_per_epoch = batches(x.rows(), batch_size, &mut rng).len();
    let total = steps_per_epoch * ssl.epochs;
    let warmup = (ssl.warmup_epochs * steps_per_epoch).min(total);
    let schedule = LrSchedule::new(ssl.lr, total, warmup, ScheduleKind::Cosine)?;
    let mut opt = OptimizerState::new(
        OptimizerConfig::sgd_larc(ssl.momentum, ssl.weight_decay, ssl.trust_coefficient),
        &model,
    )?;
    let crops = MultiCropSpec::standard(x.cols(), 1, 0, ssl.noise_sigma)?;

    let mut curve = Vec::with_capacity(ssl.epochs);
    let mut step = 0;
    let mut last_good = None;
    for epoch in 0..ssl.epochs {
        let epoch_batches = batches(x.rows(), batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for idx in &epoch_batches {
            let xb = crops.views(&x.select_rows(idx), rng.random())?.remove(0);
            let (logits, tape) = forward(&model, &xb)?;
            let logp = log_softmax_rows(&logits, 1.0)?;
            let n = idx.len() as f64;
            let mut value = 0.0;
            let mut dz = logp.map(f64::exp);
            for (r, &i) in idx.iter().enumerate() {
                let l = pseudo_labels[i];
                value -= logp.get(r, l) / n;
                dz.set(r, l, dz.get(r, l) - 1.0);
            }
            dz.scale_in_place(1.0 / n);
            check_finite(value, epoch, last_good)?;
            let grads = backward(&model, &tape, &dz, None)?;
            lr = schedule.lr_at(step)?;
            opt.step(&mut model, &grads, lr)?;
            epoch_loss += value;
            step += 1;
        }
        let loss = epoch_loss / epoch_batches.len() as f64;
        last_good = Some(epoch);
        curve.push(EpochLoss { epoch, loss, lr });
    }
    Ok(PretrainOutcome {
        encoder: model.encoder,
        curve,
    })
}
