use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{check_compatible, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    SgdLarc,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// LARC trust coefficient.
    pub trust_coefficient: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl OptimizerConfig {
    pub fn sgd_nesterov(momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            momentum,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn sgd_larc(momentum: f64, weight_decay: f64, trust_coefficient: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdLarc,
            momentum,
            weight_decay,
            trust_coefficient,
            ..Self::default()
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.trust_coefficient > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "optimizer hyperparameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coefficient: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Optimizer with per-tensor buffers matching the parameters it was built for.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    /// Momentum (SGD) or first moment (AdamW).
    first: Vec<Vec<f64>>,
    /// Second moment (AdamW only).
    second: Vec<Vec<f64>>,
    step_count: u64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &impl Parameters) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = if config.kind == OptimizerKind::Adamw {
            zeros.clone()
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            first: zeros,
            second,
            step_count: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update with learning rate `lr`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {lr}")));
        }
        check_compatible(params, grads)?;
        let gts = grads.tensors();
        if gts.len() != self.first.len()
            || gts.iter().zip(&self.first).any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::ShapeMismatch(
                "optimizer buffers do not match parameters".into(),
            ));
        }
        if gts.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.step_count += 1;
        let c = self.config.clone();
        let t = self.step_count as i32;
        for (i, (w, g)) in params.tensors_mut().into_iter().zip(gts).enumerate() {
            match c.kind {
                OptimizerKind::SgdNesterov => {
                    sgd_nesterov(w, g, &mut self.first[i], lr, c.momentum, c.weight_decay, 1.0)
                }
                OptimizerKind::SgdLarc => {
                    let (wn, gn) = (norm(w), norm(g));
                    // trust ratio scaled learning rate, clipped at lr
                    let scale = if wn > 0.0 && gn > 0.0 && lr > 0.0 {
                        let trust = c.trust_coefficient * wn / (gn + c.weight_decay * wn);
                        (trust / lr).min(1.0)
                    } else {
                        1.0
                    };
                    sgd_nesterov(w, g, &mut self.first[i], lr, c.momentum, c.weight_decay, scale)
                }
                OptimizerKind::Adamw => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for j in 0..w.len() {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        w[j] -= lr * (mhat / (vhat.sqrt() + c.adam_eps) + c.weight_decay * w[j]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `d = scale·(g + wd·w)`, `v ← μv + d`, `w ← w − lr·(d + μv)`.
fn sgd_nesterov(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, wd: f64, scale: f64) {
    for j in 0..w.len() {
        let d = scale * (g[j] + wd * w[j]);
        v[j] = mu * v[j] + d;
        w[j] -= lr * (d + mu * v[j]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Linear warm-up followed by cosine decay (or a constant rate).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("base learning rate {base_lr}")));
        }
        if warmup_steps > total_steps {
            return Err(Error::InvalidParameter(format!(
                "warm-up {warmup_steps} exceeds total steps {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            total_steps,
            warmup_steps,
            kind,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidParameter(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        if self.kind == ScheduleKind::Constant || step == self.warmup_steps {
            return Ok(self.base_lr);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let lr = self.base_lr * 0.5 * (1.0 + (PI * progress).cos());
        Ok(if lr <= 1e-8 * self.base_lr { 0.0 } else { lr })
    }
}

/// Running gradient sum over several batches; `flush` yields the mean.
#[derive(Debug, Clone)]
pub struct GradAccumulator<P> {
    sum: Option<P>,
    count: usize,
    n_batches: usize,
}

impl<P: Parameters + Clone> GradAccumulator<P> {
    pub fn new(n_batches: usize) -> Result<Self> {
        if n_batches == 0 {
            return Err(Error::InvalidParameter("accumulate over zero batches".into()));
        }
        Ok(Self {
            sum: None,
            count: 0,
            n_batches,
        })
    }

    pub fn add(&mut self, grads: &P) -> Result<()> {
        match &mut self.sum {
            None => self.sum = Some(grads.clone()),
            Some(sum) => {
                check_compatible(sum, grads)?;
                for (s, g) in sum.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (a, b) in s.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// True once `n_batches` gradients have been added.
    pub fn is_full(&self) -> bool {
        self.count >= self.n_batches
    }

    /// Mean of the accumulated gradients; resets the accumulator. A partial
    /// group (end of epoch) is averaged over the batches it holds.
    pub fn flush(&mut self) -> Result<P> {
        let mut sum = self
            .sum
            .take()
            .ok_or_else(|| Error::Empty("flush before any gradient was accumulated".into()))?;
        let n = self.count as f64;
        self.count = 0;
        for t in sum.tensors_mut() {
            t.iter_mut().for_each(|v| *v /= n);
        }
        Ok(sum)
    }
}
