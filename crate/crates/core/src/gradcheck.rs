//! Finite-difference verification of every analytic gradient: the three
//! self-supervised losses, the encoder, and the full MIL path from raw
//! instances through encoder, reducer, attention and classifier.
//!
//! Relative error per coordinate is `|a − n| / max(|n|, atol / rtol)` with
//! central differences of step `h`; a component passes when the largest
//! error over all its randomized shapes stays below `rtol`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, Mlp, MlpConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mil::{mil_forward_loss, Bag, MilConfig, MilModel};
use crate::params::Parameters;
use crate::ssl::{
    dino_loss, dino_multicrop_loss, multicrop_pairs, nt_xent_loss, sinkhorn_codes, swav_loss_with_codes,
    PrototypeBank, TeacherState, ViewPairBatch,
};

pub const STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-6;
/// Inputs whose rectifier pre-activations come this close to zero are
/// resampled, since the loss is not differentiable at the kink.
pub const KINK_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    NtXent,
    Swav,
    Dino,
    Encoder,
    Mil,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::NtXent,
        Component::Swav,
        Component::Dino,
        Component::Encoder,
        Component::Mil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::NtXent => "nt_xent",
            Component::Swav => "swav",
            Component::Dino => "dino",
            Component::Encoder => "encoder",
            Component::Mil => "mil",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Component::NtXent => "contrastive loss wrt both views",
            Component::Swav => "swapped prediction wrt views and prototypes, codes fixed",
            Component::Dino => "distillation wrt student logits, teacher fixed",
            Component::Encoder => "rectifier and tanh perceptrons, 1 to 3 layers",
            Component::Mil => "bag loss wrt encoder, reducer, attention and classifier",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown gradcheck component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub components: Vec<Component>,
    pub shapes_per_component: usize,
    pub seed: u64,
    /// Test hook: corrupt the analytic gradient of this component.
    pub fault: Option<Component>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            components: Component::ALL.to_vec(),
            shapes_per_component: 20,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: Component,
    pub shapes: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Shape description of the worst case.
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<ComponentReport>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<Component> {
        self.entries.iter().filter(|e| !e.passed).map(|e| e.component).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} shapes={} coordinates={} max_rel_error={:.3e} worst=[{}]  # {}\n",
                if e.passed { "PASS" } else { "FAIL" },
                e.component,
                e.shapes,
                e.coordinates,
                e.max_rel_error,
                e.worst,
                e.component.describe()
            ));
        }
        s.push_str(&format!(
            "overall {} in {:.2}s\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.seconds
        ));
        s
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(ATOL / RTOL)
}

/// Central difference of `f` at every coordinate of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

fn corrupt(grad: &mut [f64], on: bool) {
    if on {
        if let Some(g) = grad.first_mut() {
            *g = *g * 1.01 + 1e-3;
        }
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn with_data(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::new(m.rows(), m.cols(), data.to_vec()).expect("same shape")
}

struct Case {
    max: f64,
    coords: usize,
    shape: String,
}

fn check_nt_xent(rng: &mut impl Rng, fault: bool) -> Result<Case> {
    let n = rng.random_range(1..=6);
    let d = rng.random_range(2..=8);
    let tau = rng.random_range(0.2..1.5);
    let z1 = random_matrix(rng, n, d, 1.0);
    let z2 = random_matrix(rng, n, d, 1.0);
    let r = nt_xent_loss(&ViewPairBatch::new(z1.clone(), z2.clone())?, tau)?;
    let mut worst = 0.0f64;
    for (name, which) in [("z1", 0), ("z2", 1)] {
        let mut a = r.grad(name).expect("gradient").data().to_vec();
        corrupt(&mut a, fault && which == 0);
        let base = if which == 0 { &z1 } else { &z2 };
        let num = numeric_grad(base.data(), |p| {
            let m = with_data(base, p);
            let batch = if which == 0 {
                ViewPairBatch::new(m, z2.clone())?
            } else {
                ViewPairBatch::new(z1.clone(), m)?
            };
            Ok(nt_xent_loss(&batch, tau)?.value)
        })?;
        worst = worst.max(max_error(&a, &num));
    }
    Ok(Case {
        max: worst,
        coords: 2 * n * d,
        shape: format!("N={n} d={d} tau={tau:.3}"),
    })
}

fn check_swav(rng: &mut impl Rng, fault: bool) -> Result<Case> {
    let n = rng.random_range(1..=6);
    let d = rng.random_range(2..=6);
    let j = rng.random_range(2..=6);
    let tau = rng.random_range(0.2..1.0);
    let z1 = random_matrix(rng, n, d, 1.0);
    let z2 = random_matrix(rng, n, d, 1.0);
    let bank = PrototypeBank::random(j, d, rng)?;
    let q1 = sinkhorn_codes(&random_matrix(rng, n, j, 1.0), 0.5, 3)?.into_matrix();
    let q2 = sinkhorn_codes(&random_matrix(rng, n, j, 1.0), 0.5, 3)?.into_matrix();
    let loss = |z1: &Matrix, z2: &Matrix, bank: &PrototypeBank| -> Result<f64> {
        Ok(swav_loss_with_codes(&ViewPairBatch::new(z1.clone(), z2.clone())?, bank, &q1, &q2, tau)?.value)
    };
    let r = swav_loss_with_codes(&ViewPairBatch::new(z1.clone(), z2.clone())?, &bank, &q1, &q2, tau)?;
    let mut a1 = r.grad("z1").expect("z1").data().to_vec();
    corrupt(&mut a1, fault);
    let n1 = numeric_grad(z1.data(), |p| loss(&with_data(&z1, p), &z2, &bank))?;
    let n2 = numeric_grad(z2.data(), |p| loss(&z1, &with_data(&z2, p), &bank))?;
    let nc = numeric_grad(bank.matrix().data(), |p| {
        let mut b = bank.clone();
        b.tensors_mut()[0].copy_from_slice(p);
        loss(&z1, &z2, &b)
    })?;
    let worst = max_error(&a1, &n1)
        .max(max_error(r.grad("z2").expect("z2").data(), &n2))
        .max(max_error(r.grad("prototypes").expect("prototypes").data(), &nc));
    Ok(Case {
        max: worst,
        coords: 2 * n * d + j * d,
        shape: format!("N={n} d={d} J={j} tau={tau:.3}"),
    })
}

#[derive(Clone)]
struct NoParams;

impl Parameters for NoParams {
    fn specs(&self) -> Vec<crate::params::TensorSpec> {
        Vec::new()
    }
    fn tensors(&self) -> Vec<&[f64]> {
        Vec::new()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        Vec::new()
    }
}

fn check_dino(rng: &mut impl Rng, fault: bool) -> Result<Case> {
    let n = rng.random_range(1..=5);
    let k = rng.random_range(2..=8);
    let tau_s = rng.random_range(0.1..0.5);
    let tau_t = tau_s * rng.random_range(0.3..0.9);
    let mut state = TeacherState::new(&NoParams, k, tau_s, tau_t, 0.996, 0.9)?;
    state.set_center(crate::linalg::Vector::new(
        (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )?)?;
    let multicrop = rng.random_bool(0.5);
    if multicrop {
        let n_local = rng.random_range(1..=3);
        let views: Vec<Matrix> = (0..2 + n_local).map(|_| random_matrix(rng, n, k, 2.0)).collect();
        let teacher: Vec<Matrix> = (0..2).map(|_| random_matrix(rng, n, k, 2.0)).collect();
        let pairs = multicrop_pairs(2, n_local);
        let r = dino_multicrop_loss(&views, &teacher, &pairs, &state)?;
        let mut worst = 0.0f64;
        for (v, view) in views.iter().enumerate() {
            let mut a = r.grad(&format!("student{v}")).expect("student").data().to_vec();
            corrupt(&mut a, fault && v == 0);
            let num = numeric_grad(view.data(), |p| {
                let mut vs = views.clone();
                vs[v] = with_data(view, p);
                Ok(dino_multicrop_loss(&vs, &teacher, &pairs, &state)?.value)
            })?;
            worst = worst.max(max_error(&a, &num));
        }
        return Ok(Case {
            max: worst,
            coords: views.len() * n * k,
            shape: format!("N={n} K={k} views={} multicrop", views.len()),
        });
    }
    let s = random_matrix(rng, n, k, 2.0);
    let t = random_matrix(rng, n, k, 2.0);
    let r = dino_loss(&s, &t, &state)?;
    let mut a = r.grad("student_logits").expect("student").data().to_vec();
    corrupt(&mut a, fault);
    let num = numeric_grad(s.data(), |p| Ok(dino_loss(&with_data(&s, p), &t, &state)?.value))?;
    Ok(Case {
        max: max_error(&a, &num),
        coords: n * k,
        shape: format!("N={n} K={k} tau_s={tau_s:.3} tau_t={tau_t:.3}"),
    })
}

fn params_with<P: Parameters + Clone>(p: &P, flat: &[f64]) -> P {
    let mut q = p.clone();
    let mut offset = 0;
    for t in q.tensors_mut() {
        let len = t.len();
        t.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    q
}

fn check_encoder(rng: &mut impl Rng, fault: bool) -> Result<Case> {
    loop {
        let layers = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=8)];
        for _ in 0..layers {
            dims.push(rng.random_range(1..=32));
        }
        let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        let mlp = Mlp::init(&MlpConfig::new(dims.clone(), activation), rng.random())?;
        let n = rng.random_range(1..=4);
        let x = random_matrix(rng, n, dims[0], 1.0);
        let (y, cache) = mlp.forward(&x)?;
        if activation == Activation::Relu && Mlp::min_abs_preactivation(&cache) < KINK_GUARD {
            continue;
        }
        let up = random_matrix(rng, y.rows(), y.cols(), 1.0);
        let objective = |m: &Mlp, x: &Matrix| -> Result<f64> {
            Ok(m.predict(x)?.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
        };
        let (grads, dx) = mlp.backward(&cache, &up)?;
        let mut a = grads.flatten();
        corrupt(&mut a, fault);
        let flat = mlp.flatten();
        let num = numeric_grad(&flat, |p| objective(&params_with(&mlp, p), &x))?;
        let numx = numeric_grad(x.data(), |p| objective(&mlp, &with_data(&x, p)))?;
        return Ok(Case {
            max: max_error(&a, &num).max(max_error(dx.data(), &numx)),
            coords: flat.len() + x.data().len(),
            shape: format!("dims={dims:?} {activation:?} N={n}"),
        });
    }
}

fn check_mil(rng: &mut impl Rng, fault: bool) -> Result<Case> {
    loop {
        let d_in = rng.random_range(2..=6);
        let k = rng.random_range(3..=8);
        let k_reduced = rng.random_range(2..k);
        let c = rng.random_range(2..=4);
        let hidden = rng.random_range(2..=6);
        let n = rng.random_range(1..=6);
        let encoder = Mlp::init(
            &MlpConfig::new(vec![d_in, rng.random_range(3..=8), k], Activation::Relu),
            rng.random(),
        )?;
        let config = MilConfig {
            k,
            k_reduced,
            attention_hidden: hidden,
            n_classes: c,
        };
        let model = MilModel::init(&config, rng.random())?;
        let bag = Bag::new("g", rng.random_range(0..c), random_matrix(rng, n, d_in, 1.5))?;
        let (z, enc_cache) = encoder.forward(&bag.instances)?;
        let (_, red_cache) = model.reducer.forward(&z)?;
        if Mlp::min_abs_preactivation(&enc_cache) < KINK_GUARD
            || Mlp::min_abs_preactivation(&red_cache) < KINK_GUARD
        {
            continue;
        }
        let (loss, _) = mil_forward_loss(&bag, &encoder, &model, true)?;
        let mut a = loss.model_grads.flatten();
        corrupt(&mut a, fault);
        let ae = loss.encoder_grads.expect("trainable encoder").flatten();
        let flat = model.flatten();
        let num = numeric_grad(&flat, |p| {
            Ok(mil_forward_loss(&bag, &encoder, &params_with(&model, p), false)?.0.value)
        })?;
        let eflat = encoder.flatten();
        let enum_ = numeric_grad(&eflat, |p| {
            Ok(mil_forward_loss(&bag, &params_with(&encoder, p), &model, false)?.0.value)
        })?;
        return Ok(Case {
            max: max_error(&a, &num).max(max_error(&ae, &enum_)),
            coords: flat.len() + eflat.len(),
            shape: format!("N={n} d={d_in} k={k} k'={k_reduced} hidden={hidden} C={c}"),
        });
    }
}

/// Runs the suite; failures are reported, not raised.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    if options.shapes_per_component == 0 {
        return Err(Error::InvalidParameter("zero shapes per component".into()));
    }
    let start = Instant::now();
    let mut entries = Vec::new();
    for &component in &options.components {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(component as u64 + 1);
        let fault = options.fault == Some(component);
        let mut report = ComponentReport {
            component,
            shapes: 0,
            coordinates: 0,
            max_rel_error: 0.0,
            worst: String::new(),
            passed: true,
        };
        for _ in 0..options.shapes_per_component {
            let case = match component {
                Component::NtXent => check_nt_xent(&mut rng, fault)?,
                Component::Swav => check_swav(&mut rng, fault)?,
                Component::Dino => check_dino(&mut rng, fault)?,
                Component::Encoder => check_encoder(&mut rng, fault)?,
                Component::Mil => check_mil(&mut rng, fault)?,
            };
            report.shapes += 1;
            report.coordinates += case.coords;
            if case.max >= report.max_rel_error {
                report.max_rel_error = case.max;
                report.worst = case.shape;
            }
        }
        report.passed = report.max_rel_error < RTOL;
        entries.push(report);
    }
    Ok(GradcheckReport {
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("adam".parse::<Component>().is_err());
    }

    #[test]
    fn rel_error_floor() {
        assert!((rel_error(1e-7, 0.0) - 1e-5).abs() < 1e-18);
        assert!((rel_error(1.01, 1.0) - 0.01).abs() < 1e-12);
    }
}
