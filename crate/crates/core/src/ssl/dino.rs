use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{check_pairs, LossResult};
use crate::error::{Error, Result};
use crate::linalg::{log_softmax_rows, softmax_rows, Matrix, Vector};
use crate::params::{check_compatible, ema_update, Parameters};

/// Self-distillation hyperparameters and their schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub ema_momentum: f64,
    pub center_momentum: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 30,
            ema_momentum: 0.996,
            center_momentum: 0.9,
        }
    }
}

/// Linear ramp of the teacher temperature from `start` to `end` over the
/// warm-up epochs, constant afterwards.
pub fn teacher_temperature(epoch: usize, warmup_epochs: usize, start: f64, end: f64) -> f64 {
    if warmup_epochs == 0 || epoch >= warmup_epochs {
        return end;
    }
    start + (end - start) * epoch as f64 / warmup_epochs as f64
}

/// Teacher momentum on a cosine schedule from `base` at step 0 to 1 at
/// `total_steps`.
pub fn ema_momentum_at(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let progress = (step.min(total_steps) as f64) / total_steps as f64;
    1.0 - (1.0 - base) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Teacher network parameters plus centering and temperature state.
#[derive(Debug, Clone)]
pub struct TeacherState<P> {
    pub theta_t: P,
    center: Vector,
    tau_s: f64,
    tau_t: f64,
    ema_momentum: f64,
    center_momentum: f64,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn check_temps(tau_s: f64, tau_t: f64) -> Result<()> {
    if !(tau_s > 0.0 && tau_t > 0.0 && tau_s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperatures must be positive, got student {tau_s} teacher {tau_t}"
        )));
    }
    if tau_t >= tau_s {
        return Err(Error::InvalidParameter(format!(
            "teacher temperature {tau_t} must be below student temperature {tau_s}"
        )));
    }
    Ok(())
}

impl<P: Parameters + Clone> TeacherState<P> {
    /// Teacher initialized as a copy of the student, zero center.
    pub fn new(
        student: &P,
        k: usize,
        tau_s: f64,
        tau_t: f64,
        ema_momentum: f64,
        center_momentum: f64,
    ) -> Result<Self> {
        check_temps(tau_s, tau_t)?;
        check_unit("EMA momentum", ema_momentum)?;
        check_unit("center momentum", center_momentum)?;
        if k == 0 {
            return Err(Error::InvalidParameter("zero soft classes".into()));
        }
        Ok(Self {
            theta_t: student.clone(),
            center: Vector::zeros(k),
            tau_s,
            tau_t,
            ema_momentum,
            center_momentum,
        })
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn set_center(&mut self, center: Vector) -> Result<()> {
        if center.len() != self.center.len() {
            return Err(Error::ShapeMismatch("center length".into()));
        }
        self.center = center;
        Ok(())
    }

    pub fn tau_s(&self) -> f64 {
        self.tau_s
    }

    pub fn tau_t(&self) -> f64 {
        self.tau_t
    }

    pub fn ema_momentum(&self) -> f64 {
        self.ema_momentum
    }

    pub fn center_momentum(&self) -> f64 {
        self.center_momentum
    }

    pub fn k(&self) -> usize {
        self.center.len()
    }

    pub fn set_tau_t(&mut self, tau_t: f64) -> Result<()> {
        check_temps(self.tau_s, tau_t)?;
        self.tau_t = tau_t;
        Ok(())
    }

    pub fn set_ema_momentum(&mut self, m: f64) -> Result<()> {
        check_unit("EMA momentum", m)?;
        self.ema_momentum = m;
        Ok(())
    }

    /// `center ← cm · center + (1 − cm) · column-mean(teacher_outputs)`.
    pub fn update_center(&mut self, teacher_outputs: &Matrix) -> Result<()> {
        if teacher_outputs.cols() != self.k() {
            return Err(Error::ShapeMismatch(format!(
                "teacher outputs have {} columns, center has {}",
                teacher_outputs.cols(),
                self.k()
            )));
        }
        if teacher_outputs.rows() == 0 {
            return Err(Error::Empty("teacher outputs".into()));
        }
        let mean = teacher_outputs.column_mean();
        let m = self.center_momentum;
        for (c, b) in self.center.data_mut().iter_mut().zip(mean.data()) {
            *c = m * *c + (1.0 - m) * b;
        }
        Ok(())
    }

    /// Moves the teacher toward `student` with the current EMA momentum.
    pub fn update_teacher(&mut self, student: &P) -> Result<()> {
        check_compatible(&self.theta_t, student)?;
        ema_update(&mut self.theta_t, student, self.ema_momentum)
    }
}

/// Cross-entropy between the centered, sharpened teacher distribution and
/// the student distribution, averaged over rows. Only the student side
/// carries a gradient (`student_logits`).
pub fn dino_loss<P: Parameters + Clone>(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    state: &TeacherState<P>,
) -> Result<LossResult> {
    let (value, g) = dino_pair(student_logits, teacher_logits, state, 1.0)?;
    let mut grads = BTreeMap::new();
    grads.insert("student_logits".to_string(), g);
    Ok(LossResult { value, grads })
}

/// Teacher probabilities `softmax((t − center) / tau_t)`.
fn teacher_probs<P: Parameters + Clone>(teacher: &Matrix, state: &TeacherState<P>) -> Result<Matrix> {
    let mut centered = teacher.clone();
    for r in 0..centered.rows() {
        for (v, c) in centered.row_mut(r).iter_mut().zip(state.center.data()) {
            *v -= c;
        }
    }
    softmax_rows(&centered, state.tau_t)
}

fn dino_pair<P: Parameters + Clone>(
    student: &Matrix,
    teacher: &Matrix,
    state: &TeacherState<P>,
    weight: f64,
) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.cols() != state.k() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} classes, center has {}",
            student.cols(),
            state.k()
        )));
    }
    let n = student.rows();
    if n == 0 {
        return Err(Error::Empty("dino logits".into()));
    }
    let pt = teacher_probs(teacher, state)?;
    let log_ps = log_softmax_rows(student, state.tau_s)?;
    let ce: f64 = pt.data().iter().zip(log_ps.data()).map(|(a, b)| a * b).sum();
    let value = -weight * ce / n as f64;
    let mut g = log_ps.map(f64::exp).sub(&pt)?;
    g.scale_in_place(weight / (n as f64 * state.tau_s));
    Ok((value, g))
}

/// Multi-crop distillation: teacher logits exist for the first
/// `teacher_logits.len()` (global) views; each pair `(t, s)` compares teacher
/// view `t` with student view `s`. The value is the mean over pairs.
/// Gradients are keyed `student{i}`.
pub fn dino_multicrop_loss<P: Parameters + Clone>(
    student_logits: &[Matrix],
    teacher_logits: &[Matrix],
    pairs: &[(usize, usize)],
    state: &TeacherState<P>,
) -> Result<LossResult> {
    check_pairs(pairs, student_logits.len())?;
    let weight = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    let mut grads: Vec<Option<Matrix>> = vec![None; student_logits.len()];
    for &(t, s) in pairs {
        let teacher = teacher_logits.get(t).ok_or_else(|| {
            Error::InvalidParameter(format!("no teacher logits for view {t}"))
        })?;
        let (v, g) = dino_pair(&student_logits[s], teacher, state, weight)?;
        value += v;
        match &mut grads[s] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
    }
    let grads = grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let g = g.unwrap_or_else(|| {
                Matrix::zeros(student_logits[i].rows(), student_logits[i].cols())
            });
            (format!("student{i}"), g)
        })
        .collect();
    Ok(LossResult { value, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::entropy;
    use crate::params::TensorSpec;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalars(Vec<f64>);

    impl Parameters for Scalars {
        fn specs(&self) -> Vec<TensorSpec> {
            vec![TensorSpec::new("s", 1, self.0.len())]
        }
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    fn state(k: usize) -> TeacherState<Scalars> {
        TeacherState::new(&Scalars(vec![0.0]), k, 0.1, 0.04, 0.996, 0.9).unwrap()
    }

    #[test]
    fn equal_zero_logits_give_ln2() {
        let z = Matrix::zeros(1, 2);
        let r = dino_loss(&z, &z, &state(2)).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(r.grads.len(), 1);
        assert!(r.grad("student_logits").is_some());
    }

    #[test]
    fn temperature_ordering_enforced() {
        let s = Scalars(vec![1.0]);
        assert!(TeacherState::new(&s, 4, 0.1, 0.1, 0.9, 0.9).is_err());
        assert!(TeacherState::new(&s, 4, 0.04, 0.07, 0.9, 0.9).is_err());
        assert!(TeacherState::new(&s, 4, 0.1, 0.04, 1.2, 0.9).is_err());
    }

    #[test]
    fn center_update_momentum_extremes() {
        let batch = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        let mut free = TeacherState::new(&Scalars(vec![0.0]), 3, 0.1, 0.04, 0.9, 0.0).unwrap();
        free.set_center(Vector::new(vec![9.0, 9.0, 9.0]).unwrap()).unwrap();
        free.update_center(&batch).unwrap();
        assert_eq!(free.center().data(), &[2.0, 3.0, 4.0]);

        let mut frozen = TeacherState::new(&Scalars(vec![0.0]), 3, 0.1, 0.04, 0.9, 1.0).unwrap();
        frozen.set_center(Vector::new(vec![9.0, 8.0, 7.0]).unwrap()).unwrap();
        frozen.update_center(&batch).unwrap();
        assert_eq!(frozen.center().data(), &[9.0, 8.0, 7.0]);
        assert!(frozen.update_center(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn center_converges_geometrically() {
        let batch = Matrix::new(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mean: [f64; 2] = [2.0, -0.75];
        let mut s = state(2);
        let m: f64 = 0.9;
        for t in 1..=25 {
            s.update_center(&batch).unwrap();
            for (c, mu) in s.center().data().iter().zip(mean) {
                // center starts at 0, so error_t = m^t · |mu|
                let want = m.powi(t) * mu.abs();
                assert!(((c - mu).abs() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_bounded_below_by_teacher_entropy() {
        let s = Matrix::from_fn(3, 5, |r, c| ((r * 3 + c * 7) % 11) as f64 * 0.1);
        let t = Matrix::from_fn(3, 5, |r, c| ((r * 5 + c * 2) % 7) as f64 * 0.05);
        let st = state(5);
        let loss = dino_loss(&s, &t, &st).unwrap().value;
        let pt = teacher_probs(&t, &st).unwrap();
        let h: f64 = (0..3).map(|r| entropy(pt.row(r))).sum::<f64>() / 3.0;
        assert!(loss >= h);
    }

    #[test]
    fn schedules() {
        assert_eq!(teacher_temperature(0, 30, 0.04, 0.07), 0.04);
        assert!((teacher_temperature(15, 30, 0.04, 0.07) - 0.055).abs() < 1e-15);
        assert_eq!(teacher_temperature(40, 30, 0.04, 0.07), 0.07);
        assert_eq!(ema_momentum_at(0.996, 0, 100), 0.996);
        assert_eq!(ema_momentum_at(0.996, 100, 100), 1.0);
    }

    #[test]
    fn teacher_ema_update() {
        let mut st = TeacherState::new(&Scalars(vec![2.0]), 2, 0.1, 0.04, 0.5, 0.9).unwrap();
        st.update_teacher(&Scalars(vec![4.0])).unwrap();
        assert_eq!(st.theta_t.0, vec![3.0]);
    }
}
