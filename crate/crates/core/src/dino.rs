//! Self-distillation with the discriminator acting as its own teacher.
//!
//! The teacher pass centers and sharpens logits and is cut from the graph;
//! the student pass is a plain softmax that gradients flow through.

use crate::error::{Error, Result};
use crate::nets::{DiscriminatorNet, DiscriminatorVars};
use crate::tensor::{softmax_slice, Graph, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DinoState {
    center: Vec<f64>,
    tau: f64,
    momentum: f64,
}

impl DinoState {
    pub fn new(cardinality: usize, tau: f64, momentum: f64) -> Result<Self> {
        Self::from_parts(vec![0.0; cardinality], tau, momentum)
    }

    pub fn from_parts(center: Vec<f64>, tau: f64, momentum: f64) -> Result<Self> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("center must be a non-empty finite vector".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Validation(format!(
                "center momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(DinoState {
            center,
            tau,
            momentum,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    fn update_center(&mut self, probs: &Tensor) {
        let k = self.center.len();
        let n = probs.rows() as f64;
        let mut mean = vec![0.0; k];
        for r in 0..probs.rows() {
            for (m, p) in mean.iter_mut().zip(probs.row(r)) {
                *m += p;
            }
        }
        for (c, m) in self.center.iter_mut().zip(mean) {
            *c = *c * self.momentum + (m / n) * (1.0 - self.momentum);
        }
    }
}

/// Teacher probabilities `softmax((l - center) / tau)` as a plain tensor,
/// followed by the center update from their batch mean.
pub fn run_teacher(logits: &Tensor, state: &mut DinoState) -> Result<Tensor> {
    let k = logits.last_dim();
    if k != state.center.len() {
        return Err(Error::dim(
            "run_teacher",
            format!("logits have {k} classes, center has {}", state.center.len()),
        ));
    }
    if !(state.tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {}",
            state.tau
        )));
    }
    let mut out = Vec::with_capacity(logits.numel());
    let mut shifted = vec![0.0; k];
    for r in 0..logits.rows() {
        for ((s, l), c) in shifted.iter_mut().zip(logits.row(r)).zip(&state.center) {
            *s = (l - c) / state.tau;
        }
        out.extend(softmax_slice(&shifted));
    }
    let probs = Tensor::new(logits.shape().to_vec(), out)?;
    state.update_center(&probs);
    Ok(probs)
}

/// Differentiable softmax over the last dimension.
pub fn run_student(g: &mut Graph, logits: Var) -> Var {
    g.softmax(logits)
}

/// Batch mean of `-Σ t · log(s + 1e-12)`; the teacher enters as a constant.
pub fn dino_loss(g: &mut Graph, teacher: &Tensor, student: Var) -> Result<Var> {
    if teacher.shape() != g.shape(student) {
        return Err(Error::contract(format!(
            "teacher shape {:?} differs from student shape {:?}",
            teacher.shape(),
            g.shape(student)
        )));
    }
    let rows = teacher.rows() as f64;
    let t = g.constant(teacher.clone());
    let shifted = g.add_scalar(student, LOG_EPS);
    let log_s = g.log(shifted)?;
    let prod = g.mul(t, log_s)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / rows))
}

/// Two augmented views of one batch.
#[derive(Clone, Debug)]
pub struct Views {
    pub first: Tensor,
    pub second: Tensor,
}

/// Teacher on the first view, student on the second, for real then generated
/// samples; returns the mean of the two losses. The center moves twice.
pub fn dino_term_for_step(
    g: &mut Graph,
    net: &DiscriminatorNet,
    vars: &DiscriminatorVars,
    real: &Views,
    fake: &Views,
    state: &mut DinoState,
) -> Result<Var> {
    let one = |g: &mut Graph, views: &Views, state: &mut DinoState| -> Result<Var> {
        let teacher_logits = net.logits_eval(&views.first)?;
        let teacher = run_teacher(&teacher_logits, state)?;
        let x = g.constant(views.second.clone());
        let logits = net.logits(g, vars, x)?;
        let student = run_student(g, logits);
        dino_loss(g, &teacher, student)
    };
    let r = one(g, real, state)?;
    let f = one(g, fake, state)?;
    let both = g.add(r, f)?;
    Ok(g.scale(both, 0.5))
}
