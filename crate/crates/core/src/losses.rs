//! Adversarial and classification losses.
//!
//! Every function takes logits already recorded on a [`Graph`] and returns a
//! scalar node, so the same code serves training, gradient checks and the
//! reduction-equality tests.
//!
//! Under `NonSaturating` a logit `l` is read as `D = σ(l)`; under
//! `LeastSquares` the quadratic targets act on the raw logit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{one_hot, select_logit};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossKind {
    NonSaturating,
    #[default]
    LeastSquares,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossKind {
    #[default]
    CrossEntropy,
    MulticlassHinge { margin: f64 },
}


impl ClassLossKind {
    pub fn hinge(margin: f64) -> Result<Self> {
        if !(margin > 0.0) {
            return Err(Error::Validation(format!(
                "hinge margin must be positive, got {margin}"
            )));
        }
        Ok(ClassLossKind::MulticlassHinge { margin })
    }
}

/// `lambda1` weights the classification loss, `lambda2` the self-distillation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::Validation(format!(
                "loss weights must be finite and non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

fn non_empty(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).numel() == 0 {
        return Err(Error::contract(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Mean of `softplus(-l)`, i.e. `-log σ(l)`, or of `(l - target)^2 / 2`.
fn real_term(g: &mut Graph, logit: Var, kind: GanLossKind) -> Var {
    match kind {
        GanLossKind::NonSaturating => {
            let n = g.neg(logit);
            let sp = g.softplus(n);
            g.mean(sp)
        }
        GanLossKind::LeastSquares => {
            let d = g.add_scalar(logit, -1.0);
            let sq = g.mul(d, d).expect("same shape");
            let m = g.mean(sq);
            g.scale(m, 0.5)
        }
    }
}

/// Mean of `softplus(l)`, i.e. `-log(1 - σ(l))`, or of `l^2 / 2`.
fn fake_term(g: &mut Graph, logit: Var, kind: GanLossKind) -> Var {
    match kind {
        GanLossKind::NonSaturating => {
            let sp = g.softplus(logit);
            g.mean(sp)
        }
        GanLossKind::LeastSquares => {
            let sq = g.mul(logit, logit).expect("same shape");
            let m = g.mean(sq);
            g.scale(m, 0.5)
        }
    }
}

/// Generator loss on the discriminator's logits for generated samples.
pub fn vanilla_g_loss(g: &mut Graph, fake_logit: Var, kind: GanLossKind) -> Result<Var> {
    non_empty(g, fake_logit, "vanilla_g_loss")?;
    Ok(real_term(g, fake_logit, kind))
}

/// Discriminator loss: real samples pushed toward "real", generated toward "fake".
pub fn vanilla_d_loss(
    g: &mut Graph,
    real_logit: Var,
    fake_logit: Var,
    kind: GanLossKind,
) -> Result<Var> {
    non_empty(g, real_logit, "vanilla_d_loss")?;
    non_empty(g, fake_logit, "vanilla_d_loss")?;
    let r = real_term(g, real_logit, kind);
    let f = fake_term(g, fake_logit, kind);
    g.add(r, f)
}

/// Batch mean of a classification loss on `[batch, classes]` logits.
pub fn class_loss(g: &mut Graph, logits: Var, labels: &[usize], kind: ClassLossKind) -> Result<Var> {
    non_empty(g, logits, "class_loss")?;
    let k = g.value(logits).last_dim();
    match kind {
        ClassLossKind::CrossEntropy => {
            let lse = g.log_sum_exp(logits);
            let sel = select_logit(g, logits, labels)?;
            let per_row = g.sub(lse, sel)?;
            Ok(g.mean(per_row))
        }
        ClassLossKind::MulticlassHinge { margin } => {
            let sel = select_logit(g, logits, labels)?;
            let diff = g.sub(logits, sel)?;
            let shifted = g.add_scalar(diff, margin);
            let hinge = g.relu(shifted);
            let mut mask = one_hot(labels, k)?;
            mask.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
            let mask = g.constant(mask);
            let off = g.mul(hinge, mask)?;
            let per_row = g.sum_last(off);
            Ok(g.mean(per_row))
        }
    }
}

/// Generator loss read off the component of `d(G(z, c))` matching `c`.
pub fn ucd_g_loss(
    g: &mut Graph,
    fake_logits: Var,
    labels: &[usize],
    kind: GanLossKind,
) -> Result<Var> {
    let sel = select_logit(g, fake_logits, labels)?;
    vanilla_g_loss(g, sel, kind)
}

/// Pieces of the unconditional discriminator objective, kept for logging.
#[derive(Clone, Copy, Debug)]
pub struct UcdDLoss {
    pub total: Var,
    pub adversarial: Var,
    /// Mean of the real and generated classification losses.
    pub class: Var,
}

/// Adversarial loss on the selected components plus `lambda1` times the
/// classification loss averaged over the real and generated batches.
#[allow(clippy::too_many_arguments)]
pub fn ucd_d_loss(
    g: &mut Graph,
    real_logits: Var,
    real_labels: &[usize],
    fake_logits: Var,
    fake_labels: &[usize],
    weights: LossWeights,
    gan: GanLossKind,
    class: ClassLossKind,
) -> Result<UcdDLoss> {
    if weights.lambda2 != 0.0 {
        return Err(Error::contract(
            "ucd_d_loss takes lambda2 == 0; use config_c_d_loss",
        ));
    }
    let rs = select_logit(g, real_logits, real_labels)?;
    let fs = select_logit(g, fake_logits, fake_labels)?;
    let adversarial = vanilla_d_loss(g, rs, fs, gan)?;
    let cr = class_loss(g, real_logits, real_labels, class)?;
    let cf = class_loss(g, fake_logits, fake_labels, class)?;
    let both = g.add(cf, cr)?;
    let class_avg = g.scale(both, 0.5);
    let weighted = g.scale(class_avg, weights.lambda1);
    let total = g.add(adversarial, weighted)?;
    Ok(UcdDLoss {
        total,
        adversarial,
        class: class_avg,
    })
}

/// The unconditional objective plus `lambda2` times a self-distillation term.
#[allow(clippy::too_many_arguments)]
pub fn config_c_d_loss(
    g: &mut Graph,
    real_logits: Var,
    real_labels: &[usize],
    fake_logits: Var,
    fake_labels: &[usize],
    weights: LossWeights,
    gan: GanLossKind,
    class: ClassLossKind,
    dino_term: Var,
) -> Result<UcdDLoss> {
    let base = ucd_d_loss(
        g,
        real_logits,
        real_labels,
        fake_logits,
        fake_labels,
        LossWeights {
            lambda2: 0.0,
            ..weights
        },
        gan,
        class,
    )?;
    let weighted = g.scale(dino_term, weights.lambda2);
    let total = g.add(base.total, weighted)?;
    Ok(UcdDLoss { total, ..base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn col(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(
            Tensor::new(vec![v.len(), 1], v.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
    }

    fn rows(g: &mut Graph, r: &[Vec<f64>]) -> Var {
        g.leaf(Tensor::from_rows(r).unwrap().with_requires_grad(true))
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn g_loss_reference_values() {
        let mut g = Graph::new();
        let l = col(&mut g, &[0.0]);
        let ns = vanilla_g_loss(&mut g, l, GanLossKind::NonSaturating).unwrap();
        assert_abs_diff_eq!(scalar(&g, ns), std::f64::consts::LN_2, epsilon = 1e-15);
        let one = col(&mut g, &[1.0]);
        let ls = vanilla_g_loss(&mut g, one, GanLossKind::LeastSquares).unwrap();
        assert_eq!(scalar(&g, ls), 0.0);
    }

    #[test]
    fn non_saturating_g_gradient_is_negative() {
        for &l0 in &[-30.0, -2.0, 0.0, 3.0, 40.0] {
            let mut g = Graph::new();
            let l = col(&mut g, &[l0]);
            let loss = vanilla_g_loss(&mut g, l, GanLossKind::NonSaturating).unwrap();
            g.backward(loss).unwrap();
            assert!(g.grad(l).unwrap()[0] < 0.0, "logit {l0}");
        }
    }

    #[test]
    fn d_loss_reference_values() {
        let mut g = Graph::new();
        let r = col(&mut g, &[0.0]);
        let f = col(&mut g, &[0.0]);
        let ns = vanilla_d_loss(&mut g, r, f, GanLossKind::NonSaturating).unwrap();
        assert_abs_diff_eq!(scalar(&g, ns), 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);
        let r1 = col(&mut g, &[1.0]);
        let f0 = col(&mut g, &[0.0]);
        let ls = vanilla_d_loss(&mut g, r1, f0, GanLossKind::LeastSquares).unwrap();
        assert_eq!(scalar(&g, ls), 0.0);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let l = rows(&mut g, &[vec![0.0, 0.0]]);
        let ce = class_loss(&mut g, l, &[0], ClassLossKind::CrossEntropy).unwrap();
        assert_abs_diff_eq!(scalar(&g, ce), std::f64::consts::LN_2, epsilon = 1e-15);
        let l = rows(&mut g, &[vec![10.0, -10.0]]);
        let ce = class_loss(&mut g, l, &[0], ClassLossKind::CrossEntropy).unwrap();
        // log(1 + e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        // the shift by the max logit costs one ulp of 10
        assert_abs_diff_eq!(scalar(&g, ce), expected, epsilon = 4e-15);
    }

    #[test]
    fn hinge_is_zero_when_margin_satisfied() {
        let mut g = Graph::new();
        let l = rows(&mut g, &[vec![2.0, 0.0]]);
        let kind = ClassLossKind::hinge(1.0).unwrap();
        let h = class_loss(&mut g, l, &[0], kind).unwrap();
        assert_eq!(scalar(&g, h), 0.0);
        let l = rows(&mut g, &[vec![0.5, 0.0, 1.0]]);
        let h = class_loss(&mut g, l, &[0], kind).unwrap();
        // max(0, 1 + 0 - 0.5) + max(0, 1 + 1 - 0.5)
        assert_eq!(scalar(&g, h), 0.5 + 1.5);
        assert!(ClassLossKind::hinge(0.0).is_err());
    }

    #[test]
    fn out_of_range_label_is_domain_error() {
        let mut g = Graph::new();
        let l = rows(&mut g, &[vec![0.0, 0.0]]);
        assert!(matches!(
            class_loss(&mut g, l, &[2], ClassLossKind::CrossEntropy),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn ucd_g_loss_equals_vanilla_on_selected_component() {
        let mut g = Graph::new();
        let l = rows(&mut g, &[vec![0.3, 0.0, -1.0], vec![2.0, 0.5, 0.1]]);
        let labels = [1, 2];
        let u = ucd_g_loss(&mut g, l, &labels, GanLossKind::NonSaturating).unwrap();
        let sel = col(&mut g, &[0.0, 0.1]);
        let v = vanilla_g_loss(&mut g, sel, GanLossKind::NonSaturating).unwrap();
        assert_eq!(scalar(&g, u), scalar(&g, v));
        g.backward(u).unwrap();
        let grad = g.grad(l).unwrap();
        for (i, row) in grad.chunks(3).enumerate() {
            for (j, v) in row.iter().enumerate() {
                if j != labels[i] {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn lambda2_forbidden_in_ucd_d_loss() {
        let mut g = Graph::new();
        let r = rows(&mut g, &[vec![0.0, 0.0]]);
        let f = rows(&mut g, &[vec![0.0, 0.0]]);
        let w = LossWeights::new(0.01, 0.1).unwrap();
        assert!(ucd_d_loss(
            &mut g,
            r,
            &[0],
            f,
            &[1],
            w,
            GanLossKind::LeastSquares,
            ClassLossKind::CrossEntropy
        )
        .is_err());
    }

    #[test]
    fn dino_term_enters_linearly() {
        let mut g = Graph::new();
        let r = rows(&mut g, &[vec![0.2, -0.1]]);
        let f = rows(&mut g, &[vec![0.4, 0.3]]);
        let w = LossWeights::new(0.01, 0.1).unwrap();
        let total = |g: &mut Graph, dino: f64| {
            let d = g.constant(Tensor::scalar(dino));
            let out = config_c_d_loss(
                g,
                r,
                &[0],
                f,
                &[1],
                w,
                GanLossKind::LeastSquares,
                ClassLossKind::CrossEntropy,
                d,
            )
            .unwrap();
            g.value(out.total).item().unwrap()
        };
        let hi = total(&mut g, 2.0);
        let lo = total(&mut g, 1.0);
        assert!(lo < hi);
        assert_abs_diff_eq!(hi - lo, 0.1, epsilon = 1e-15);
    }
}
