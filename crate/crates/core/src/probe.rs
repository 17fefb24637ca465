//! Reading a discriminator as a classifier.
//!
//! A conditional discriminator is scored on every condition and the
//! conditions are ranked by score; an unconditional one ranks its logits in
//! a single pass. Either way the report is top-k accuracy against the true
//! labels. The linear probe instead fits a fresh linear head on frozen
//! backbone features.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{class_loss, ClassLossKind};
use crate::nets::{absorb_grads, DiscriminatorNet, HeadKind, Linear};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Conditional,
    Ucd,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub step: u64,
    pub kind: ProbeKind,
    pub top_k: BTreeMap<usize, f64>,
    pub n_samples: usize,
    /// Rows pushed through the discriminator to produce the report.
    pub forward_rows: usize,
}

impl ProbeReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.top_k.get(&k).copied()
    }
}

/// Class indices ordered by descending score; equal scores keep ascending
/// index order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// The first `k` entries of [`ranking`].
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut r = ranking(scores);
    r.truncate(k);
    r
}

fn check_ks(ks: &[usize], classes: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::contract("no k requested"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::contract(format!(
            "top-{k} requested with {classes} classes"
        )));
    }
    Ok(())
}

/// Top-k accuracies of `[n, classes]` scores against `labels`.
pub fn accuracy_from_scores(scores: &Tensor, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let classes = scores.last_dim();
    check_ks(ks, classes)?;
    if scores.rows() != labels.len() {
        return Err(Error::dim(
            "probe",
            format!("{} score rows for {} labels", scores.rows(), labels.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::domain("probe", format!("label {l} with {classes} classes")));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let mut hits = vec![0usize; kmax + 1];
    for (i, &label) in labels.iter().enumerate() {
        let pos = ranking(scores.row(i))
            .iter()
            .position(|&c| c == label)
            .expect("label in range");
        if pos < kmax {
            hits[pos + 1] += 1;
        }
    }
    // hits[k] becomes the count with rank < k
    for k in 1..=kmax {
        hits[k] += hits[k - 1];
    }
    let n = labels.len() as f64;
    Ok(ks.iter().map(|&k| (k, hits[k] as f64 / n)).collect())
}

/// Score each sample under every condition and rank the conditions.
pub fn probe_conditional(
    net: &DiscriminatorNet,
    samples: &Tensor,
    labels: &[usize],
    ks: &[usize],
    step: u64,
) -> Result<ProbeReport> {
    if net.head_kind() != HeadKind::ConditionalScalar {
        return Err(Error::contract("conditional probe needs a conditional head"));
    }
    let classes = net.cardinality;
    check_ks(ks, classes)?;
    let n = samples.rows();
    let mut scores = vec![0.0; n * classes];
    let mut forward_rows = 0;
    for c in 0..classes {
        let col = net.conditional_eval(samples, &vec![c; n])?;
        forward_rows += n;
        for i in 0..n {
            scores[i * classes + c] = col.data()[i];
        }
    }
    let scores = Tensor::new(vec![n, classes], scores)?;
    Ok(ProbeReport {
        step,
        kind: ProbeKind::Conditional,
        top_k: accuracy_from_scores(&scores, labels, ks)?,
        n_samples: n,
        forward_rows,
    })
}

/// Rank the unconditional logits of each sample.
pub fn probe_ucd(
    net: &DiscriminatorNet,
    samples: &Tensor,
    labels: &[usize],
    ks: &[usize],
    step: u64,
) -> Result<ProbeReport> {
    if net.head_kind() != HeadKind::UnconditionalLogits {
        return Err(Error::contract("ucd probe needs a logits head"));
    }
    let scores = net.logits_eval(samples)?;
    Ok(ProbeReport {
        step,
        kind: ProbeKind::Ucd,
        top_k: accuracy_from_scores(&scores, labels, ks)?,
        n_samples: samples.rows(),
        forward_rows: samples.rows(),
    })
}

/// Pick the probe matching the head.
pub fn probe_auto(
    net: &DiscriminatorNet,
    samples: &Tensor,
    labels: &[usize],
    ks: &[usize],
    step: u64,
) -> Result<ProbeReport> {
    match net.head_kind() {
        HeadKind::ConditionalScalar => probe_conditional(net, samples, labels, ks, step),
        HeadKind::UnconditionalLogits => probe_ucd(net, samples, labels, ks, step),
    }
}

/// Anything that maps samples to fixed features without being trained.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Result<Tensor>;
}

impl FeatureExtractor for DiscriminatorNet {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.features_eval(x)
    }
}

/// Features used as-is; handy for tests.
pub struct Identity;

impl FeatureExtractor for Identity {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            epochs: 100,
            lr: 1e-2,
        }
    }
}

/// Fit a zero-initialized linear head on frozen features by full-batch
/// cross-entropy with Adam, then report validation top-1.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    backbone: &dyn FeatureExtractor,
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    classes: usize,
    cfg: LinearProbeConfig,
    step: u64,
) -> Result<ProbeReport> {
    if train_y.is_empty() || val_y.is_empty() {
        return Err(Error::contract("linear probe needs non-empty train and validation sets"));
    }
    let feats = backbone.extract(train_x)?;
    let val_feats = backbone.extract(val_x)?;
    let mut head = Linear::zeros(feats.last_dim(), classes);
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::new(adam, &[&head.w, &head.b]);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let vars = head.bind(&mut g, true);
        let x = g.constant(feats.clone());
        let logits = Linear::forward(&mut g, &vars, x)?;
        let loss = class_loss(&mut g, logits, train_y, ClassLossKind::CrossEntropy)?;
        g.backward(loss)?;
        let mut params = [&mut head.w, &mut head.b];
        absorb_grads(&g, &[vars.w, vars.b], &mut params)?;
        adam_step(&mut params, &mut state)?;
    }
    let mut g = Graph::new();
    let vars = head.bind(&mut g, false);
    let x = g.constant(val_feats);
    let logits = Linear::forward(&mut g, &vars, x)?;
    let scores = g.value(logits).clone();
    Ok(ProbeReport {
        step,
        kind: ProbeKind::Linear,
        top_k: accuracy_from_scores(&scores, val_y, &[1])?,
        n_samples: val_y.len(),
        forward_rows: train_y.len() + val_y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(ranking(&[0.0, 0.0]), vec![0, 1]);
        assert_eq!(top_k(&[1.0, 1.0, 1.0], 1), vec![0]);
        assert_eq!(ranking(&[0.1, 0.5, 0.1, 0.5]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn accuracy_is_monotone_and_full_at_k_eq_classes() {
        let s = Tensor::from_rows(&[vec![0.1, 0.9, 0.0], vec![0.5, 0.2, 0.3], vec![0.0, 0.0, 1.0]]).unwrap();
        let acc = accuracy_from_scores(&s, &[0, 1, 2], &[1, 2, 3]).unwrap();
        assert_eq!(acc[&1], 1.0 / 3.0);
        assert_eq!(acc[&2], 2.0 / 3.0);
        assert_eq!(acc[&3], 1.0);
    }

    #[test]
    fn k_above_classes_is_contract_error() {
        let s = Tensor::from_rows(&[vec![0.1, 0.9]]).unwrap();
        assert!(matches!(
            accuracy_from_scores(&s, &[0], &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_features_are_learned() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let mut r = vec![0.0; 3];
                r[i % 3] = 1.0;
                r
            })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let cfg = LinearProbeConfig { epochs: 50, lr: 1e-2 };
        let rep = linear_probe(&Identity, &x, &y, &x, &y, 3, cfg, 0).unwrap();
        assert_eq!(rep.accuracy(1), Some(1.0));
        assert!(linear_probe(&Identity, &x, &[], &x, &y, 3, cfg, 0).is_err());
    }
}
