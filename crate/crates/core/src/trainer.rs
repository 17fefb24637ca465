//! Training loops for the three variants, with probe and metric cadence and
//! a JSONL run log.
//!
//! Each step runs the generator phase first (discriminator frozen), then the
//! discriminator phase on the same generated batch, detached. Variant C adds
//! two augmented views of the real and generated batch for the
//! self-distillation term.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::data::{augment, stream, streams, Dataset};
use crate::dino::{dino_term_for_step, DinoState, Views};
use crate::error::{Error, Result};
use crate::losses::{config_c_d_loss, ucd_d_loss, ucd_g_loss, vanilla_d_loss, vanilla_g_loss};
use crate::metrics::{frechet_distance, knn_precision_recall, mode_coverage, per_class_frechet, GaussianSummary};
use crate::nets::{absorb_grads, CondSpec, DiscriminatorNet, GeneratorNet};
use crate::probe::probe_auto;
use crate::tensor::{adam_step, AdamState, Graph, Tensor};

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub g_loss: f64,
    pub d_loss: f64,
    pub class_loss: Option<f64>,
    pub dino_loss: Option<f64>,
}

impl StepLosses {
    fn finite(&self) -> bool {
        self.g_loss.is_finite()
            && self.d_loss.is_finite()
            && self.class_loss.is_none_or(f64::is_finite)
            && self.dino_loss.is_none_or(f64::is_finite)
    }
}

/// One line of the run log. Absent values serialize as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLogRecord {
    pub step: u64,
    pub g_loss: Option<f64>,
    pub d_loss: Option<f64>,
    pub class_loss: Option<f64>,
    pub dino_loss: Option<f64>,
    pub probe_top1: Option<f64>,
    pub probe_top3: Option<f64>,
    pub frechet_pooled: Option<f64>,
    pub frechet_per_class: Option<Vec<Option<f64>>>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub modes_covered: Option<usize>,
    pub iter_ms: Option<f64>,
}

/// Evaluation results at one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub frechet_pooled: f64,
    pub frechet_per_class: Vec<Option<f64>>,
    pub precision: f64,
    pub recall: f64,
    pub modes_covered: Option<usize>,
}

/// Generator, discriminator, optimizer state and random streams of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub dataset: Dataset,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub dino: Option<DinoState>,
    pub step: u64,
    data_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = cfg.build_dataset()?;
        if dataset.classes() != cfg.classes {
            return Err(Error::Validation("dataset and config disagree on class count".into()));
        }
        let cond = CondSpec::new(cfg.classes, cfg.embedding_dim)?;
        let generator = GeneratorNet::init(
            cond,
            cfg.latent_dim,
            &cfg.g_hidden,
            dataset.dim(),
            &mut stream(cfg.seed, streams::INIT_G),
        );
        let discriminator = DiscriminatorNet::init(
            dataset.dim(),
            &cfg.d_hidden,
            cfg.feature_dim,
            cfg.classes,
            cfg.variant.head_kind(),
            &mut stream(cfg.seed, streams::INIT_D),
        );
        let opt_g = AdamState::new(cfg.optim_g, &generator.named_params().iter().map(|p| p.1).collect::<Vec<_>>());
        let opt_d = AdamState::new(cfg.optim_d, &discriminator.named_params().iter().map(|p| p.1).collect::<Vec<_>>());
        let dino = match cfg.variant {
            Variant::C => Some(DinoState::new(cfg.classes, cfg.dino_tau, cfg.dino_momentum)?),
            _ => None,
        };
        Ok(Trainer {
            data_rng: stream(cfg.seed, streams::DATA),
            latent_rng: stream(cfg.seed, streams::LATENT),
            augment_rng: stream(cfg.seed, streams::AUGMENT),
            cfg,
            dataset,
            generator,
            discriminator,
            opt_g,
            opt_d,
            dino,
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            dino: self.dino.clone(),
        }
    }

    /// Whether every generator and discriminator weight is finite.
    pub fn weights_finite(&self) -> bool {
        let g = self.generator.named_params();
        let d = self.discriminator.named_params();
        g.iter().chain(&d).all(|(_, t)| t.is_finite())
    }

    /// Gaussian latent batch.
    pub fn latent(&mut self, batch: usize) -> Tensor {
        latent_batch(batch, self.cfg.latent_dim, &mut self.latent_rng)
    }

    /// Draw a real batch and take one generator and one discriminator step.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let (real, labels) = self.dataset.sample_labeled(self.cfg.batch, &mut self.data_rng);
        let z = self.latent(self.cfg.batch);
        self.train_step_on(&real, &labels, &z)
    }

    /// One step on a given real batch and latent batch; generated samples use
    /// the real labels.
    pub fn train_step_on(&mut self, real: &Tensor, labels: &[usize], z: &Tensor) -> Result<StepLosses> {
        let (g_loss, fake) = self.generator_phase(z, labels)?;
        let (d_loss, class_loss, dino_loss) = self.discriminator_phase(real, labels, &fake, labels)?;
        self.step += 1;
        Ok(StepLosses {
            g_loss,
            d_loss,
            class_loss,
            dino_loss,
        })
    }

    fn generator_phase(&mut self, z: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let gv = self.generator.bind(&mut g, true);
        let dv = self.discriminator.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let fake = self.generator.forward(&mut g, &gv, zv, labels)?;
        let loss = match self.cfg.variant {
            Variant::A => {
                let s = self.discriminator.conditional(&mut g, &dv, fake, labels)?;
                vanilla_g_loss(&mut g, s, self.cfg.gan_loss)?
            }
            Variant::B | Variant::C => {
                let l = self.discriminator.logits(&mut g, &dv, fake)?;
                ucd_g_loss(&mut g, l, labels, self.cfg.gan_loss)?
            }
        };
        g.backward(loss)?;
        let mut params = self.generator.params_mut();
        absorb_grads(&g, &gv.all(), &mut params)?;
        adam_step(&mut params, &mut self.opt_g)?;
        Ok((g.value(loss).item()?, g.value(fake).clone()))
    }

    #[allow(clippy::type_complexity)]
    fn discriminator_phase(
        &mut self,
        real: &Tensor,
        real_labels: &[usize],
        fake: &Tensor,
        fake_labels: &[usize],
    ) -> Result<(f64, Option<f64>, Option<f64>)> {
        let weights = self.cfg.weights();
        let mut g = Graph::new();
        let dv = self.discriminator.bind(&mut g, true);
        let rv = g.constant(real.clone());
        let fv = g.constant(fake.clone());
        let (loss, class, dino) = match self.cfg.variant {
            Variant::A => {
                let rs = self.discriminator.conditional(&mut g, &dv, rv, real_labels)?;
                let fs = self.discriminator.conditional(&mut g, &dv, fv, fake_labels)?;
                (vanilla_d_loss(&mut g, rs, fs, self.cfg.gan_loss)?, None, None)
            }
            Variant::B => {
                let rl = self.discriminator.logits(&mut g, &dv, rv)?;
                let fl = self.discriminator.logits(&mut g, &dv, fv)?;
                let out = ucd_d_loss(
                    &mut g,
                    rl,
                    real_labels,
                    fl,
                    fake_labels,
                    weights,
                    self.cfg.gan_loss,
                    self.cfg.class_loss,
                )?;
                (out.total, Some(out.class), None)
            }
            Variant::C => {
                let rl = self.discriminator.logits(&mut g, &dv, rv)?;
                let fl = self.discriminator.logits(&mut g, &dv, fv)?;
                let spec = self.cfg.augment;
                let rng = &mut self.augment_rng;
                let real_views = Views {
                    first: augment(real, &spec, rng)?,
                    second: augment(real, &spec, rng)?,
                };
                let fake_views = Views {
                    first: augment(fake, &spec, rng)?,
                    second: augment(fake, &spec, rng)?,
                };
                let state = self.dino.as_mut().ok_or_else(|| Error::contract("variant C without distillation state"))?;
                let term = dino_term_for_step(&mut g, &self.discriminator, &dv, &real_views, &fake_views, state)?;
                let out = config_c_d_loss(
                    &mut g,
                    rl,
                    real_labels,
                    fl,
                    fake_labels,
                    weights,
                    self.cfg.gan_loss,
                    self.cfg.class_loss,
                    term,
                )?;
                (out.total, Some(out.class), Some(term))
            }
        };
        g.backward(loss)?;
        let mut params = self.discriminator.params_mut();
        absorb_grads(&g, &dv.all(), &mut params)?;
        adam_step(&mut params, &mut self.opt_d)?;
        let read = |v| g.value(v).item();
        Ok((
            read(loss)?,
            class.map(read).transpose()?,
            dino.map(read).transpose()?,
        ))
    }

    /// Generate `n` samples with uniform labels from a given stream.
    pub fn generate(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.cfg.classes)).collect();
        let z = latent_batch(n, self.cfg.latent_dim, rng);
        Ok((self.generator.sample(&z, &labels)?, labels))
    }
}

/// Standard normal latent codes, one row per sample.
pub fn latent_batch(batch: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![batch, dim], data).expect("positive dims")
}

/// Held-out sets drawn once per run so every evaluation compares like with like.
struct EvalSets {
    probe_x: Tensor,
    probe_y: Vec<usize>,
    ref_x: Tensor,
    ref_y: Vec<usize>,
}

fn evaluate(trainer: &Trainer, sets: &EvalSets, step: u64) -> Result<EvalReport> {
    // a fresh stream per evaluation step keeps evaluations independent of cadence
    let mut rng = stream(trainer.cfg.seed ^ step.rotate_left(32), streams::EVAL);
    let n = trainer.cfg.metrics_samples;
    let (fake, fake_y) = trainer.generate(n, &mut rng)?;
    let pooled = frechet_distance(
        &GaussianSummary::from_samples(&sets.ref_x)?,
        &GaussianSummary::from_samples(&fake)?,
    )?;
    let per_class = per_class_frechet(&sets.ref_x, &sets.ref_y, &fake, &fake_y, trainer.cfg.classes)?;
    let pr = knn_precision_recall(&sets.ref_x, &fake, trainer.cfg.metrics_k)?;
    let modes = trainer
        .dataset
        .mixture()
        .map(|m| mode_coverage(fake.data(), m, None).covered);
    Ok(EvalReport {
        frechet_pooled: pooled,
        frechet_per_class: per_class,
        precision: pr.precision,
        recall: pr.recall,
        modes_covered: modes,
    })
}

/// Final numbers of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub probe_top1: Option<f64>,
    pub probe_top3: Option<f64>,
    pub eval: EvalReport,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const RESOLVED_FILE: &str = "resolved-config.txt";

/// Run the whole schedule and write the log, final checkpoint and resolved
/// config into `outdir`. A non-finite loss writes a diagnostic line and aborts.
pub fn run_training(cfg: &TrainConfig, outdir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(outdir)?;
    std::fs::write(outdir.join(RESOLVED_FILE), cfg.resolved())?;
    let log_path = outdir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut trainer = Trainer::new(cfg.clone())?;

    let mut eval_rng = stream(cfg.seed, streams::PROBE);
    let (probe_x, probe_y) = trainer.dataset.sample_labeled(cfg.probe_samples, &mut eval_rng);
    let (ref_x, ref_y) = trainer.dataset.sample_labeled(cfg.metrics_samples, &mut eval_rng);
    let sets = EvalSets {
        probe_x,
        probe_y,
        ref_x,
        ref_y,
    };

    let mut summary = RunSummary {
        log_path: log_path.clone(),
        checkpoint_path: outdir.join(CHECKPOINT_FILE),
        ..RunSummary::default()
    };
    let mut window_start = Instant::now();
    let mut window_steps = 0u64;
    for step in 1..=cfg.steps {
        let losses = match trainer.train_step() {
            Ok(l) => l,
            // non-finite weights surface as domain errors inside ops
            Err(Error::Domain { .. }) if !trainer.weights_finite() => StepLosses {
                g_loss: f64::NAN,
                d_loss: f64::NAN,
                class_loss: None,
                dino_loss: None,
            },
            Err(e) => return Err(e),
        };
        window_steps += 1;
        if !losses.finite() {
            let diag = serde_json::json!({
                "step": step,
                "abort": "non_finite_loss",
                "g_loss": losses.g_loss.to_string(),
                "d_loss": losses.d_loss.to_string(),
                "class_loss": losses.class_loss.map(|v| v.to_string()),
                "dino_loss": losses.dino_loss.map(|v| v.to_string()),
            });
            writeln!(log, "{diag}")?;
            log.flush()?;
            return Err(Error::NonFinite {
                step,
                g_loss: losses.g_loss,
                d_loss: losses.d_loss,
            });
        }
        let last = step == cfg.steps;
        let do_probe = step % cfg.probe_every == 0 || last;
        let do_metrics = step % cfg.metrics_every == 0 || last;
        if !(do_probe || do_metrics || step % cfg.log_every == 0) {
            continue;
        }
        let iter_ms = cfg
            .log_iter_ms
            .then(|| window_start.elapsed().as_secs_f64() * 1e3 / window_steps as f64);
        let mut rec = RunLogRecord {
            step,
            g_loss: Some(losses.g_loss),
            d_loss: Some(losses.d_loss),
            class_loss: losses.class_loss,
            dino_loss: losses.dino_loss,
            iter_ms,
            ..RunLogRecord::default()
        };
        if do_probe {
            let rep = probe_auto(&trainer.discriminator, &sets.probe_x, &sets.probe_y, &cfg.probe_ks, step)?;
            rec.probe_top1 = rep.accuracy(1);
            rec.probe_top3 = rep.accuracy(3);
            summary.probe_top1 = rec.probe_top1;
            summary.probe_top3 = rec.probe_top3;
        }
        if do_metrics {
            let ev = evaluate(&trainer, &sets, step)?;
            rec.frechet_pooled = Some(ev.frechet_pooled);
            rec.frechet_per_class = Some(ev.frechet_per_class.clone());
            rec.precision = Some(ev.precision);
            rec.recall = Some(ev.recall);
            rec.modes_covered = ev.modes_covered;
            summary.eval = ev;
        }
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        window_start = Instant::now();
        window_steps = 0;
    }
    log.flush()?;
    trainer.checkpoint().save(&summary.checkpoint_path)?;
    summary.steps = cfg.steps;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::for_variant(variant);
        cfg.apply_overrides(&[
            "steps=4",
            "batch=16",
            "model.g_hidden=16",
            "model.d_hidden=16",
            "model.feature_dim=8",
            "probe.every=2",
            "probe.samples=64",
            "metrics.every=4",
            "metrics.samples=64",
            "log.every=1",
            "log.iter_ms=false",
        ])
        .unwrap();
        cfg
    }

    #[test]
    fn every_variant_steps_with_finite_losses() {
        for v in [Variant::A, Variant::B, Variant::C] {
            let mut t = Trainer::new(tiny(v)).unwrap();
            for _ in 0..3 {
                let l = t.train_step().unwrap();
                assert!(l.finite());
                assert_eq!(l.class_loss.is_some(), v != Variant::A);
                assert_eq!(l.dino_loss.is_some(), v == Variant::C);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut cfg = tiny(Variant::B);
        cfg.apply_overrides(&["optim.g.lr=0", "optim.d.lr=0"]).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let (g0, d0) = (t.generator.clone(), t.discriminator.clone());
        t.train_step().unwrap();
        assert_eq!(t.generator, g0);
        assert_eq!(t.discriminator, d0);
    }

    #[test]
    fn distillation_center_moves_twice_per_step() {
        let mut cfg = tiny(Variant::C);
        cfg.apply_overrides(&["lambda2=0"]).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let c0 = t.dino.clone().unwrap();
        t.train_step().unwrap();
        assert_ne!(t.dino.as_ref().unwrap().center(), c0.center());
    }
}
