//! Central-difference checks of tape gradients through the real networks.
//!
//! [`LossPath`] enumerates every training loss; [`LossPath::check`] builds a
//! small random problem from a seed and reports the worst relative error
//! over sampled parameter coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dino::{dino_loss, run_student, run_teacher, DinoState};
use crate::error::Result;
use crate::losses::{
    class_loss, config_c_d_loss, ucd_d_loss, ucd_g_loss, vanilla_d_loss, vanilla_g_loss, ClassLossKind,
    GanLossKind, LossWeights,
};
use crate::nets::{CondSpec, DiscriminatorNet, DiscriminatorVars, GeneratorNet, GeneratorVars, HeadKind};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::latent_batch;

pub const STEP: f64 = 1e-5;
/// Denominator floor: gradients smaller than this are compared absolutely,
/// since central differences at [`STEP`] carry about `1e-10` of noise.
pub const FLOOR: f64 = 1e-6;

pub type LossBuilder<'a> =
    dyn Fn(&mut Graph, &GeneratorNet, &GeneratorVars, &DiscriminatorNet, &DiscriminatorVars) -> Result<Var> + 'a;

fn loss_value(gen: &GeneratorNet, disc: &DiscriminatorNet, build: &LossBuilder) -> Result<f64> {
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, true);
    let dv = disc.bind(&mut g, true);
    let loss = build(&mut g, gen, &gv, disc, &dv)?;
    g.value(loss).item()
}

/// Worst of `|a - n| / max(|a|, |n|, FLOOR)` over `coords` coordinates drawn
/// uniformly from all generator and discriminator parameters.
pub fn max_relative_error(
    gen: &GeneratorNet,
    disc: &DiscriminatorNet,
    build: &LossBuilder,
    coords: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, true);
    let dv = disc.bind(&mut g, true);
    let loss = build(&mut g, gen, &gv, disc, &dv)?;
    g.backward(loss)?;
    let n_gen = gv.all().len();
    let vars: Vec<Var> = gv.all().into_iter().chain(dv.all()).collect();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let p = rng.random_range(0..vars.len());
        let i = rng.random_range(0..analytic[p].len());
        let at = |delta: f64| {
            let (mut gen, mut disc) = (gen.clone(), disc.clone());
            if p < n_gen {
                gen.params_mut()[p].data_mut()[i] += delta;
            } else {
                disc.params_mut()[p - n_gen].data_mut()[i] += delta;
            }
            loss_value(&gen, &disc, build)
        };
        let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
        let a = analytic[p][i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
    }
    Ok(worst)
}

/// One differentiable training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossPath {
    ConditionalG(GanLossKind),
    ConditionalD(GanLossKind),
    Classification(ClassLossKind),
    UnconditionalG(GanLossKind),
    UnconditionalD(GanLossKind, ClassLossKind),
    /// Unconditional objective plus self-distillation, teacher held fixed.
    Distillation(GanLossKind),
}

const GANS: [GanLossKind; 2] = [GanLossKind::LeastSquares, GanLossKind::NonSaturating];
const CLASSES: [ClassLossKind; 2] = [ClassLossKind::CrossEntropy, ClassLossKind::MulticlassHinge { margin: 1.0 }];

const K: usize = 4;
const BATCH: usize = 6;
const LATENT: usize = 3;

impl LossPath {
    pub fn all() -> Vec<LossPath> {
        let mut out = Vec::new();
        for g in GANS {
            out.extend([LossPath::ConditionalG(g), LossPath::ConditionalD(g), LossPath::UnconditionalG(g)]);
            out.extend(CLASSES.map(|c| LossPath::UnconditionalD(g, c)));
            out.push(LossPath::Distillation(g));
        }
        out.extend(CLASSES.map(LossPath::Classification));
        out
    }

    fn head(self) -> HeadKind {
        match self {
            LossPath::ConditionalG(_) | LossPath::ConditionalD(_) => HeadKind::ConditionalScalar,
            _ => HeadKind::UnconditionalLogits,
        }
    }

    /// Worst relative error at the random parameter point `seed`.
    pub fn check(self, seed: u64, coords: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = GeneratorNet::init(CondSpec::new(K, 3)?, LATENT, &[8, 8], 2, &mut rng);
        let disc = DiscriminatorNet::init(2, &[8, 8], 6, K, self.head(), &mut rng);
        let z = latent_batch(BATCH, LATENT, &mut rng);
        let real = latent_batch(BATCH, 2, &mut rng);
        let y: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..K)).collect();
        let w = LossWeights::new(0.3, 0.7)?;
        let w_b = LossWeights { lambda2: 0.0, ..w };

        // teacher targets for the distillation path, computed once
        let views: Vec<Tensor> = (0..2).map(|_| latent_batch(BATCH, 2, &mut rng)).collect();
        let mut state = DinoState::new(K, 0.1, 0.9)?;
        let teachers = match self {
            LossPath::Distillation(_) => views
                .iter()
                .map(|v| {
                    let shifted = latent_batch(BATCH, 2, &mut rng);
                    let mixed: Vec<f64> = v.data().iter().zip(shifted.data()).map(|(a, b)| a + 0.1 * b).collect();
                    run_teacher(&disc.logits_eval(&Tensor::new(v.shape().to_vec(), mixed)?)?, &mut state)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };

        let build = |g: &mut Graph, gen: &GeneratorNet, gv: &GeneratorVars, d: &DiscriminatorNet, dv: &DiscriminatorVars| -> Result<Var> {
            let zv = g.constant(z.clone());
            let rv = g.constant(real.clone());
            match self {
                LossPath::ConditionalG(kind) => {
                    let x = gen.forward(g, gv, zv, &y)?;
                    let s = d.conditional(g, dv, x, &y)?;
                    vanilla_g_loss(g, s, kind)
                }
                LossPath::ConditionalD(kind) => {
                    let fake = gen.forward(g, gv, zv, &y)?;
                    let rs = d.conditional(g, dv, rv, &y)?;
                    let fs = d.conditional(g, dv, fake, &y)?;
                    vanilla_d_loss(g, rs, fs, kind)
                }
                LossPath::Classification(kind) => {
                    let l = d.logits(g, dv, rv)?;
                    class_loss(g, l, &y, kind)
                }
                LossPath::UnconditionalG(kind) => {
                    let x = gen.forward(g, gv, zv, &y)?;
                    let l = d.logits(g, dv, x)?;
                    ucd_g_loss(g, l, &y, kind)
                }
                LossPath::UnconditionalD(gan, class) => {
                    let fake = gen.forward(g, gv, zv, &y)?;
                    let rl = d.logits(g, dv, rv)?;
                    let fl = d.logits(g, dv, fake)?;
                    Ok(ucd_d_loss(g, rl, &y, fl, &y, w_b, gan, class)?.total)
                }
                LossPath::Distillation(gan) => {
                    let fake = gen.forward(g, gv, zv, &y)?;
                    let rl = d.logits(g, dv, rv)?;
                    let fl = d.logits(g, dv, fake)?;
                    let mut terms = Vec::new();
                    for (v, t) in views.iter().zip(&teachers) {
                        let x = g.constant(v.clone());
                        let l = d.logits(g, dv, x)?;
                        let s = run_student(g, l);
                        terms.push(dino_loss(g, t, s)?);
                    }
                    let sum = g.add(terms[0], terms[1])?;
                    let term = g.scale(sum, 0.5);
                    let ce = ClassLossKind::CrossEntropy;
                    Ok(config_c_d_loss(g, rl, &y, fl, &y, w, gan, ce, term)?.total)
                }
            }
        };
        max_relative_error(&gen, &disc, &build, coords, &mut rng)
    }
}
