//! Generator and discriminator MLPs for the three training configurations.
//!
//! The discriminator shares one backbone across head kinds. The conditional
//! head is a projection head (`ψ(f) + ⟨embed(c), f⟩`) used by the baseline;
//! the unconditional head maps features to one logit per class and never
//! reads the condition.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Graph, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Size of the label set and of the generator's label embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CondSpec {
    pub cardinality: usize,
    pub embedding_dim: usize,
}

impl CondSpec {
    pub fn new(cardinality: usize, embedding_dim: usize) -> Result<Self> {
        if cardinality < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {cardinality}"
            )));
        }
        if embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be positive".into()));
        }
        Ok(CondSpec {
            cardinality,
            embedding_dim,
        })
    }
}

/// Constant one-hot rows for `labels`.
pub fn one_hot(labels: &[usize], cardinality: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * cardinality];
    for (i, &c) in labels.iter().enumerate() {
        if c >= cardinality {
            return Err(Error::domain(
                "one_hot",
                format!("label {c} out of range for {cardinality} classes"),
            ));
        }
        data[i * cardinality + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), cardinality], data)
}

/// Component `labels[r]` of every logit row, kept in the graph.
pub fn select_logit(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.gather(logits, labels)
}

/// Component `c` of a single logit vector.
pub fn select_logit_row(logits: &[f64], c: usize) -> Result<f64> {
    logits.get(c).copied().ok_or_else(|| {
        Error::domain(
            "select_logit",
            format!("label {c} out of range for {} logits", logits.len()),
        )
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub w: Tensor,
    /// `[fan_out]`
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    /// Uniform He-style init `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Linear {
            w: Tensor::new(vec![fan_in, fan_out], data).expect("positive dims"),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        LinearVars {
            w: g.param(&self.w, trainable),
            b: g.param(&self.b, trainable),
        }
    }

    pub fn forward(g: &mut Graph, vars: &LinearVars, x: Var) -> Result<Var> {
        let y = g.matmul(x, vars.w)?;
        g.add(y, vars.b)
    }
}

/// Stack of linear layers with leaky-ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply the activation after the last layer too.
    pub activate_last: bool,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(widths: &[usize], activate_last: bool, rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            activate_last,
        }
    }

    pub fn zeros(widths: &[usize], activate_last: bool) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            activate_last,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").fan_out()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<LinearVars> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[LinearVars], x: Var) -> Result<Var> {
        let mut h = x;
        let last = vars.len() - 1;
        for (i, lv) in vars.iter().enumerate() {
            h = Linear::forward(g, lv, h)?;
            if i < last || self.activate_last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.l{i}.w"), &l.w));
            out.push((format!("{prefix}.l{i}.b"), &l.b));
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
    }
}

fn flatten_linear_vars(vars: &[LinearVars], out: &mut Vec<Var>) {
    for lv in vars {
        out.push(lv.w);
        out.push(lv.b);
    }
}

/// Pull the gradients of bound leaves back into the owning tensors.
/// A bound parameter the loss never touched receives a zero gradient.
pub fn absorb_grads(g: &Graph, vars: &[Var], params: &mut [&mut Tensor]) -> Result<()> {
    if vars.len() != params.len() {
        return Err(Error::contract(format!(
            "{} bound vars for {} parameters",
            vars.len(),
            params.len()
        )));
    }
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        match g.grad(*v) {
            Some(gr) => p.accumulate_grad(gr)?,
            None => p.accumulate_grad(&vec![0.0; p.numel()])?,
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub cond: CondSpec,
    pub latent_dim: usize,
    /// `[cardinality, embedding_dim]`
    pub embed: Tensor,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub embed: Var,
    pub mlp: Vec<LinearVars>,
}

impl GeneratorVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        flatten_linear_vars(&self.mlp, &mut out);
        out
    }
}

impl GeneratorNet {
    /// `[latent ⊕ embed(c)] → hidden… → output_dim`, linear output.
    pub fn init<R: Rng + ?Sized>(
        cond: CondSpec,
        latent_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let embed_data = (0..cond.cardinality * cond.embedding_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let embed = Tensor::new(vec![cond.cardinality, cond.embedding_dim], embed_data)
            .expect("positive dims");
        let mut widths = vec![latent_dim + cond.embedding_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        GeneratorNet {
            cond,
            latent_dim,
            embed,
            mlp: Mlp::init(&widths, false, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            embed: g.param(&self.embed, trainable),
            mlp: self.mlp.bind(g, trainable),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &GeneratorVars,
        z: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim || zs[0] != labels.len() {
            return Err(Error::dim(
                "generator_forward",
                format!(
                    "latent {zs:?} with {} labels, latent_dim {}",
                    labels.len(),
                    self.latent_dim
                ),
            ));
        }
        let oh = g.constant(one_hot(labels, self.cond.cardinality)?);
        let e = g.matmul(oh, vars.embed)?;
        let input = g.concat(&[z, e], Axis::Cols)?;
        self.mlp.forward(g, &vars.mlp, input)
    }

    /// Gradient-free forward.
    pub fn sample(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &vars, zv, labels)?;
        Ok(g.value(out).clone())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("g.embed".to_string(), &self.embed)];
        self.mlp.named("g.mlp", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        self.mlp.params_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    ConditionalScalar,
    UnconditionalLogits,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// `ψ(f) + ⟨embed(c), f⟩`; `embed` is `[cardinality, feature_dim]`.
    Conditional { linear: Linear, embed: Tensor },
    /// `f ↦ W f + b ∈ R^cardinality`.
    Unconditional { linear: Linear },
}

#[derive(Clone, Debug)]
pub enum HeadVars {
    Conditional { linear: LinearVars, embed: Var },
    Unconditional { linear: LinearVars },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    pub cardinality: usize,
    pub backbone: Mlp,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    pub backbone: Vec<LinearVars>,
    pub head: HeadVars,
}

impl DiscriminatorVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        flatten_linear_vars(&self.backbone, &mut out);
        match &self.head {
            HeadVars::Conditional { linear, embed } => {
                out.push(linear.w);
                out.push(linear.b);
                out.push(*embed);
            }
            HeadVars::Unconditional { linear } => {
                out.push(linear.w);
                out.push(linear.b);
            }
        }
        out
    }
}

impl DiscriminatorNet {
    /// Backbone `input_dim → hidden… → feature_dim` (all activated) plus head.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        cardinality: usize,
        kind: HeadKind,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let backbone = Mlp::init(&widths, true, rng);
        let head = match kind {
            HeadKind::ConditionalScalar => {
                let linear = Linear::init(feature_dim, 1, rng);
                let bound = (6.0 / feature_dim as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let data = (0..cardinality * feature_dim)
                    .map(|_| dist.sample(rng))
                    .collect();
                Head::Conditional {
                    linear,
                    embed: Tensor::new(vec![cardinality, feature_dim], data)
                        .expect("positive dims"),
                }
            }
            HeadKind::UnconditionalLogits => Head::Unconditional {
                linear: Linear::init(feature_dim, cardinality, rng),
            },
        };
        DiscriminatorNet {
            cardinality,
            backbone,
            head,
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::Conditional { .. } => HeadKind::ConditionalScalar,
            Head::Unconditional { .. } => HeadKind::UnconditionalLogits,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DiscriminatorVars {
        let backbone = self.backbone.bind(g, trainable);
        let head = match &self.head {
            Head::Conditional { linear, embed } => HeadVars::Conditional {
                linear: linear.bind(g, trainable),
                embed: g.param(embed, trainable),
            },
            Head::Unconditional { linear } => HeadVars::Unconditional {
                linear: linear.bind(g, trainable),
            },
        };
        DiscriminatorVars { backbone, head }
    }

    pub fn features(&self, g: &mut Graph, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::dim(
                "discriminator",
                format!("input {xs:?}, expected [_, {}]", self.input_dim()),
            ));
        }
        self.backbone.forward(g, &vars.backbone, x)
    }

    /// Classification logits `d(x)`, one row of `cardinality` values per sample.
    pub fn logits(&self, g: &mut Graph, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
        let HeadVars::Unconditional { linear } = &vars.head else {
            return Err(Error::contract(
                "discriminator_logits needs an unconditional_logits head",
            ));
        };
        let f = self.features(g, vars, x)?;
        Linear::forward(g, linear, f)
    }

    /// Conditional scalar `D(x, c)` as a `[batch, 1]` column.
    pub fn conditional(
        &self,
        g: &mut Graph,
        vars: &DiscriminatorVars,
        x: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let HeadVars::Conditional { linear, embed } = &vars.head else {
            return Err(Error::contract(
                "discriminator_conditional needs a conditional_scalar head",
            ));
        };
        if g.shape(x)[0] != labels.len() {
            return Err(Error::dim(
                "discriminator_conditional",
                format!("{} rows with {} labels", g.shape(x)[0], labels.len()),
            ));
        }
        let f = self.features(g, vars, x)?;
        let base = Linear::forward(g, linear, f)?;
        let oh = g.constant(one_hot(labels, self.cardinality)?);
        let e = g.matmul(oh, *embed)?;
        let prod = g.mul(e, f)?;
        let proj = g.sum_last(prod);
        g.add(base, proj)
    }

    pub fn logits_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.logits(&mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn conditional_eval(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.conditional(&mut g, &vars, xv, labels)?;
        Ok(g.value(out).clone())
    }

    pub fn features_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.features(&mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.backbone.named("d.backbone", &mut out);
        match &self.head {
            Head::Conditional { linear, embed } => {
                out.push(("d.head.w".into(), &linear.w));
                out.push(("d.head.b".into(), &linear.b));
                out.push(("d.head.embed".into(), embed));
            }
            Head::Unconditional { linear } => {
                out.push(("d.head.w".into(), &linear.w));
                out.push(("d.head.b".into(), &linear.b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.backbone.params_mut(&mut out);
        match &mut self.head {
            Head::Conditional { linear, embed } => {
                out.push(&mut linear.w);
                out.push(&mut linear.b);
                out.push(embed);
            }
            Head::Unconditional { linear } => {
                out.push(&mut linear.w);
                out.push(&mut linear.b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_generator() -> GeneratorNet {
        let cond = CondSpec::new(3, 4).unwrap();
        GeneratorNet {
            cond,
            latent_dim: 2,
            embed: Tensor::zeros(&[3, 4]),
            mlp: Mlp::zeros(&[6, 8, 2], false),
        }
    }

    #[test]
    fn zero_weight_generator_outputs_final_bias() {
        let mut net = zero_generator();
        net.mlp.layers[1].b = Tensor::vector(vec![0.3, -1.5]).unwrap();
        let z = Tensor::from_rows(&[vec![5.0, -2.0], vec![0.1, 9.0]]).unwrap();
        let out = net.sample(&z, &[0, 2]).unwrap();
        assert_eq!(out.data(), &[0.3, -1.5, 0.3, -1.5]);
    }

    #[test]
    fn generator_is_deterministic() {
        let cond = CondSpec::new(4, 3).unwrap();
        let net = GeneratorNet::init(cond, 5, &[16, 16], 2, &mut rng());
        let again = GeneratorNet::init(cond, 5, &[16, 16], 2, &mut rng());
        assert_eq!(net, again);
        let z = Tensor::full(&[2, 5], 0.25);
        assert_eq!(
            net.sample(&z, &[1, 3]).unwrap(),
            net.sample(&z, &[1, 3]).unwrap()
        );
    }

    #[test]
    fn generator_rejects_out_of_range_label() {
        let net = zero_generator();
        let z = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            net.sample(&z, &[3]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn zero_discriminator_logits_are_bias_and_tie() {
        let mut d = DiscriminatorNet {
            cardinality: 3,
            backbone: Mlp::zeros(&[2, 4, 4], true),
            head: Head::Unconditional {
                linear: Linear::zeros(4, 3),
            },
        };
        if let Head::Unconditional { linear } = &mut d.head {
            linear.b = Tensor::vector(vec![0.5, 0.5, 0.5]).unwrap();
        }
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0]]).unwrap();
        let l = d.logits_eval(&x).unwrap();
        assert_eq!(l.shape(), &[2, 3]);
        assert!(l.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constructed_identity_path_reads_first_coordinate() {
        let mut d = DiscriminatorNet {
            cardinality: 2,
            backbone: Mlp::zeros(&[3, 4, 4], true),
            head: Head::Unconditional {
                linear: Linear::zeros(4, 2),
            },
        };
        d.backbone.layers[0].w.data_mut()[0] = 1.0; // x_0 -> h_0
        d.backbone.layers[1].w.data_mut()[0] = 1.0; // h_0 -> f_0
        if let Head::Unconditional { linear } = &mut d.head {
            linear.w.data_mut()[0] = 1.0; // f_0 -> logit_0
        }
        let x = Tensor::from_rows(&[vec![3.0, 7.0, -1.0]]).unwrap();
        let l = d.logits_eval(&x).unwrap();
        assert_eq!(l.data()[0], 3.0);
    }

    #[test]
    fn head_kind_mismatch_is_contract_error() {
        let mut r = rng();
        let cond_d = DiscriminatorNet::init(2, &[8], 4, 3, HeadKind::ConditionalScalar, &mut r);
        let unc_d = DiscriminatorNet::init(2, &[8], 4, 3, HeadKind::UnconditionalLogits, &mut r);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(cond_d.logits_eval(&x), Err(Error::Contract(_))));
        assert!(matches!(
            unc_d.conditional_eval(&x, &[0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_projection_makes_output_label_free() {
        let mut d = DiscriminatorNet::init(2, &[8], 4, 3, HeadKind::ConditionalScalar, &mut rng());
        if let Head::Conditional { embed, .. } = &mut d.head {
            *embed = Tensor::zeros(&[3, 4]);
        }
        let x = Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let a = d.conditional_eval(&x, &[0]).unwrap();
        let b = d.conditional_eval(&x, &[2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_embeddings_give_distinct_outputs() {
        let mut d = DiscriminatorNet::init(2, &[8], 4, 2, HeadKind::ConditionalScalar, &mut rng());
        if let Head::Conditional { embed, .. } = &mut d.head {
            *embed = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]]).unwrap();
        }
        d.backbone = Mlp::zeros(&[2, 8, 4], true);
        d.backbone.layers[0].b = Tensor::full(&[8], 1.0);
        d.backbone.layers[1].w = Tensor::full(&[8, 4], 0.5);
        // features are all 4.0, so the class-0 projection adds 4.0
        let x = Tensor::zeros(&[1, 2]);
        let a = d.conditional_eval(&x, &[0]).unwrap().data()[0];
        let b = d.conditional_eval(&x, &[1]).unwrap().data()[0];
        assert_eq!(a - b, 4.0);
    }

    #[test]
    fn select_logit_matches_mask_sum() {
        let logits = [0.1, 0.9];
        assert_eq!(select_logit_row(&logits, 1).unwrap(), 0.9);
        assert!(select_logit_row(&logits, 2).is_err());
        let rows = Tensor::from_rows(&[vec![0.1, 0.9], vec![-2.0, 3.5]]).unwrap();
        let labels = [1, 0];
        let mut g = Graph::new();
        let l = g.constant(rows.clone());
        let direct = select_logit(&mut g, l, &labels).unwrap();
        let mask = g.constant(one_hot(&labels, 2).unwrap());
        let masked = g.mul(l, mask).unwrap();
        let summed = g.sum_last(masked);
        assert_eq!(g.value(direct).data(), g.value(summed).data());
    }

    #[test]
    fn head_parameter_delta_matches_formula() {
        let (k, f) = (8usize, 128usize);
        let mut r = rng();
        let a = DiscriminatorNet::init(2, &[256, 256], f, k, HeadKind::ConditionalScalar, &mut r);
        let b = DiscriminatorNet::init(2, &[256, 256], f, k, HeadKind::UnconditionalLogits, &mut r);
        let embed_params = k * f;
        let delta = b.param_count() as i64 - a.param_count() as i64;
        assert_eq!(delta, ((k - 1) * (f + 1)) as i64 - embed_params as i64);
        assert_eq!(a.backbone.layers.len(), b.backbone.layers.len());
    }
}
