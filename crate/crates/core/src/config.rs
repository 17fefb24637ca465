//! Run configuration: a `key = value` text format with `[section]` headers
//! or dotted keys, `#` comments, and no unknown keys.
//!
//! ```text
//! variant = C
//! seed = 7
//! [data]
//! kind = ring
//! sigma = 0.05
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{AugmentSpec, Dataset, LabeledSet, Mixture};
use crate::dino::{DEFAULT_MOMENTUM, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::losses::{ClassLossKind, GanLossKind, LossWeights};
use crate::nets::HeadKind;
use crate::tensor::AdamConfig;

/// Baseline conditional discriminator, unconditional discriminator with a
/// classification loss, and the latter plus self-distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub fn head_kind(self) -> HeadKind {
        match self {
            Variant::A => HeadKind::ConditionalScalar,
            Variant::B | Variant::C => HeadKind::UnconditionalLogits,
        }
    }

    /// Best settings of the paper's weight ablation for each variant.
    pub fn default_weights(self) -> LossWeights {
        match self {
            Variant::A => LossWeights { lambda1: 0.0, lambda2: 0.0 },
            Variant::B => LossWeights { lambda1: 0.02, lambda2: 0.0 },
            Variant::C => LossWeights { lambda1: 0.01, lambda2: 0.1 },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Ring { radius: f64 },
    Grid { spacing: f64 },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    pub gan_loss: GanLossKind,
    pub class_loss: ClassLossKind,
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub dino_tau: f64,
    pub dino_momentum: f64,
    pub optim_g: AdamConfig,
    pub optim_d: AdamConfig,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub data: DataSource,
    pub classes: usize,
    pub sigma: f64,
    pub augment: AugmentSpec,
    pub probe_every: u64,
    pub probe_samples: usize,
    pub probe_ks: Vec<usize>,
    pub metrics_every: u64,
    pub metrics_samples: usize,
    pub metrics_k: usize,
    pub log_every: u64,
    pub log_iter_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::C,
            lambda1: None,
            lambda2: None,
            gan_loss: GanLossKind::LeastSquares,
            class_loss: ClassLossKind::CrossEntropy,
            seed: 0,
            steps: 20_000,
            batch: 256,
            dino_tau: DEFAULT_TAU,
            dino_momentum: DEFAULT_MOMENTUM,
            optim_g: AdamConfig::default(),
            optim_d: AdamConfig::default(),
            latent_dim: 16,
            embedding_dim: 16,
            g_hidden: vec![256, 256],
            d_hidden: vec![256, 256],
            feature_dim: 128,
            data: DataSource::Ring { radius: 2.0 },
            classes: 8,
            sigma: 0.05,
            augment: AugmentSpec::default(),
            probe_every: 500,
            probe_samples: 2048,
            probe_ks: vec![1, 3],
            metrics_every: 2000,
            metrics_samples: 50_000,
            metrics_k: 3,
            log_every: 100,
            log_iter_ms: true,
        }
    }
}

/// Every accepted key, in the order `resolved` prints them.
pub const KEYS: &[&str] = &[
    "variant",
    "lambda1",
    "lambda2",
    "gan_loss",
    "class_loss",
    "hinge_margin",
    "seed",
    "steps",
    "batch",
    "dino.tau",
    "dino.momentum",
    "optim.g.lr",
    "optim.g.beta1",
    "optim.g.beta2",
    "optim.g.eps",
    "optim.d.lr",
    "optim.d.beta1",
    "optim.d.beta2",
    "optim.d.eps",
    "model.latent_dim",
    "model.embedding_dim",
    "model.g_hidden",
    "model.d_hidden",
    "model.feature_dim",
    "data.kind",
    "data.classes",
    "data.sigma",
    "data.radius",
    "data.spacing",
    "data.path",
    "augment.jitter",
    "augment.rotation",
    "augment.scale_lo",
    "augment.scale_hi",
    "probe.every",
    "probe.samples",
    "probe.ks",
    "metrics.every",
    "metrics.samples",
    "metrics.k",
    "log.every",
    "log.iter_ms",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| num::<usize>(s.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{v:?}: expected true or false")),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            variant,
            ..Self::default()
        }
    }

    /// Effective loss weights: explicit values, else the variant's defaults.
    pub fn weights(&self) -> LossWeights {
        let d = self.variant.default_weights();
        LossWeights {
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: self.lambda2.unwrap_or(d.lambda2),
        }
    }

    pub fn set_weights(&mut self, lambda1: f64, lambda2: f64) {
        self.lambda1 = Some(lambda1);
        self.lambda2 = Some(lambda2);
    }

    /// Assign one key. The error message does not carry a line number.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let unquoted = v.trim_matches('"');
        match key {
            "variant" => {
                self.variant = match v {
                    "A" | "a" => Variant::A,
                    "B" | "b" => Variant::B,
                    "C" | "c" => Variant::C,
                    _ => return Err(format!("{v:?}: expected A, B or C")),
                }
            }
            "lambda1" => self.lambda1 = Some(num(v)?),
            "lambda2" => self.lambda2 = Some(num(v)?),
            "gan_loss" => {
                self.gan_loss = match v {
                    "least_squares" => GanLossKind::LeastSquares,
                    "non_saturating" => GanLossKind::NonSaturating,
                    _ => return Err(format!("{v:?}: expected least_squares or non_saturating")),
                }
            }
            "class_loss" => {
                let margin = match self.class_loss {
                    ClassLossKind::MulticlassHinge { margin } => margin,
                    ClassLossKind::CrossEntropy => 1.0,
                };
                self.class_loss = match v {
                    "cross_entropy" => ClassLossKind::CrossEntropy,
                    "hinge" => ClassLossKind::MulticlassHinge { margin },
                    _ => return Err(format!("{v:?}: expected cross_entropy or hinge")),
                }
            }
            "hinge_margin" => {
                let m: f64 = num(v)?;
                if !(m > 0.0) {
                    return Err(format!("{v:?}: margin must be positive"));
                }
                if let ClassLossKind::MulticlassHinge { margin } = &mut self.class_loss {
                    *margin = m;
                } else if m != 1.0 {
                    return Err("hinge_margin needs class_loss = hinge (set it first)".into());
                }
            }
            "seed" => self.seed = num(v)?,
            "steps" => self.steps = num(v)?,
            "batch" => self.batch = num(v)?,
            "dino.tau" => self.dino_tau = num(v)?,
            "dino.momentum" => self.dino_momentum = num(v)?,
            "optim.g.lr" => self.optim_g.lr = num(v)?,
            "optim.g.beta1" => self.optim_g.beta1 = num(v)?,
            "optim.g.beta2" => self.optim_g.beta2 = num(v)?,
            "optim.g.eps" => self.optim_g.eps = num(v)?,
            "optim.d.lr" => self.optim_d.lr = num(v)?,
            "optim.d.beta1" => self.optim_d.beta1 = num(v)?,
            "optim.d.beta2" => self.optim_d.beta2 = num(v)?,
            "optim.d.eps" => self.optim_d.eps = num(v)?,
            "model.latent_dim" => self.latent_dim = num(v)?,
            "model.embedding_dim" => self.embedding_dim = num(v)?,
            "model.g_hidden" => self.g_hidden = list(v)?,
            "model.d_hidden" => self.d_hidden = list(v)?,
            "model.feature_dim" => self.feature_dim = num(v)?,
            "data.kind" => {
                self.data = match v {
                    "ring" => DataSource::Ring { radius: 2.0 },
                    "grid" => DataSource::Grid { spacing: 1.0 },
                    "file" => DataSource::File { path: PathBuf::new() },
                    _ => return Err(format!("{v:?}: expected ring, grid or file")),
                }
            }
            "data.classes" => self.classes = num(v)?,
            "data.sigma" => self.sigma = num(v)?,
            "data.radius" => match &mut self.data {
                DataSource::Ring { radius } => *radius = num(v)?,
                _ => return Err("data.radius applies to data.kind = ring".into()),
            },
            "data.spacing" => match &mut self.data {
                DataSource::Grid { spacing } => *spacing = num(v)?,
                _ => return Err("data.spacing applies to data.kind = grid".into()),
            },
            "data.path" => match &mut self.data {
                DataSource::File { path } => *path = PathBuf::from(unquoted),
                _ => return Err("data.path applies to data.kind = file".into()),
            },
            "augment.jitter" => self.augment.jitter_std = num(v)?,
            "augment.rotation" => self.augment.rotation_max = num(v)?,
            "augment.scale_lo" => self.augment.scale_lo = num(v)?,
            "augment.scale_hi" => self.augment.scale_hi = num(v)?,
            "probe.every" => self.probe_every = num(v)?,
            "probe.samples" => self.probe_samples = num(v)?,
            "probe.ks" => self.probe_ks = list(v)?,
            "metrics.every" => self.metrics_every = num(v)?,
            "metrics.samples" => self.metrics_samples = num(v)?,
            "metrics.k" => self.metrics_k = num(v)?,
            "log.every" => self.log_every = num(v)?,
            "log.iter_ms" => self.log_iter_ms = flag(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Current value of a key in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let w = self.weights();
        let f = |x: f64| format!("{x:?}");
        Some(match key {
            "variant" => self.variant.to_string(),
            "lambda1" => f(w.lambda1),
            "lambda2" => f(w.lambda2),
            "gan_loss" => match self.gan_loss {
                GanLossKind::LeastSquares => "least_squares".into(),
                GanLossKind::NonSaturating => "non_saturating".into(),
            },
            "class_loss" => match self.class_loss {
                ClassLossKind::CrossEntropy => "cross_entropy".into(),
                ClassLossKind::MulticlassHinge { .. } => "hinge".into(),
            },
            "hinge_margin" => match self.class_loss {
                ClassLossKind::CrossEntropy => f(1.0),
                ClassLossKind::MulticlassHinge { margin } => f(margin),
            },
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "dino.tau" => f(self.dino_tau),
            "dino.momentum" => f(self.dino_momentum),
            "optim.g.lr" => f(self.optim_g.lr),
            "optim.g.beta1" => f(self.optim_g.beta1),
            "optim.g.beta2" => f(self.optim_g.beta2),
            "optim.g.eps" => f(self.optim_g.eps),
            "optim.d.lr" => f(self.optim_d.lr),
            "optim.d.beta1" => f(self.optim_d.beta1),
            "optim.d.beta2" => f(self.optim_d.beta2),
            "optim.d.eps" => f(self.optim_d.eps),
            "model.latent_dim" => self.latent_dim.to_string(),
            "model.embedding_dim" => self.embedding_dim.to_string(),
            "model.g_hidden" => join(&self.g_hidden),
            "model.d_hidden" => join(&self.d_hidden),
            "model.feature_dim" => self.feature_dim.to_string(),
            "data.kind" => match self.data {
                DataSource::Ring { .. } => "ring".into(),
                DataSource::Grid { .. } => "grid".into(),
                DataSource::File { .. } => "file".into(),
            },
            "data.classes" => self.classes.to_string(),
            "data.sigma" => f(self.sigma),
            "data.radius" => match self.data {
                DataSource::Ring { radius } => f(radius),
                _ => return None,
            },
            "data.spacing" => match self.data {
                DataSource::Grid { spacing } => f(spacing),
                _ => return None,
            },
            "data.path" => match &self.data {
                DataSource::File { path } => format!("{:?}", path.display().to_string()),
                _ => return None,
            },
            "augment.jitter" => f(self.augment.jitter_std),
            "augment.rotation" => f(self.augment.rotation_max),
            "augment.scale_lo" => f(self.augment.scale_lo),
            "augment.scale_hi" => f(self.augment.scale_hi),
            "probe.every" => self.probe_every.to_string(),
            "probe.samples" => self.probe_samples.to_string(),
            "probe.ks" => join(&self.probe_ks),
            "metrics.every" => self.metrics_every.to_string(),
            "metrics.samples" => self.metrics_samples.to_string(),
            "metrics.k" => self.metrics_k.to_string(),
            "log.every" => self.log_every.to_string(),
            "log.iter_ms" => self.log_iter_ms.to_string(),
            _ => return None,
        })
    }

    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(Some(line_no), "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(line_no), format!("expected `key = value`, got {line:?}")))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v).map_err(|m| Error::config(Some(line_no), m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: None,
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides in order, then re-validate.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(None, format!("override {o:?} is not KEY=VALUE")))?;
            self.set(k.trim(), v)
                .map_err(|m| Error::config(None, format!("override {}: {m}", k.trim())))?;
        }
        self.validate()
    }

    /// Every effective setting, one `key = value` per line, re-parseable.
    pub fn resolved(&self) -> String {
        KEYS.iter()
            .filter_map(|k| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(None, m));
        let w = self.weights();
        LossWeights::new(w.lambda1, w.lambda2).map_err(|e| Error::config(None, e.to_string()))?;
        match self.variant {
            Variant::A if w.lambda1 != 0.0 || w.lambda2 != 0.0 => {
                return err("variant A takes lambda1 = lambda2 = 0".into())
            }
            Variant::B if w.lambda2 != 0.0 => return err("variant B takes lambda2 = 0".into()),
            _ => {}
        }
        if self.batch == 0 || self.steps == 0 {
            return err("batch and steps must be positive".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(self.dino_tau > 0.0) || !(0.0..1.0).contains(&self.dino_momentum) {
            return err("dino.tau must be positive and dino.momentum in [0, 1)".into());
        }
        for (name, o) in [("g", &self.optim_g), ("d", &self.optim_d)] {
            let ok = o.lr >= 0.0
                && (0.0..1.0).contains(&o.beta1)
                && (0.0..1.0).contains(&o.beta2)
                && o.eps > 0.0;
            if !ok {
                return err(format!("optim.{name} settings out of range"));
            }
        }
        if self.latent_dim == 0
            || self.embedding_dim == 0
            || self.feature_dim == 0
            || self.g_hidden.contains(&0)
            || self.d_hidden.contains(&0)
        {
            return err("model widths must be positive".into());
        }
        if self.probe_ks.is_empty() || self.probe_ks.iter().any(|&k| k == 0 || k > self.classes) {
            return err(format!("probe.ks must lie in 1..={}", self.classes));
        }
        if self.probe_every == 0 || self.metrics_every == 0 || self.log_every == 0 {
            return err("cadences must be positive".into());
        }
        if self.probe_samples == 0 || self.metrics_samples <= self.metrics_k || self.metrics_k == 0 {
            return err("probe.samples must be positive and metrics.samples above metrics.k".into());
        }
        if let DataSource::Grid { .. } = self.data {
            let side = (self.classes as f64).sqrt().round() as usize;
            if side * side != self.classes {
                return err("grid data needs a square number of classes".into());
            }
        }
        self.augment.validate().map_err(|e| Error::config(None, e.to_string()))?;
        Ok(())
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        Ok(match &self.data {
            DataSource::Ring { radius } => Dataset::Mixture(Mixture::ring(self.classes, *radius, self.sigma)?),
            DataSource::Grid { spacing } => {
                let side = (self.classes as f64).sqrt().round() as usize;
                Dataset::Mixture(Mixture::grid(side, *spacing, self.sigma)?)
            }
            DataSource::File { path } => Dataset::File(LabeledSet::load_csv(path, self.classes)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = TrainConfig::default();
        let text = cfg.resolved();
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(back.resolved(), text);
        for k in KEYS {
            if let Some(v) = cfg.get(k) {
                let mut c = cfg.clone();
                c.set(k, &v).unwrap();
            }
        }
    }

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a = TrainConfig::parse("[data]\nsigma = 0.04\n[optim.d]\nlr = 1e-3\n").unwrap();
        let b = TrainConfig::parse("data.sigma = 0.04\noptim.d.lr = 0.001\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = TrainConfig::parse("seed = 1\n\nbogus = 3\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, Some(3));
                assert!(msg.contains("bogus"));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn variant_weight_defaults_and_constraints() {
        assert_eq!(TrainConfig::for_variant(Variant::B).weights().lambda1, 0.02);
        let c = TrainConfig::for_variant(Variant::C).weights();
        assert_eq!((c.lambda1, c.lambda2), (0.01, 0.1));
        assert!(TrainConfig::parse("variant = A\nlambda1 = 0.1\n").is_err());
        assert!(TrainConfig::parse("variant = B\nlambda2 = 0.1\n").is_err());
        let mut cfg = TrainConfig::for_variant(Variant::C);
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
        cfg.apply_overrides(&["lambda2=0.5", "seed=9"]).unwrap();
        assert_eq!((cfg.weights().lambda2, cfg.seed), (0.5, 9));
    }
}
