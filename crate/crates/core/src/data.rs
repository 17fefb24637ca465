//! Labeled synthetic datasets and augmented views.
//!
//! Every random draw in a run comes from a ChaCha stream derived from the run
//! seed with [`stream`]; each consumer owns a fixed stream index so adding
//! draws in one place never shifts another.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stream indices handed to [`stream`].
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT_G: u64 = 1;
    pub const INIT_D: u64 = 2;
    pub const LATENT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
}

/// Independent generator `k` for a run seeded with `seed`.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Minimum distance between class means in units of sigma.
pub const MIN_SEPARATION: f64 = 6.0;

/// Isotropic Gaussian mixture with one component per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl Mixture {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Validation("mixture needs at least one class".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("class means must be finite and of equal positive dimension".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Mixture { means, sigma })
    }

    /// `n` means evenly spaced on a circle, the first on the positive x axis.
    pub fn ring(n: usize, radius: f64, sigma: f64) -> Result<Self> {
        let means = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, sigma)?.separated()
    }

    /// `side x side` means on a square lattice centered at the origin.
    pub fn grid(side: usize, spacing: f64, sigma: f64) -> Result<Self> {
        let off = (side as f64 - 1.0) / 2.0;
        let mut means = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                means.push(vec![(i as f64 - off) * spacing, (j as f64 - off) * spacing]);
            }
        }
        Self::new(means, sigma)?.separated()
    }

    fn separated(self) -> Result<Self> {
        let r = self.separation_ratio();
        if r < MIN_SEPARATION {
            return Err(Error::Validation(format!(
                "class means are {r:.3} sigma apart, need at least {MIN_SEPARATION}"
            )));
        }
        Ok(self)
    }

    /// Smallest distance between two means divided by sigma.
    pub fn separation_ratio(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                best = best.min(dist(&self.means[i], &self.means[j]));
            }
        }
        best / self.sigma
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Draw `batch` points with uniform labels.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.classes())).collect();
        let x = self.sample_given(&labels, rng);
        (x, labels)
    }

    /// Draw one point per label.
    pub fn sample_given(&self, labels: &[usize], rng: &mut impl Rng) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(labels.len() * d);
        for &c in labels {
            for &m in &self.means[c] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + self.sigma * z);
            }
        }
        Tensor::new(vec![labels.len(), d], data).expect("non-empty batch")
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Labeled points held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    x: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != labels.len() {
            return Err(Error::Validation("samples must be [n, d] with one label per row".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        Ok(LabeledSet { x, labels, classes })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Uniformly resample rows with replacement.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.x.select_rows(&idx), labels)
    }

    /// Read the `label,x_0,...,x_{d-1}` layout. Errors name the file line.
    pub fn load_csv(path: &Path, classes: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("line 1: {e}")))?
            .clone();
        let dim = headers.len().saturating_sub(1);
        if headers.get(0) != Some("label") || dim == 0 {
            return Err(Error::Format("line 1: header must be label,x_0,...".into()));
        }
        let (mut data, mut labels) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Format(format!("line {line}: {e}")))?;
            let bad = |m: String| Error::Format(format!("line {line}: {m}"));
            let label: usize = rec[0]
                .trim()
                .parse()
                .map_err(|e| bad(format!("label {:?}: {e}", &rec[0])))?;
            if label >= classes {
                return Err(bad(format!("label {label} out of range for {classes} classes")));
            }
            for f in rec.iter().skip(1) {
                let v: f64 = f.trim().parse().map_err(|e| bad(format!("value {f:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value {f:?}")));
                }
                data.push(v);
            }
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::Validation(format!("{}: no samples", path.display())));
        }
        LabeledSet::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labeled_csv(path, &self.x, &self.labels)
    }
}

/// Write samples in the dataset layout; floats use the shortest exact form.
pub fn write_labeled_csv(path: &Path, x: &Tensor, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let d = x.last_dim();
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (i, l) in labels.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(x.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Mixture(Mixture),
    File(LabeledSet),
}

impl Dataset {
    pub fn classes(&self) -> usize {
        match self {
            Dataset::Mixture(m) => m.classes(),
            Dataset::File(s) => s.classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Mixture(m) => m.dim(),
            Dataset::File(s) => s.x().last_dim(),
        }
    }

    pub fn sample_labeled(&self, batch: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        match self {
            Dataset::Mixture(m) => m.sample(batch, rng),
            Dataset::File(s) => s.sample(batch, rng),
        }
    }

    pub fn mixture(&self) -> Option<&Mixture> {
        match self {
            Dataset::Mixture(m) => Some(m),
            Dataset::File(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub jitter_std: f64,
    pub rotation_max: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            jitter_std: 0.02,
            rotation_max: 0.2,
            scale_lo: 0.9,
            scale_hi: 1.1,
        }
    }
}

impl AugmentSpec {
    /// Leaves samples untouched.
    pub fn identity() -> Self {
        AugmentSpec {
            jitter_std: 0.0,
            rotation_max: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.jitter_std >= 0.0
            && self.rotation_max >= 0.0
            && self.scale_lo > 0.0
            && self.scale_lo <= self.scale_hi
            && [self.jitter_std, self.rotation_max, self.scale_lo, self.scale_hi]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid augmentation {self:?}")))
        }
    }
}

/// Per sample: rotate the first two coordinates about the origin, scale,
/// then add Gaussian jitter. Disabled parts draw nothing and leave values
/// bit-identical.
pub fn augment(x: &Tensor, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<Tensor> {
    spec.validate()?;
    let d = x.last_dim();
    let mut out = x.clone().into_data();
    let rot = (spec.rotation_max > 0.0)
        .then(|| Uniform::new_inclusive(-spec.rotation_max, spec.rotation_max).expect("finite range"));
    let scale = (spec.scale_lo != 1.0 || spec.scale_hi != 1.0)
        .then(|| Uniform::new_inclusive(spec.scale_lo, spec.scale_hi).expect("finite range"));
    for row in out.chunks_mut(d) {
        if let (Some(u), true) = (&rot, d >= 2) {
            let a: f64 = u.sample(rng);
            let (s, c) = a.sin_cos();
            let (x0, x1) = (row[0], row[1]);
            row[0] = c * x0 - s * x1;
            row[1] = s * x0 + c * x1;
        }
        if let Some(u) = &scale {
            let k: f64 = u.sample(rng);
            row.iter_mut().for_each(|v| *v *= k);
        }
        if spec.jitter_std > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += spec.jitter_std * z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
