//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`: the magic `UCDG`, a format
//! version, the tensor count, then per tensor the name length, UTF-8 name,
//! rank, dims, and the data as little-endian `f64`. Architectures are
//! recovered from tensor names and shapes, so a file is self-describing.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dino::DinoState;
use crate::error::{Error, Result};
use crate::nets::{CondSpec, DiscriminatorNet, GeneratorNet, Head, Linear, Mlp};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UCDG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub dino: Option<DinoState>,
}

impl Checkpoint {
    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .generator
            .named_params()
            .into_iter()
            .chain(self.discriminator.named_params())
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(d) = &self.dino {
            out.push((
                "dino.center".into(),
                Tensor::vector(d.center().to_vec()).expect("non-empty center"),
            ));
            out.push(("dino.tau".into(), Tensor::scalar(d.tau())));
            out.push(("dino.momentum".into(), Tensor::scalar(d.momentum())));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.named();
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let dims = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad(&name, "size overflow"))?, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| bad(&name, &e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(&name, "duplicate tensor"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        assemble(tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn bad(name: &str, msg: &str) -> Error {
    Error::Format(format!("tensor {name:?}: {msg}"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated checkpoint while reading {what}"
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn take_tensor(map: &mut BTreeMap<String, Tensor>, name: &str, rank: usize) -> Result<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
    if t.shape().len() != rank {
        return Err(bad(name, &format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(t)
}

fn take_mlp(map: &mut BTreeMap<String, Tensor>, prefix: &str, activate_last: bool) -> Result<Mlp> {
    let mut layers: Vec<Linear> = Vec::new();
    while map.contains_key(&format!("{prefix}.l{}.w", layers.len())) {
        let i = layers.len();
        let (wn, bn) = (format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b"));
        let w = take_tensor(map, &wn, 2)?;
        let b = take_tensor(map, &bn, 1)?;
        if b.shape()[0] != w.shape()[1] {
            return Err(bad(&bn, &format!("length {} does not match {wn} {:?}", b.shape()[0], w.shape())));
        }
        if let Some(prev) = layers.last() {
            if prev.fan_out() != w.shape()[0] {
                return Err(bad(&wn, &format!("input width {} after layer of width {}", w.shape()[0], prev.fan_out())));
            }
        }
        layers.push(Linear { w, b });
    }
    if layers.is_empty() {
        return Err(Error::Format(format!("missing tensor \"{prefix}.l0.w\"")));
    }
    Ok(Mlp {
        layers,
        activate_last,
    })
}

fn assemble(mut map: BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let embed = take_tensor(&mut map, "g.embed", 2)?;
    let (k, e) = (embed.shape()[0], embed.shape()[1]);
    let cond = CondSpec::new(k, e).map_err(|err| bad("g.embed", &err.to_string()))?;
    let mlp = take_mlp(&mut map, "g.mlp", false)?;
    if mlp.in_dim() <= e {
        return Err(bad("g.mlp.l0.w", &format!("input width {} leaves no latent", mlp.in_dim())));
    }
    let generator = GeneratorNet {
        cond,
        latent_dim: mlp.in_dim() - e,
        embed,
        mlp,
    };
    let backbone = take_mlp(&mut map, "d.backbone", true)?;
    let f = backbone.out_dim();
    let w = take_tensor(&mut map, "d.head.w", 2)?;
    let b = take_tensor(&mut map, "d.head.b", 1)?;
    if w.shape()[0] != f || b.shape()[0] != w.shape()[1] {
        return Err(bad("d.head.w", &format!("shape {:?} with features {f} and bias {:?}", w.shape(), b.shape())));
    }
    let head = match map.remove("d.head.embed") {
        Some(de) => {
            if de.shape() != [k, f] || w.shape()[1] != 1 {
                return Err(bad("d.head.embed", &format!("shape {:?}, expected [{k}, {f}] with scalar head", de.shape())));
            }
            Head::Conditional {
                linear: Linear { w, b },
                embed: de,
            }
        }
        None => {
            if w.shape()[1] != k {
                return Err(bad("d.head.w", &format!("{} logits for {k} classes", w.shape()[1])));
            }
            Head::Unconditional {
                linear: Linear { w, b },
            }
        }
    };
    let discriminator = DiscriminatorNet {
        cardinality: k,
        backbone,
        head,
    };
    if discriminator.input_dim() != generator.output_dim() {
        return Err(bad("d.backbone.l0.w", "input width differs from generator output"));
    }
    let dino = match map.remove("dino.center") {
        Some(center) => {
            let tau = take_tensor(&mut map, "dino.tau", 1)?.item()?;
            let m = take_tensor(&mut map, "dino.momentum", 1)?.item()?;
            if center.numel() != k {
                return Err(bad("dino.center", &format!("{} entries for {k} classes", center.numel())));
            }
            Some(DinoState::from_parts(center.into_data(), tau, m).map_err(|e| bad("dino.center", &e.to_string()))?)
        }
        None => None,
    };
    if let Some(name) = map.keys().next() {
        return Err(bad(name, "unexpected tensor"));
    }
    Ok(Checkpoint {
        generator,
        discriminator,
        dino,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::HeadKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: HeadKind, dino: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cond = CondSpec::new(3, 4).unwrap();
        Checkpoint {
            generator: GeneratorNet::init(cond, 5, &[8], 2, &mut rng),
            discriminator: DiscriminatorNet::init(2, &[8], 6, 3, kind, &mut rng),
            dino: dino.then(|| DinoState::from_parts(vec![0.1, 0.2, 0.7], 0.1, 0.9).unwrap()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for (kind, dino) in [(HeadKind::ConditionalScalar, false), (HeadKind::UnconditionalLogits, true)] {
            let c = sample(kind, dino);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let bytes = sample(HeadKind::UnconditionalLogits, false).to_bytes();
        for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mut c = sample(HeadKind::UnconditionalLogits, false);
        c.discriminator.backbone.layers[1].b = Tensor::zeros(&[5]);
        let err = Checkpoint::from_bytes(&c.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("d.backbone.l1.b"), "{err}");
    }
}
