//! Named parameter storage, seeded initialization and the checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"PPID" | u32 version | u32 count |
//!   count x ( u16 name_len | name (UTF-8) | u32 rank | rank x u64 dims | f64 payload )
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{read_u32, Shape, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"PPID";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming-uniform with fan-in taken from dims 1..4 of the shape.
    KaimingUniform,
    Zeros,
    Ones,
    Constant(f64),
}

/// A parameter declaration: name, shape and initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Shape, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }

    /// Weight and bias declarations of a `cout x cin x k x k` convolution.
    pub fn conv(prefix: &str, cin: usize, cout: usize, k: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(
                format!("{prefix}.weight"),
                Shape::new(cout, cin, k, k),
                Init::KaimingUniform,
            ),
            ParamSpec::new(format!("{prefix}.bias"), Shape::new(1, cout, 1, 1), Init::Zeros),
        ]
    }
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Initialize `specs` in declaration order from a ChaCha stream seeded
    /// with `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape),
                Init::Ones => Tensor::full(s.shape, 1.0),
                Init::Constant(v) => Tensor::full(s.shape, v),
                Init::KaimingUniform => {
                    let fan_in = (s.shape.c() * s.shape.h() * s.shape.w()).max(1);
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(s.shape, |_| rng.gen_range(-bound..bound))
                }
            };
            store.insert(s.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Sub-store of the entries under `prefix.`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Merge `other` into `self` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Check names and shapes against declarations; the error lists every
    /// missing, unexpected and mismatched tensor.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let expected: BTreeMap<&str, Shape> =
            specs.iter().map(|s| (s.name.as_str(), s.shape)).collect();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, shape) in &expected {
            match self.tensors.get(*name) {
                None => missing.push(name.to_string()),
                Some(t) if t.shape() != *shape => {
                    mismatched.push(format!("{name}: expected {shape}, found {}", t.shape()))
                }
                Some(_) => {}
            }
        }
        let unexpected: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| !expected.contains_key(k.as_str()))
            .cloned()
            .collect();
        if missing.is_empty() && unexpected.is_empty() && mismatched.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompatibleCheckpoint {
                missing,
                unexpected,
                mismatched,
            })
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            t.write_body(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut lb = [0u8; 2];
            r.read_exact(&mut lb)?;
            let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let t = Tensor::read_body(&mut r)?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ParamStore::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Named differentiable leaves.
    Trainable,
    /// Constants: no gradient is ever computed for them.
    Frozen,
}

/// Graph handles for every tensor of a [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers each tensor in `store` on `g`. Trainable names are
    /// prefixed with `prefix.` in the graph's gradient map.
    pub fn new(g: &mut Graph, store: &ParamStore, prefix: &str, mode: BindMode) -> Bound {
        Bound::with_modes(g, store, prefix, |_| mode)
    }

    /// Like [`Bound::new`] with a per-name binding mode.
    pub fn with_modes(
        g: &mut Graph,
        store: &ParamStore,
        prefix: &str,
        mode_of: impl Fn(&str) -> BindMode,
    ) -> Bound {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = match mode_of(name) {
                    BindMode::Trainable if prefix.is_empty() => g.param(name.clone(), t.clone()),
                    BindMode::Trainable => g.param(format!("{prefix}.{name}"), t.clone()),
                    BindMode::Frozen => g.constant(t.clone()),
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Wraps existing graph nodes under the given names.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Bound {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut v = ParamSpec::conv("a", 3, 4, 3).to_vec();
        v.push(ParamSpec::new("ln.gamma", Shape::new(1, 4, 1, 1), Init::Ones));
        v
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ParamStore::init(&specs(), 9);
        let b = ParamStore::init(&specs(), 9);
        let c = ParamStore::init(&specs(), 10);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(a.get("a.weight").unwrap().data().iter().all(|v| v.abs() < bound));
        assert!(a.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("ln.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_header() {
        let s = ParamStore::init(&specs(), 1);
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"PPID");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(ParamStore::read_from(&bytes[..]).unwrap(), s);
    }

    #[test]
    fn check_against_lists_differences() {
        let mut s = ParamStore::init(&specs(), 1);
        s.insert("extra", Tensor::scalar(1.0));
        s.insert("a.bias", Tensor::zeros(Shape::new(1, 5, 1, 1)));
        let mut sp = specs();
        sp.push(ParamSpec::new("gone", Shape::new(1, 1, 1, 1), Init::Zeros));
        match s.check_against(&sp).unwrap_err() {
            Error::IncompatibleCheckpoint {
                missing,
                unexpected,
                mismatched,
            } => {
                assert_eq!(missing, vec!["gone"]);
                assert_eq!(unexpected, vec!["extra"]);
                assert_eq!(mismatched.len(), 1);
                assert!(mismatched[0].starts_with("a.bias"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
