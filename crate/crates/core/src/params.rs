//! Named parameter storage, seeded initialization and checkpoints.
//!
//! A checkpoint is a VSPF file holding every parameter flattened and
//! concatenated in name order (1-D payload), plus a sidecar text manifest at
//! `<path>.manifest` with one line per parameter:
//!
//! ```text
//! name<TAB>d0,d1,...<TAB>offset<TAB>len
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::element::Element;
use crate::error::{Result as TResult, TensorError};
use crate::rng;
use crate::tensor::Tensor;
use crate::vspf::{self, FormatError};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Parameters keyed by name, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Element> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Draws every parameter from its own `(seed, name)` stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> TResult<Self> {
        let mut store = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    rng::uniform(&spec.shape, bound, &mut rng::stream(seed, &spec.name))?
                }
                Init::Ones => Tensor::ones(&spec.shape)?,
                Init::Zeros => Tensor::zeros(&spec.shape)?,
            };
            store.insert(&spec.name, t);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.to_string(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> TResult<&Tensor<T>> {
        self.get(name).ok_or_else(|| TensorError::InvalidArgument {
            op: "params",
            detail: format!("missing parameter `{name}`"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn conforms_to(&self, specs: &[ParamSpec]) -> std::result::Result<(), String> {
        if self.len() != specs.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.len()
            ));
        }
        for spec in specs {
            match self.get(&spec.name) {
                None => return Err(format!("missing parameter `{}`", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("empty parameter store")]
    Empty,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Element>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if store.is_empty() {
        return Err(CheckpointError::Empty);
    }
    let mut flat = Vec::with_capacity(store.element_count());
    let mut manifest = String::new();
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "{name}\t{}\t{}\t{}", dims.join(","), flat.len(), t.len())
            .expect("writing to String");
        flat.extend_from_slice(t.data());
    }
    let n = flat.len();
    let blob = Tensor::new(&[n], flat).map_err(|_| CheckpointError::Empty)?;
    vspf::save_features(path, &blob)?;
    fs::write(manifest_path(path), manifest).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<ParamStore<T>, CheckpointError> {
    let path = path.as_ref();
    let blob: Tensor<T> = vspf::load_features(path)?;
    let text = fs::read_to_string(manifest_path(path)).map_err(FormatError::from)?;
    let data = blob.data();
    let mut store = ParamStore::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: &str| CheckpointError::Manifest {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset, len] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad dims"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let len: usize = len.parse().map_err(|_| bad("bad length"))?;
        if shape.iter().product::<usize>() != len {
            return Err(bad("dims do not match length"));
        }
        let end = offset.checked_add(len).filter(|&e| e <= data.len()).ok_or_else(|| bad("range outside payload"))?;
        let t = Tensor::new(&shape, data[offset..end].to_vec()).map_err(|e| bad(&e.to_string()))?;
        if store.insert(name, t).is_some() {
            return Err(bad("duplicate name"));
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("a.weight", &[3, 2], Init::Uniform { fan_in: 3 }),
            ParamSpec::new("a.bias", &[2], Init::Uniform { fan_in: 3 }),
            ParamSpec::new("n.gamma", &[2], Init::Ones),
            ParamSpec::new("n.beta", &[2], Init::Zeros),
        ]
    }

    #[test]
    fn init_is_bounded_and_named_streams_are_stable() {
        let s = ParamStore::<f64>::init(&specs(), 3).unwrap();
        let bound = 1.0 / 3f64.sqrt();
        assert!(s.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(s.get("n.gamma").unwrap().data(), &[1.0, 1.0]);

        // adding a parameter does not perturb the others
        let mut more = specs();
        more.insert(0, ParamSpec::new("aa.extra", &[5], Init::Uniform { fan_in: 5 }));
        let s2 = ParamStore::<f64>::init(&more, 3).unwrap();
        assert!(s2.get("a.weight").unwrap().bit_eq(s.get("a.weight").unwrap()));
        assert!(s.conforms_to(&specs()).is_ok());
        assert!(s2.conforms_to(&specs()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.vspf");
        let s = ParamStore::<f32>::init(&specs(), 11).unwrap();
        save_checkpoint(&path, &s).unwrap();
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(manifest.lines().next().unwrap(), "a.bias\t2\t0\t2");
        let back: ParamStore<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), s.len());
        for (name, t) in s.iter() {
            assert!(back.get(name).unwrap().bit_eq(t), "{name}");
        }
    }
}
