//! Named parameter store shared by every module.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Initialization rule for one parameter array.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Const(f64),
}

/// Declared shape and initialization of one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Row 0 is a padding row: zero at init and never updated.
    pub padded: bool,
}

impl ParamSpec {
    pub fn normal(path: impl Into<String>, shape: Vec<usize>, std: f64) -> Self {
        ParamSpec {
            path: path.into(),
            shape,
            init: Init::Normal { std },
            padded: false,
        }
    }

    pub fn constant(path: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        ParamSpec {
            path: path.into(),
            shape,
            init: Init::Const(value),
            padded: false,
        }
    }

    pub fn padded(mut self) -> Self {
        self.padded = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub padded: bool,
}

impl Param {
    /// Whether flat coordinate `i` lies in the frozen padding row.
    pub fn is_frozen(&self, i: usize) -> bool {
        self.padded && i < self.tensor.last_dim()
    }
}

/// Every trainable array of a network, keyed by a stable path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Samples every spec in order from one seeded stream.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for spec in specs {
            let n = spec.numel();
            let mut data = match spec.init {
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| Error::Config(format!("{}: {e}", spec.path)))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Const(v) => vec![v; n],
            };
            if spec.padded {
                let d = *spec.shape.last().unwrap();
                data[..d].iter_mut().for_each(|x| *x = 0.0);
            }
            let tensor = Tensor::new(spec.shape.clone(), data)?;
            if params
                .entries
                .insert(
                    spec.path.clone(),
                    Param {
                        tensor,
                        padded: spec.padded,
                    },
                )
                .is_some()
            {
                return Err(Error::Config(format!("duplicate parameter path {}", spec.path)));
            }
        }
        Ok(params)
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor, padded: bool) {
        self.entries.insert(path.into(), Param { tensor, padded });
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn param(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all arrays.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    /// Places every array on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.param(p.tensor.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ModelParams`] instance.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
