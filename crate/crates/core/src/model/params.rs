//! Named parameter storage and the checkpoint directory format.
//!
//! A checkpoint is a directory with one TSR1 file per parameter, a
//! `manifest.txt` listing `name file shape role` per line, and a `config.txt`
//! echo of the configuration that produced it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{tsr1, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    fn name(&self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(ParamRole::Weight),
            "bias" => Ok(ParamRole::Bias),
            _ => Err(Error::Format(format!("unknown parameter role '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<S>,
}

/// Ordered, named parameters. Order is creation order and is part of the
/// checkpoint contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { params: Vec::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) || name.contains('/') {
            return Err(Error::invalid(format!("bad parameter name '{name}'")));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        self.params.push(Param { name, role, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Records every parameter on the tape as a trainable leaf, in order.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.tensor.clone())).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), role: p.role, tensor: p.tensor.cast() })
                .collect(),
        }
    }

    /// Same names, roles and shapes in the same order.
    pub fn same_layout<T: Scalar>(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.role == b.role && a.tensor.shape() == b.tensor.shape())
    }

    pub fn save(&self, dir: &Path, config_echo: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for p in &self.params {
            let file = format!("{}.tsr", p.name);
            tsr1::save(dir.join(&file), &p.tensor)?;
            let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest += &format!("{} {} {} {}\n", p.name, file, shape.join("x"), p.role.name());
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        fs::write(dir.join("config.txt"), config_echo)?;
        Ok(())
    }

    /// Loads a checkpoint and returns it with its config echo.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut store = ParamStore::new();
        for (n, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, file, shape, role] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 4 fields", n + 1)));
            };
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape '{shape}' for {name}"))))
                    .collect::<Result<_>>()?
            };
            let tensor: Tensor<S> = tsr1::load_as(dir.join(file))?;
            if tensor.shape() != shape {
                return Err(Error::Format(format!(
                    "{name}: manifest shape {shape:?} but file holds {:?}",
                    tensor.shape()
                )));
            }
            store.add(name, ParamRole::parse(role)?, tensor)?;
        }
        let echo = fs::read_to_string(dir.join("config.txt"))?;
        Ok((store, echo))
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Seeded initialiser: He-normal weights, zero biases.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Weights of `shape` with std `gain * sqrt(2 / fan_in)`.
    pub(crate) fn conv<S: Scalar>(&mut self, shape: [usize; 4], fan_in: usize, gain: f64) -> Tensor<S> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| S::lit(normal.sample(&mut self.rng)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", ParamRole::Weight, Tensor::from_fn([2, 3, 1, 1], |i| i as f32)).unwrap();
        s.add("a.b", ParamRole::Bias, Tensor::zeros([2])).unwrap();
        s.save(dir.path(), "k=v\n").unwrap();
        let (back, echo) = ParamStore::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(echo, "k=v\n");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", ParamRole::Bias, Tensor::zeros([1])).unwrap();
        assert!(s.add("x", ParamRole::Bias, Tensor::zeros([1])).is_err());
        assert!(s.add("has space", ParamRole::Bias, Tensor::zeros([1])).is_err());
    }
}
