use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, Tensor, TensorError};

/// Initialization rule for a freshly allocated parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

impl Init {
    pub fn materialize<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Named parameters, ordered by name. A tensor's `requires_grad` flag is its
/// trainable flag; frozen tensors never receive optimizer updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('.').all(|seg| {
            !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

/// `name` equals `prefix` or lies under it on a segment boundary.
pub(crate) fn under_prefix(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(TensorError::InvalidName(name));
        }
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn entry(&self, name: &str) -> Option<(&str, &Tensor)> {
        self.tensors.get_key_value(name).map(|(k, v)| (k.as_str(), v))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for t in self.tensors.values_mut() {
            t.requires_grad = flag;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.tensors.values().all(|t| !t.requires_grad)
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Multiplies every present gradient by `s`.
    pub fn scale_grads(&mut self, s: f32) {
        for t in self.tensors.values_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Element count of every tensor under `prefix` (segment-aligned). An empty
/// prefix selects nothing; use [`ParamStore::numel`] for the total.
pub fn count_params(params: &ParamStore, prefix: &str) -> usize {
    if prefix.is_empty() {
        return 0;
    }
    params
        .iter()
        .filter(|(name, _)| under_prefix(name, prefix))
        .map(|(_, t)| t.numel())
        .sum()
}
