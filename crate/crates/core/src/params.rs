//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) resampled outside two standard deviations.
    TruncNormal(f64),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered parameter collection. Ids are insertion indices; names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(id)
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break T::from_f64(z * std);
                        }
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data)?
            }
        };
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.params[id].name
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| &mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names, shapes and values in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrite every parameter from `other`, matching by name.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, t) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::shape(format!("unexpected tensor {name}")))?;
            let cur = &mut self.params[id].value;
            if cur.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "tensor {name}: model has {:?}, file has {:?}",
                    cur.shape(),
                    t.shape()
                )));
            }
            *cur = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", &[1000], Init::TruncNormal(0.02), &mut rng).unwrap();
        let t = ps.tensor(id);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(ps.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
