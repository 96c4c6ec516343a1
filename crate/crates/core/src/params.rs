//! Named trainable parameters.
//!
//! Model structs only hold [`ParamId`]s; values and gradients live in a
//! [`ParamStore`]. The same model structure can therefore run against an
//! `f32` store for training and an `f64` copy for gradient checking.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Container, Element, Entry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform initialised parameter.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, xavier_uniform(shape, fan_in, fan_out, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    /// Writes every parameter value into `container` under its own name.
    pub fn export(&self, container: &mut Container) {
        for p in &self.params {
            container.insert(p.name.clone(), Entry::from(&p.value));
        }
    }

    /// Loads values for every registered parameter from `container`.
    pub fn import(&mut self, container: &Container) -> Result<()> {
        for p in &mut self.params {
            let entry = container
                .get(&p.name)
                .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
            let value: Tensor<T> = entry
                .to_tensor()
                .ok_or_else(|| Error::Format(format!("`{}` is not a float entry", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(Error::shape("import", p.value.shape(), value.shape()));
            }
            p.value = value;
        }
        Ok(())
    }
}

pub fn xavier_uniform<T: Element>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = xavier_uniform(&[20, 30], 30, 20, &mut rng);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > bound / 2.0));
    }

    #[test]
    fn grads_start_at_zero_and_shapes_match() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[2, 3], 1.5));
        assert_eq!(store.get(id).grad.shape(), &[2, 3]);
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("w", &[1]);
        store.add_zeros("w", &[1]);
    }

    #[test]
    fn export_import_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f32>::new();
        a.add_xavier("x.w", &[3, 2], 2, 3, &mut rng);
        let mut c = Container::new();
        a.export(&mut c);
        let mut b = ParamStore::<f32>::new();
        b.add_zeros("x.w", &[3, 2]);
        b.import(&c).unwrap();
        assert_eq!(a, b);
    }
}
