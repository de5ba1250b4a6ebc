use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (weights yes; biases and
    /// normalization/modulation scales no).
    pub decay: bool,
}

/// Ordered list of network parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Appends a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.params[index].value
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} vs {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }
}

/// Parameters placed on a tape, indexed like their [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wraps tape variables given in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var<'t, T> {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients in store order; zeros where backward did not reach.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Registers parameters with their initial values.
pub struct ParamInit<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ParamInit<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> usize {
        self.store.add(name, Tensor::full(shape, T::of(value)), false)
    }
}
