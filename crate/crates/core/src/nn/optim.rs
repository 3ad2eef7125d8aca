//! Named parameters and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, NnError, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a parameter and returns its slot. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, trainable: true });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn get(&self, slot: usize) -> &Parameter<T> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<T> {
        &mut self.params[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, slot: usize) -> &Tensor<T> {
        &self.params[slot].value
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Records every parameter as a leaf; trainable ones require gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), p.trainable)).collect()
    }

    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
        vars.iter()
            .zip(&self.params)
            .map(|(&v, p)| if p.trainable { g.grad(v).cloned() } else { None })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Fan-in scaled uniform initialisation `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_init<T: Real>(rng: &mut impl Rng, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.params.iter().map(|p| Tensor::zeros(p.value.shape)).collect(),
            v: store.params.iter().map(|p| Tensor::zeros(p.value.shape)).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), NnError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(NnError::ShapeError("gradient list does not match the parameter store".into()));
    }
    for (p, g) in store.params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape != p.value.shape {
                return Err(NnError::ShapeError(format!("gradient shape for {}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in store.params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.data.len() {
            let gj = g.data[j].to_f64();
            let mj = b1 * m.data[j].to_f64() + (1.0 - b1) * gj;
            let vj = b2 * v.data[j].to_f64() + (1.0 - b2) * gj * gj;
            m.data[j] = T::from_f64(mj);
            v.data[j] = T::from_f64(vj);
            let upd = lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
            p.value.data[j] = T::from_f64(p.value.data[j].to_f64() - upd);
        }
    }
    Ok(())
}
