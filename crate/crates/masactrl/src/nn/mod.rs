//! Minimal neural-network substrate: a named parameter store, matching
//! gradient store, layer primitives with hand-written backward passes, and
//! an Adam optimizer.
//!
//! Layers do not own their weights; they hold [`ParamId`]s into a
//! [`ParamStore`]. That keeps checkpointing, optimization and
//! finite-difference checks trivial: all state lives in one flat,
//! name-addressable table.

pub mod ops;

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::real::Real;

/// Index of one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat, insertion-ordered table of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// View as a fixed dimensionality; panics on rank mismatch, which is a
    /// construction bug, not a runtime condition.
    pub fn p1(&self, id: ParamId) -> ndarray::ArrayView1<'_, F> {
        self.tensors[id.0].view().into_dimensionality().unwrap()
    }

    pub fn p2(&self, id: ParamId) -> ndarray::ArrayView2<'_, F> {
        self.tensors[id.0].view().into_dimensionality().unwrap()
    }

    pub fn p4(&self, id: ParamId) -> ndarray::ArrayView4<'_, F> {
        self.tensors[id.0].view().into_dimensionality().unwrap()
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Dense gradient table parallel to a [`ParamStore`].
#[derive(Debug)]
pub struct GradStore<F> {
    grads: Vec<ArrayD<F>>,
}

impl<F: Real> GradStore<F> {
    pub fn zeros_like(params: &ParamStore<F>) -> Self {
        GradStore {
            grads: params
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn accum<D: ndarray::Dimension>(&mut self, id: ParamId, g: &ndarray::Array<F, D>) {
        let slot = &mut self.grads[id.0];
        debug_assert_eq!(slot.shape(), g.shape());
        let gd = g.view().into_dyn();
        slot.zip_mut_with(&gd, |a, &b| *a += b);
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.grads[id.0]
    }

    /// Merge another gradient table into this one (fixed order, so batched
    /// accumulation stays deterministic).
    pub fn merge(&mut self, other: &GradStore<F>) {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.zip_mut_with(b, |x, &y| *x += y);
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * s);
        }
    }

    /// Global L2 norm over every gradient scalar, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in &self.grads {
            for &x in g.iter() {
                let v = x.to_f64c();
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

/// Adam with fixed hyperparameters and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64, clip_norm: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: params
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }

    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &mut GradStore<F>) {
        if let Some(limit) = self.clip_norm {
            let norm = grads.global_norm();
            if norm > limit {
                grads.scale(F::c(limit / norm));
            }
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        let (fb1, fb2) = (F::c(b1), F::c(b2));
        let (ifb1, ifb2) = (F::c(1.0 - b1), F::c(1.0 - b2));
        let (rc1, rc2) = (F::c(1.0 / bc1), F::c(1.0 / bc2));
        for (((t, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads.grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(t)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|t, &g, m, v| {
                    *m = fb1 * *m + ifb1 * g;
                    *v = fb2 * *v + ifb2 * g * g;
                    let mhat = *m * rc1;
                    let vhat = *v * rc2;
                    *t = *t - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Weight initializers. Draw order is fixed by construction order, so a
/// seed fully determines every parameter.
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// He-style fan-in scaling for convolutions and linears.
    Kaiming { fan_in: usize },
}

pub fn init_array<F: Real, R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> ArrayD<F> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::from_elem(IxDyn(shape), F::one()),
        Init::Normal { std } => {
            ArrayD::from_shape_simple_fn(IxDyn(shape), || F::std_normal(rng) * F::c(std))
        }
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || F::std_normal(rng) * F::c(std))
        }
    }
}
