//! Parameter storage, layers and optimization.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{ConvSpec, Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn total_size(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Parameters of a [`ParamStore`] placed on one [`Graph`].
pub struct Binding<'g, 's> {
    pub g: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    trainable: bool,
}

impl<'g, 's> Binding<'g, 's> {
    pub fn new(g: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            g,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Gradients aligned with the store; `None` for parameters not used.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Sums per-example gradients into `acc`.
pub fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match a {
                Some(t) => t.add_assign(&g),
                None => *a = Some(g),
            }
        }
    }
}

/// Global L2 norm over present gradients.
pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / (norm + 1e-12);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adam with decoupled moment state per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1,
            beta2,
            eps: 1e-9,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut store.entries_mut()[i].value;
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Creates parameters with a shared RNG and name prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = format!("{}{}", self.prefix, name);
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, bound, self.rng);
        self.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }
}

/// Per-frame affine map `[in, T] -> [out, T]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        init.scope(name, |i| Self {
            w: i.uniform("w", &[out_dim, in_dim], bound),
            b: i.uniform("b", &[out_dim, 1], bound),
            in_dim,
            out_dim,
        })
    }

    /// Weight and bias start at zero.
    pub fn zeroed<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        init.scope(name, |i| Self {
            w: i.zeros("w", &[out_dim, in_dim]),
            b: i.zeros("b", &[out_dim, 1]),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        p.p(self.w).matmul(x).add_col(p.p(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv1d {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        init.scope(name, |i| Self {
            w: i.uniform("w", &[cout, cin, kernel], bound),
            b: i.uniform("b", &[cout], bound),
            spec,
        })
    }

    pub fn same<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        Self::new(init, name, cin, cout, kernel, ConvSpec::same(kernel, 1))
    }

    pub fn zeroed<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        init.scope(name, |i| Self {
            w: i.zeros("w", &[cout, cin, kernel]),
            b: i.zeros("b", &[cout]),
            spec: ConvSpec::same(kernel, 1),
        })
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.conv1d(p.p(self.w), Some(p.p(self.b)), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    /// Kernel `2 * stride`, padding `stride / 2`: output length is exactly
    /// `stride` times the input length.
    pub fn upsampler<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        std: f64,
    ) -> Self {
        let kernel = 2 * stride;
        init.scope(name, |i| Self {
            w: i.normal("w", &[cin, cout, kernel], std),
            b: i.zeros("b", &[cout]),
            stride,
            padding: stride / 2,
        })
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.conv_transpose1d(p.p(self.w), Some(p.p(self.b)), self.stride, self.padding)
    }
}

/// Normalization over channels at each frame.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.full("gamma", &[dim], 1.0),
            beta: i.zeros("beta", &[dim]),
        })
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(p.p(self.gamma), p.p(self.beta))
    }
}
