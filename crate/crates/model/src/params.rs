use std::collections::HashMap;

use rand::Rng;

use crate::tensor::Mat;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// What a stored tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight of a classical map.
    Classical,
    /// Trainable rotation angles of circuit blocks.
    Quantum,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Mat,
}

/// Named tensors of a model in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform on `±1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, ParamKind::Classical, Mat::from_vec(rows, cols, data))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, kind: ParamKind, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, kind, Mat::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].kind != ParamKind::Buffer
    }

    /// Number of trainable scalars of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).map(|p| p.value.len()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`, split as (classical, quantum).
    pub fn count_prefix(&self, prefix: &str) -> (usize, usize) {
        let mut out = (0, 0);
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            match p.kind {
                ParamKind::Classical => out.0 += p.value.len(),
                ParamKind::Quantum => out.1 += p.value.len(),
                ParamKind::Buffer => {}
            }
        }
        out
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient of one scalar of a parameter; zero when the parameter received none.
    pub fn value(&self, id: ParamId, k: usize) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g.data[k])
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::all_finite)
    }
}
