//! Named parameter storage, tape binding and gradient accumulation.

use std::sync::Arc;

use ndarray::Axis;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Mat, Tape, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Mat>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds an `N(0, std²)` matrix drawn from its own stream.
    pub fn add_gaussian(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        seed: u64,
    ) -> ParamId {
        let id = self.entries.len() as u64;
        let mut r = rng::stream(seed, &[rng::tag::INIT, 100, id]);
        let m = Mat::from_shape_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            std * z
        });
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Mat> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(value.dim(), self.entries[id.0].value.dim(), "shape change for {}", self.entries[id.0].name);
        self.entries[id.0].value = Arc::new(value);
    }

    /// Mutable access; clones the matrix if a tape still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// SHA-256 over shapes and the exact bit patterns of the listed matrices.
pub fn fingerprint<'a>(mats: impl IntoIterator<Item = &'a Mat>) -> String {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps parameters onto a tape. Frozen parameters (or every parameter, when
/// gradients are disabled) enter the tape as constants.
pub struct Binder<'s> {
    store: &'s ParamStore,
    with_grad: bool,
    full: Vec<Option<Var>>,
    rows: Vec<(ParamId, Vec<usize>, Var)>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, with_grad: bool) -> Self {
        Self {
            store,
            with_grad,
            full: vec![None; store.len()],
            rows: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn trainable(&self, id: ParamId) -> bool {
        self.with_grad && !self.store.is_frozen(id)
    }

    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.full[id.0] {
            return v;
        }
        let value = Arc::clone(self.store.get(id));
        let v = if self.trainable(id) {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.full[id.0] = Some(v);
        v
    }

    /// Leaf holding only the listed rows; its gradient is scattered back
    /// sparsely.
    pub fn bind_rows(&mut self, tape: &mut Tape, id: ParamId, rows: &[usize]) -> Var {
        let value = self.store.get(id).select(Axis(0), rows);
        if self.trainable(id) {
            let v = tape.param(Arc::new(value));
            self.rows.push((id, rows.to_vec(), v));
            v
        } else {
            tape.constant(value)
        }
    }

    pub fn collect(&self, grads: &Grads, out: &mut GradStore) {
        for (i, v) in self.full.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                out.add_dense(ParamId(i), g);
            }
        }
        for (id, rows, v) in &self.rows {
            if let Some(g) = grads.get(*v) {
                out.add_rows(*id, rows, g);
            }
        }
    }
}

#[derive(Clone, Debug)]
enum GradEntry {
    Dense(Mat),
    Rows(Vec<usize>, Vec<Mat>),
}

/// Gradient accumulator keyed by parameter. Row-sparse contributions stay
/// sparse until [`GradStore::densify`].
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    entries: Vec<Option<GradEntry>>,
}

impl GradStore {
    pub fn new(n_params: usize) -> Self {
        Self {
            entries: vec![None; n_params],
        }
    }

    fn ensure(&mut self, id: ParamId) {
        if self.entries.len() <= id.0 {
            self.entries.resize(id.0 + 1, None);
        }
    }

    pub fn add_dense(&mut self, id: ParamId, g: &Mat) {
        self.ensure(id);
        match &mut self.entries[id.0] {
            Some(GradEntry::Dense(acc)) => *acc += g,
            slot @ None => *slot = Some(GradEntry::Dense(g.clone())),
            Some(GradEntry::Rows(..)) => panic!("mixed dense/row gradients for one parameter"),
        }
    }

    pub fn add_rows(&mut self, id: ParamId, rows: &[usize], g: &Mat) {
        self.ensure(id);
        match &mut self.entries[id.0] {
            Some(GradEntry::Rows(idx, parts)) => {
                idx.extend_from_slice(rows);
                parts.push(g.clone());
            }
            slot @ None => *slot = Some(GradEntry::Rows(rows.to_vec(), vec![g.clone()])),
            Some(GradEntry::Dense(acc)) => {
                for (k, &r) in rows.iter().enumerate() {
                    acc.row_mut(r).scaled_add(1.0, &g.row(k));
                }
            }
        }
    }

    /// Adds `other` into `self` in a fixed order.
    pub fn merge(&mut self, other: &GradStore) {
        for (i, e) in other.entries.iter().enumerate() {
            match e {
                Some(GradEntry::Dense(g)) => self.add_dense(ParamId(i), g),
                Some(GradEntry::Rows(rows, parts)) => {
                    let mut off = 0;
                    for p in parts {
                        self.add_rows(ParamId(i), &rows[off..off + p.nrows()], p);
                        off += p.nrows();
                    }
                }
                None => {}
            }
        }
    }

    /// Converts every entry to a dense matrix shaped like the parameter.
    pub fn densify(&mut self, store: &ParamStore) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            if let Some(GradEntry::Rows(rows, parts)) = e {
                let mut dense = Mat::zeros(store.get(ParamId(i)).dim());
                let mut off = 0;
                for p in parts.iter() {
                    for k in 0..p.nrows() {
                        dense.row_mut(rows[off + k]).scaled_add(1.0, &p.row(k));
                    }
                    off += p.nrows();
                }
                *e = Some(GradEntry::Dense(dense));
            }
        }
    }

    /// Dense gradient; call [`GradStore::densify`] first for row entries.
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        match self.entries.get(id.0)? {
            Some(GradEntry::Dense(m)) => Some(m),
            _ => None,
        }
    }

    pub fn has(&self, id: ParamId) -> bool {
        matches!(self.entries.get(id.0), Some(Some(_)))
    }

    pub fn scale(&mut self, c: f64) {
        for e in self.entries.iter_mut().flatten() {
            match e {
                GradEntry::Dense(m) => *m *= c,
                GradEntry::Rows(_, parts) => parts.iter_mut().for_each(|p| *p *= c),
            }
        }
    }
}
