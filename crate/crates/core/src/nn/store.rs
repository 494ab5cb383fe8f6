//! Named flat tensor storage for parameters, gradients, and optimizer state.
//!
//! Layers hold [`ParamId`] handles instead of owning their weights, so a
//! network's parameters can be shared read-only across worker threads while
//! each worker accumulates into its own gradient store of identical layout.

/// Handle into a [`TensorStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Learnable parameter, updated by the optimizer.
    Param,
    /// Persistent state such as batch-norm running statistics; saved in
    /// checkpoints but never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: TensorKind,
    data: Vec<f32>,
}

/// An append-only collection of named `f32` tensors.
#[derive(Debug, Clone, Default)]
pub struct TensorStore {
    entries: Vec<Entry>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, kind: TensorKind, len: usize) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            data: vec![0.0; len],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.entries[id.0].data
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> TensorKind {
        self.entries[id.0].kind
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total element count over learnable parameters (buffers excluded).
    pub fn param_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == TensorKind::Param)
            .map(|e| e.data.len())
            .sum()
    }

    /// A store with the same names, kinds, and shapes, zero-filled. Used for
    /// gradient and velocity buffers.
    pub fn zeros_like(&self) -> TensorStore {
        TensorStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    data: vec![0.0; e.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for e in &mut self.entries {
            e.data.fill(0.0);
        }
    }

    /// Element-wise accumulate: `self += other`. Layouts must match.
    pub fn add_from(&mut self, other: &TensorStore) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(a.data.len(), b.data.len());
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for e in &mut self.entries {
            for v in &mut e.data {
                *v *= factor;
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}
