//! Flat, named parameter storage.
//!
//! All learnable arrays live in one contiguous buffer described by a
//! [`ParamLayout`]: an ordered list of (name, shape, offset) entries. The same
//! container holds parameters, gradients, optimizer moments and EMA shadows,
//! which keeps elementwise updates, checkpoint IO and finite-difference
//! perturbation trivial.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::real::Real;

/// One named array inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered description of every named array and its shape.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(named_shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(named_shapes.len());
        let mut index = HashMap::with_capacity(named_shapes.len());
        let mut offset = 0;
        for (name, shape) in named_shapes {
            let len: usize = shape.iter().product();
            index.insert(name.clone(), entries.len());
            entries.push(ParamEntry {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        Self {
            entries,
            index,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Entry lookup that panics on a missing name; layouts are closed, so a
    /// miss is a programming error.
    pub fn require(&self, name: &str) -> &ParamEntry {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter entry named '{name}'"))
    }

    /// Compare `(name, shape)` pairs against this layout in order. Returns the
    /// first discrepancy as a human-readable message naming the array.
    pub fn audit(&self, actual: &[(String, Vec<usize>)]) -> Result<(), String> {
        for (i, entry) in self.entries.iter().enumerate() {
            match actual.get(i) {
                None => return Err(format!("missing array '{}'", entry.name)),
                Some((name, shape)) => {
                    if *name != entry.name {
                        return Err(format!("array #{i} is '{name}', expected '{}'", entry.name));
                    }
                    if *shape != entry.shape {
                        return Err(format!(
                            "array '{}' has shape {shape:?}, expected {:?}",
                            entry.name, entry.shape
                        ));
                    }
                }
            }
        }
        if actual.len() > self.entries.len() {
            return Err(format!(
                "unexpected extra array '{}'",
                actual[self.entries.len()].0
            ));
        }
        Ok(())
    }
}

/// A flat buffer of scalars laid out according to a shared [`ParamLayout`].
#[derive(Debug, Clone)]
pub struct ParamVec<F> {
    layout: Arc<ParamLayout>,
    data: Vec<F>,
}

impl<F: Real> ParamVec<F> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![F::zero(); layout.total_len()];
        Self { layout, data }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<F>) -> Self {
        assert_eq!(
            data.len(),
            layout.total_len(),
            "data/layout length mismatch"
        );
        Self { layout, data }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<ParamLayout> {
        Arc::clone(&self.layout)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn slice(&self, name: &str) -> &[F] {
        let e = self.layout.require(name);
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [F] {
        let e = self.layout.require(name).clone();
        &mut self.data[e.offset..e.offset + e.len()]
    }

    /// 2-d view of a named matrix entry.
    pub fn view2(&self, name: &str) -> ArrayView2<'_, F> {
        let e = self.layout.require(name);
        assert_eq!(e.shape.len(), 2, "'{name}' is not 2-d");
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(name)).unwrap()
    }

    /// 1-d view of a named vector entry.
    pub fn view1(&self, name: &str) -> ArrayView1<'_, F> {
        let e = self.layout.require(name);
        assert_eq!(e.shape.len(), 1, "'{name}' is not 1-d");
        ArrayView1::from_shape(e.shape[0], self.slice(name)).unwrap()
    }

    pub fn view2_mut(&mut self, name: &str) -> ArrayViewMut2<'_, F> {
        let e = self.layout.require(name).clone();
        assert_eq!(e.shape.len(), 2, "'{name}' is not 2-d");
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), self.slice_mut(name)).unwrap()
    }

    pub fn view1_mut(&mut self, name: &str) -> ArrayViewMut1<'_, F> {
        let e = self.layout.require(name).clone();
        assert_eq!(e.shape.len(), 1, "'{name}' is not 1-d");
        ArrayViewMut1::from_shape(e.shape[0], self.slice_mut(name)).unwrap()
    }

    /// `self += a * other`, elementwise over the whole buffer.
    pub fn scaled_add(&mut self, a: F, other: &ParamVec<F>) {
        assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x = *x + a * *y;
        }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Convert the buffer to another scalar type, keeping the layout.
    pub fn cast<G: Real>(&self) -> ParamVec<G> {
        ParamVec {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}
