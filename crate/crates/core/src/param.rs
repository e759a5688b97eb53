//! Flat parameter vectors with a named per-tensor layout.
//!
//! A network's trainable state is a single `Array1<f64>` plus a shared
//! [`ParamLayout`] mapping tensor names to sub-ranges. Optimizers work on the
//! flat view; the graph side works on [`ParamNodes`], one tape node per
//! tensor, which may be leaves (plain forward) or derived nodes (the
//! inner-step parameters θ' = θ - α∇L).

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, ArrayD, IxDyn};

use crate::autodiff::{Graph, NodeId};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(tensors: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        let mut entries = Vec::new();
        let mut by_name = HashMap::new();
        let mut offset = 0usize;
        for (name, shape) in tensors {
            let len: usize = shape.iter().product();
            assert!(
                by_name.insert(name.clone(), entries.len()).is_none(),
                "duplicate parameter name {name}"
            );
            entries.push(ParamEntry {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        Self {
            entries,
            by_name,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let e = &self.entries[idx];
        e.offset..e.offset + e.shape.iter().product::<usize>()
    }
}

/// Flat view of a network's trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub layout: Arc<ParamLayout>,
    pub values: Array1<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self {
            layout,
            values: Array1::zeros(n),
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Array1<f64>) -> Self {
        assert_eq!(values.len(), layout.total_len(), "flat length mismatch");
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Extracts one named tensor as an owned shaped array.
    pub fn tensor(&self, idx: usize) -> ArrayD<f64> {
        let e = &self.layout.entries()[idx];
        let slice = self.values.slice(ndarray::s![self.layout.range(idx)]);
        ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec()).unwrap()
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<ArrayD<f64>> {
        self.layout.index_of(name).map(|i| self.tensor(i))
    }

    pub fn set_tensor(&mut self, idx: usize, value: &ArrayD<f64>) {
        let e = &self.layout.entries()[idx];
        assert_eq!(value.shape(), &e.shape[..], "set_tensor shape mismatch");
        let range = self.layout.range(idx);
        let flat: Vec<f64> = value.iter().cloned().collect();
        self.values
            .slice_mut(ndarray::s![range])
            .assign(&Array1::from_vec(flat));
    }

    /// Splits into the per-tensor map and reassembles; the two are exact
    /// inverses (see the round-trip property test).
    pub fn unflatten(&self) -> Vec<(String, ArrayD<f64>)> {
        self.layout
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), self.tensor(i)))
            .collect()
    }

    pub fn flatten(layout: Arc<ParamLayout>, tensors: &[(String, ArrayD<f64>)]) -> Result<Self> {
        let mut out = Self::zeros(layout.clone());
        if tensors.len() != layout.entries().len() {
            return Err(Error::Shape(format!(
                "flatten: expected {} tensors, got {}",
                layout.entries().len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let idx = layout
                .index_of(name)
                .ok_or_else(|| Error::Shape(format!("flatten: unknown tensor {name}")))?;
            if value.shape() != &layout.entries()[idx].shape[..] {
                return Err(Error::Shape(format!("flatten: shape mismatch for {name}")));
            }
            out.set_tensor(idx, value);
        }
        Ok(out)
    }

    /// `self += a * v`, the shape-preserving arithmetic used by optimizers
    /// and the (value-level) inner step.
    pub fn axpy(&mut self, a: f64, v: &ParamVector) {
        assert_eq!(self.len(), v.len(), "axpy length mismatch");
        self.values.scaled_add(a, &v.values);
    }

    pub fn scale(&mut self, a: f64) {
        self.values.mapv_inplace(|x| a * x);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.values.dot(&other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Injects every tensor as a leaf node of `g`.
    pub fn inject(&self, g: &mut Graph) -> ParamNodes {
        let nodes = (0..self.layout.entries().len())
            .map(|i| g.leaf(self.tensor(i)))
            .collect();
        ParamNodes {
            layout: self.layout.clone(),
            nodes,
        }
    }
}

/// Per-tensor graph nodes aligned with a [`ParamLayout`].
#[derive(Clone)]
pub struct ParamNodes {
    pub layout: Arc<ParamLayout>,
    pub nodes: Vec<NodeId>,
}

impl ParamNodes {
    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.layout.index_of(name).map(|i| self.nodes[i])
    }

    /// Reads the node values back into a flat vector (used after `grad`).
    pub fn read_values(&self, g: &Graph) -> ParamVector {
        let mut out = ParamVector::zeros(self.layout.clone());
        for (i, &n) in self.nodes.iter().enumerate() {
            let v = g.value(n);
            assert_eq!(
                v.shape(),
                &self.layout.entries()[i].shape[..],
                "node shape drifted"
            );
            out.set_tensor(i, &v.to_owned());
        }
        out
    }
}

/// Gradient nodes (as returned by `Graph::grad` over `ParamNodes.nodes`)
/// wrapped back into the layout.
pub fn grads_to_vector(g: &Graph, layout: &Arc<ParamLayout>, grads: &[NodeId]) -> ParamVector {
    let nodes = ParamNodes {
        layout: layout.clone(),
        nodes: grads.to_vec(),
    };
    nodes.read_values(g)
}
