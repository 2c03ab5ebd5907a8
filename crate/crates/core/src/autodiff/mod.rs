//! Reverse-mode automatic differentiation over dynamically built
//! per-sentence computation graphs.
//!
//! A [`Graph`] is an append-only tape of [`Tensor`]-valued nodes. Model code
//! builds one graph per sentence, calls [`Graph::backward`] on a scalar
//! root, and reads gradients back through [`Graph::take_param_grads`].
//! Trainable tensors live outside the graph in a [`ParamStore`]; they enter
//! a graph as leaf nodes tagged with their [`ParamId`] (optionally a single
//! row, so embedding-table gradients stay sparse per sentence).
//!
//! Graphs are single-threaded; parallelism happens across independent
//! per-sentence graphs with gradients reduced in a fixed sentence order.

mod optim;
mod tensor;

pub use optim::{adam_step, grad_check, AdamHyper, AdamState, GroupCheck};
pub use tensor::{logsumexp as logsumexp_slice, sigmoid as sigmoid_scalar, Tensor};

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

/// Identifies a trainable tensor in a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A leaf's link back to its parameter: the whole tensor or one matrix row.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub id: ParamId,
    pub row: Option<usize>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamRef),
    MatVec(Value, Value),
    Add(Value, Value),
    Concat(Value, Value),
    Hadamard(Value, Value),
    Sigmoid(Value),
    Tanh(Value),
    Dot(Value, Value),
    LogSumExp(Value),
    Scale(Value, f64),
    Select(Value, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if reached.
    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    /// A leaf the tape does not differentiate into (inputs, dropout masks).
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Constant)
    }

    pub fn scalar(&mut self, x: f64) -> Value {
        self.constant(Tensor::scalar(x))
    }

    /// A leaf carrying a whole trainable tensor.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Value {
        self.push(t, Op::Param(ParamRef { id, row: None }))
    }

    /// A leaf carrying row `row` of a trainable matrix (sparse gradient).
    pub fn param_row(&mut self, id: ParamId, row: usize, t: Tensor) -> Value {
        self.push(t, Op::Param(ParamRef { id, row: Some(row) }))
    }

    /// Matrix-vector product.
    pub fn matvec(&mut self, m: Value, v: Value) -> Value {
        let (mt, vt) = (self.value(m), self.value(v));
        assert!(
            mt.is_matrix() && vt.is_vector() && mt.cols() == vt.len(),
            "matvec shape mismatch: {:?} x {:?}",
            mt.shape(),
            vt.shape()
        );
        let rows = mt.rows();
        let mut out = vec![0.0; rows];
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = mt
                .row(r)
                .iter()
                .zip(vt.data())
                .map(|(a, b)| a * b)
                .sum();
        }
        self.push(Tensor::vector(out), Op::MatVec(m, v))
    }

    /// Element-wise sum; shapes must match.
    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(
            at.shape(),
            bt.shape(),
            "add shape mismatch: {:?} vs {:?}",
            at.shape(),
            bt.shape()
        );
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::from_shape_data(shape, data), Op::Add(a, b))
    }

    /// Vector concatenation `[a; b]`.
    pub fn concat(&mut self, a: Value, b: Value) -> Value {
        let (at, bt) = (self.value(a), self.value(b));
        assert!(
            at.is_vector() && bt.is_vector(),
            "concat needs vectors, got {:?} and {:?}",
            at.shape(),
            bt.shape()
        );
        let mut data = Vec::with_capacity(at.len() + bt.len());
        data.extend_from_slice(at.data());
        data.extend_from_slice(bt.data());
        self.push(Tensor::vector(data), Op::Concat(a, b))
    }

    /// Element-wise product; shapes must match.
    pub fn hadamard(&mut self, a: Value, b: Value) -> Value {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(
            at.shape(),
            bt.shape(),
            "hadamard shape mismatch: {:?} vs {:?}",
            at.shape(),
            bt.shape()
        );
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::from_shape_data(shape, data), Op::Hadamard(a, b))
    }

    /// Element-wise logistic function.
    pub fn sigmoid(&mut self, a: Value) -> Value {
        let at = self.value(a);
        let data = at.data().iter().map(|&x| tensor::sigmoid(x)).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::from_shape_data(shape, data), Op::Sigmoid(a))
    }

    /// Element-wise hyperbolic tangent.
    pub fn tanh_(&mut self, a: Value) -> Value {
        let at = self.value(a);
        let data = at.data().iter().map(|x| x.tanh()).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::from_shape_data(shape, data), Op::Tanh(a))
    }

    /// Sum of element-wise products over tensors of equal shape -> scalar.
    pub fn dot(&mut self, a: Value, b: Value) -> Value {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(
            at.shape(),
            bt.shape(),
            "dot shape mismatch: {:?} vs {:?}",
            at.shape(),
            bt.shape()
        );
        let s: f64 = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    /// Stable log-sum-exp of a vector -> scalar.
    pub fn logsumexp(&mut self, a: Value) -> Value {
        let at = self.value(a);
        assert!(
            at.is_vector() && !at.is_empty(),
            "logsumexp needs a nonempty vector, got {:?}",
            at.shape()
        );
        let s = tensor::logsumexp(at.data());
        self.push(Tensor::scalar(s), Op::LogSumExp(a))
    }

    /// Multiply every element by the constant `k`.
    pub fn scale(&mut self, a: Value, k: f64) -> Value {
        let at = self.value(a);
        let data = at.data().iter().map(|x| x * k).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::from_shape_data(shape, data), Op::Scale(a, k))
    }

    /// Element `i` of a vector as a scalar.
    pub fn select(&mut self, v: Value, i: usize) -> Value {
        let vt = self.value(v);
        assert!(
            vt.is_vector() && i < vt.len(),
            "select index {} out of bounds for shape {:?}",
            i,
            vt.shape()
        );
        let x = vt.data()[i];
        self.push(Tensor::scalar(x), Op::Select(v, i))
    }

    /// `a - b` via `add(a, scale(b, -1))`.
    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Fold a nonempty slice of scalars into one vector.
    pub fn stack(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "stack of zero values");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.concat(acc, p);
        }
        acc
    }

    /// Fold a nonempty slice with `add`.
    pub fn sum(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "sum of zero values");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse-mode sweep from a scalar `root`. Fills gradient slots for
    /// every node `root` depends on; untouched nodes keep `None` (zero).
    pub fn backward(&mut self, root: Value) -> Result<(), AutodiffError> {
        let root_t = self.value(root);
        if !root_t.is_scalar() {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_t.shape().to_vec(),
            });
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        // Creation order is a topological order, so one reverse pass suffices.
        for idx in (0..=root.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatVec(m, v) => {
                    let mt = &nodes[m.0].value;
                    let vt = &nodes[v.0].value;
                    let (rows, cols) = (mt.rows(), mt.cols());
                    let gm = slot(grads, nodes, m);
                    for r in 0..rows {
                        let u = up.data()[r];
                        if u != 0.0 {
                            let grow = &mut gm.data_mut()[r * cols..(r + 1) * cols];
                            for (gc, vc) in grow.iter_mut().zip(vt.data()) {
                                *gc += u * vc;
                            }
                        }
                    }
                    let gv = slot(grads, nodes, v);
                    for r in 0..rows {
                        let u = up.data()[r];
                        if u != 0.0 {
                            let mrow = mt.row(r);
                            for (gc, mc) in gv.data_mut().iter_mut().zip(mrow) {
                                *gc += u * mc;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    slot(grads, nodes, a).add_assign(&up);
                    slot(grads, nodes, b).add_assign(&up);
                }
                Op::Concat(a, b) => {
                    let na = nodes[a.0].value.len();
                    let ga = slot(grads, nodes, a);
                    for (g, u) in ga.data_mut().iter_mut().zip(&up.data()[..na]) {
                        *g += u;
                    }
                    let gb = slot(grads, nodes, b);
                    for (g, u) in gb.data_mut().iter_mut().zip(&up.data()[na..]) {
                        *g += u;
                    }
                }
                Op::Hadamard(a, b) => {
                    let bt = &nodes[b.0].value;
                    let ga = slot(grads, nodes, a);
                    for ((g, u), x) in ga.data_mut().iter_mut().zip(up.data()).zip(bt.data()) {
                        *g += u * x;
                    }
                    let at = &nodes[a.0].value;
                    let gb = slot(grads, nodes, b);
                    for ((g, u), x) in gb.data_mut().iter_mut().zip(up.data()).zip(at.data()) {
                        *g += u * x;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = slot(grads, nodes, a);
                    for ((g, u), s) in ga.data_mut().iter_mut().zip(up.data()).zip(y.data()) {
                        *g += u * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = slot(grads, nodes, a);
                    for ((g, u), t) in ga.data_mut().iter_mut().zip(up.data()).zip(y.data()) {
                        *g += u * (1.0 - t * t);
                    }
                }
                Op::Dot(a, b) => {
                    let u = up.item();
                    let bt = &nodes[b.0].value;
                    let ga = slot(grads, nodes, a);
                    ga.add_scaled(bt, u);
                    let at = &nodes[a.0].value;
                    let gb = slot(grads, nodes, b);
                    gb.add_scaled(at, u);
                }
                Op::LogSumExp(a) => {
                    // d lse / d x_i = exp(x_i - lse); reuse the forward result.
                    let u = up.item();
                    let lse = node.value.item();
                    let at = &nodes[a.0].value;
                    let ga = slot(grads, nodes, a);
                    for (g, x) in ga.data_mut().iter_mut().zip(at.data()) {
                        *g += u * (x - lse).exp();
                    }
                }
                Op::Scale(a, k) => {
                    slot(grads, nodes, a).add_scaled(&up, k);
                }
                Op::Select(v, i) => {
                    let gv = slot(grads, nodes, v);
                    gv.data_mut()[i] += up.item();
                }
            }
            grads[idx] = Some(up);
        }
        Ok(())
    }

    /// Leaf gradients in creation order, consuming the gradient slots.
    pub fn take_param_grads(&mut self) -> Vec<(ParamRef, Tensor)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pref) = node.op {
                if let Some(g) = self.grads.get_mut(i).and_then(|g| g.take()) {
                    out.push((pref, g));
                }
            }
        }
        out
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Value) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

/// Named trainable tensors. Ids are dense and allocation order is the
/// canonical serialization order.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Included in the L2 term (weights and embeddings yes, biases no).
    pub regularized: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, regularized: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            regularized,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Per-graph cache of parameter leaves so each tensor (or row) enters a
/// graph once.
pub struct ParamLeaves<'s> {
    store: &'s ParamStore,
    whole: HashMap<ParamId, Value>,
    rows: HashMap<(ParamId, usize), Value>,
}

impl<'s> ParamLeaves<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        ParamLeaves {
            store,
            whole: HashMap::new(),
            rows: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn leaf(&mut self, g: &mut Graph, id: ParamId) -> Value {
        if let Some(&v) = self.whole.get(&id) {
            return v;
        }
        let v = g.param(id, self.store.tensor(id).clone());
        self.whole.insert(id, v);
        v
    }

    pub fn row(&mut self, g: &mut Graph, id: ParamId, row: usize) -> Value {
        if let Some(&v) = self.rows.get(&(id, row)) {
            return v;
        }
        let t = Tensor::vector(self.store.tensor(id).row(row).to_vec());
        let v = g.param_row(id, row, t);
        self.rows.insert((id, row), v);
        v
    }
}

/// Dense per-parameter gradient accumulator for one batch.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Add one leaf gradient (whole tensor or a single matrix row).
    pub fn accumulate(&mut self, store: &ParamStore, pref: ParamRef, grad: &Tensor) {
        let shape = store.tensor(pref.id).shape().to_vec();
        let slot = self.grads[pref.id.0].get_or_insert_with(|| Tensor::zeros(&shape));
        match pref.row {
            None => slot.add_assign(grad),
            Some(r) => {
                for (s, g) in slot.row_mut(r).iter_mut().zip(grad.data()) {
                    *s += g;
                }
            }
        }
    }

    /// Fold a per-sentence leaf list (from `Graph::take_param_grads`).
    pub fn absorb(&mut self, store: &ParamStore, leaves: &[(ParamRef, Tensor)]) {
        for (pref, g) in leaves {
            self.accumulate(store, *pref, g);
        }
    }

    /// Add the gradient of `(lambda/2) * ||theta||^2` over regularized params.
    pub fn add_l2(&mut self, store: &ParamStore, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (id, entry) in store.iter() {
            if entry.regularized {
                let slot = self.grads[id.0]
                    .get_or_insert_with(|| Tensor::zeros(entry.tensor.shape()));
                slot.add_scaled(&entry.tensor, lambda);
            }
        }
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|t| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients by `max_norm / norm` when the global norm
    /// exceeds `max_norm`; zero or small gradients pass through untouched.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        assert!(max_norm > 0.0, "max_norm must be positive");
        let norm = self.global_norm();
        if norm > max_norm {
            let k = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                g.scale_in_place(k);
            }
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|t| t.all_finite())
    }
}
