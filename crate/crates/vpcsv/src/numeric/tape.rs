//! Reverse-mode autodiff over a per-step tape.
//!
//! A [`Tape`] is built fresh for every training step. Ops record a backward
//! rule as they execute; [`Tape::backward`] replays the rules in reverse
//! creation order, which is a valid topological order because every consumer
//! of a node is created after it. Saved activations are shared via `Rc`, so
//! recording is cheap and the graph is dropped wholesale after the step.

use std::collections::HashMap;
use std::rc::Rc;

use super::NumericError;

pub type NodeId = usize;
pub type ParamId = usize;

/// A tensor tracked on a tape: shape plus shared immutable storage.
#[derive(Clone)]
pub struct Value {
    pub(super) id: NodeId,
    pub(super) shape: Vec<usize>,
    pub(super) data: Rc<Vec<f32>>,
    pub(super) tracked: bool,
}

impl Value {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extract the single element of a scalar-shaped value.
    pub fn scalar(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "scalar() on non-scalar value");
        self.data[0]
    }
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Value(id={}, shape={:?})", self.id, self.shape)
    }
}

/// Per-node gradient accumulator used during backward.
pub struct GradStore {
    slots: Vec<Option<Vec<f32>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore { slots: vec![None; n] }
    }

    /// Mutable gradient buffer for a node, zero-initialized on first touch.
    pub fn slot(&mut self, id: NodeId, len: usize) -> &mut [f32] {
        let entry = &mut self.slots[id];
        if entry.is_none() {
            *entry = Some(vec![0.0f32; len]);
        }
        entry.as_mut().unwrap()
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }
}

pub(super) type BackwardFn = Box<dyn Fn(&[f32], &mut GradStore)>;

struct Entry {
    out: NodeId,
    back: BackwardFn,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    store: GradStore,
    param_nodes: HashMap<ParamId, (NodeId, usize)>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` when the parameter was not on
    /// any path to the loss (treated as zero by the optimizer).
    pub fn for_param(&self, pid: ParamId) -> Option<&[f32]> {
        let (node, _) = self.param_nodes.get(&pid)?;
        self.store.get(*node)
    }

    /// Gradient for any tracked value on the tape (used by the CAM pass).
    pub fn of(&self, value: &Value) -> Option<&[f32]> {
        self.store.get(value.id)
    }
}

/// Records the forward pass and owns the backward rules.
pub struct Tape {
    entries: Vec<Entry>,
    num_nodes: usize,
    pub(super) param_leaves: HashMap<ParamId, NodeId>,
    pub(super) param_info: HashMap<ParamId, (NodeId, usize)>,
    pub(super) train: bool,
}

impl Tape {
    /// Tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            num_nodes: 0,
            param_leaves: HashMap::new(),
            param_info: HashMap::new(),
            train: false,
        }
    }

    /// Tape in training mode: dropout is live.
    pub fn training() -> Self {
        let mut t = Tape::new();
        t.train = true;
        t
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub(super) fn fresh_id(&mut self) -> NodeId {
        let id = self.num_nodes;
        self.num_nodes += 1;
        id
    }

    /// Leaf that never carries gradient (inputs, masks, lookup tables).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Value {
            id: self.fresh_id(),
            shape: shape.to_vec(),
            data: Rc::new(data),
            tracked: false,
        }
    }

    /// Leaf that participates in gradient computation without being a
    /// parameter (e.g. probing input sensitivities).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Value {
            id: self.fresh_id(),
            shape: shape.to_vec(),
            data: Rc::new(data),
            tracked: true,
        }
    }

    /// Parameter leaf. Repeated requests for the same parameter on one tape
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &super::adam::ParamStore, pid: ParamId) -> Value {
        if let Some(&node) = self.param_leaves.get(&pid) {
            let (_, len) = self.param_info[&pid];
            debug_assert_eq!(len, store.data(pid).len());
            return Value {
                id: node,
                shape: store.shape(pid).to_vec(),
                data: Rc::new(store.data(pid).to_vec()),
                tracked: true,
            };
        }
        let v = self.leaf(store.shape(pid), store.data(pid).to_vec());
        self.param_leaves.insert(pid, v.id);
        self.param_info.insert(pid, (v.id, v.numel()));
        v
    }

    /// Record an op output together with its backward rule. The rule is
    /// dropped when no input is tracked, which is also how `stop_gradient`
    /// cuts the graph.
    pub(super) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        tracked: bool,
        back: Option<BackwardFn>,
    ) -> Value {
        self.push_shared(shape, Rc::new(data), tracked, back)
    }

    /// Like `push` but reuses existing storage (reshape-style views).
    pub(super) fn push_shared(
        &mut self,
        shape: Vec<usize>,
        data: Rc<Vec<f32>>,
        tracked: bool,
        back: Option<BackwardFn>,
    ) -> Value {
        let id = self.fresh_id();
        if tracked {
            if let Some(back) = back {
                self.entries.push(Entry { out: id, back });
            }
        }
        Value { id, shape, data, tracked }
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every tracked
    /// node reachable from the loss; untouched nodes read back as zero.
    pub fn backward(&self, loss: &Value) -> Result<Gradients, NumericError> {
        if loss.numel() != 1 {
            return Err(NumericError::NonScalarLoss(loss.shape.clone()));
        }
        let mut store = GradStore::new(self.num_nodes);
        store.slot(loss.id, 1)[0] = 1.0;
        for entry in self.entries.iter().rev() {
            // A node's grad is complete before its own entry runs: all
            // consumers appear later on the tape and have already fired.
            let upstream = match store.slots[entry.out].take() {
                Some(g) => g,
                None => continue,
            };
            (entry.back)(&upstream, &mut store);
            store.slots[entry.out] = Some(upstream);
        }
        Ok(Gradients { store, param_nodes: self.param_info.clone() })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub(super) fn accumulate(store: &mut GradStore, id: NodeId, len: usize, contrib: &[f32]) {
    let slot = store.slot(id, len);
    for (s, &c) in slot.iter_mut().zip(contrib.iter()) {
        *s += c;
    }
}

pub(super) fn accumulate_f64(store: &mut GradStore, id: NodeId, len: usize, contrib: &[f64]) {
    let slot = store.slot(id, len);
    for (s, &c) in slot.iter_mut().zip(contrib.iter()) {
        *s += c as f32;
    }
}
