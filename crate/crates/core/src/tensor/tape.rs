use super::{Param, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::ops::Deref;

/// Index of a value recorded on a tape. Only meaningful for the tape that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Backward rule for one recorded operation. `needs[i]` tells which inputs
/// require a gradient; return `None` for the rest.
pub trait TapeOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[ValRef<'_>],
        output: &Tensor,
        out_grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

enum Slot {
    Owned(Tensor),
    Shared(Param),
}

struct Node {
    slot: Slot,
    inputs: Vec<TensorId>,
    op: Option<Box<dyn TapeOp>>,
    requires: bool,
}

/// Read access to a node value; leaves live behind a RefCell, intermediates
/// are owned by the tape.
pub enum ValRef<'a> {
    Plain(&'a Tensor),
    Cell(std::cell::Ref<'a, Tensor>),
}

impl Deref for ValRef<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            ValRef::Plain(t) => t,
            ValRef::Cell(r) => r,
        }
    }
}

/// Wengert list: every operation's inputs precede it, so one reverse sweep
/// visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_ids: HashMap<usize, TensorId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a shared parameter as a leaf. Repeated registration returns
    /// the same id, so gradients from every use accumulate once.
    pub fn leaf(&mut self, p: &Param) -> TensorId {
        let key = p.ptr_key();
        if let Some(&id) = self.leaf_ids.get(&key) {
            return id;
        }
        let requires = p.requires_grad();
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { slot: Slot::Shared(p.clone()), inputs: vec![], op: None, requires });
        self.leaf_ids.insert(key, id);
        id
    }

    /// Register a shared parameter with gradient flow disabled, regardless of
    /// its own flag. Used to freeze one network while training the other.
    pub fn leaf_frozen(&mut self, p: &Param) -> TensorId {
        let key = p.ptr_key();
        if let Some(&id) = self.leaf_ids.get(&key) {
            return id;
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { slot: Slot::Shared(p.clone()), inputs: vec![], op: None, requires: false });
        self.leaf_ids.insert(key, id);
        id
    }

    /// Place a plain value on the tape (no gradient).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { slot: Slot::Owned(t), inputs: vec![], op: None, requires: false });
        id
    }

    /// Place a value on the tape and mark it differentiable even though it is
    /// not a shared parameter (gradients flow through but are not stored).
    pub fn variable(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { slot: Slot::Owned(t), inputs: vec![], op: None, requires: true });
        id
    }

    pub fn val(&self, id: TensorId) -> ValRef<'_> {
        match &self.nodes[id.0].slot {
            Slot::Owned(t) => ValRef::Plain(t),
            Slot::Shared(p) => ValRef::Cell(p.0.borrow()),
        }
    }

    pub fn value_clone(&self, id: TensorId) -> Tensor {
        self.val(id).clone()
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.val(id).shape.clone()
    }

    pub fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    /// Record an operation output. The forward value is computed by the
    /// caller; this stores it, wires inputs, and runs the finite guard.
    pub fn record(
        &mut self,
        op: Box<dyn TapeOp>,
        inputs: Vec<TensorId>,
        output: Tensor,
    ) -> Result<TensorId> {
        output.check_finite(op.name())?;
        let requires = inputs.iter().any(|&i| self.nodes[i.0].requires);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { slot: Slot::Owned(output), inputs, op: Some(op), requires });
        Ok(id)
    }

    /// Cut gradient flow: same value, no history.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = self.value_clone(id);
        self.constant(t)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into the grad
    /// buffers of every shared leaf that requires them; buffers keep summing
    /// across calls until zeroed by the caller.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires {
            return Ok(()); // nothing on this tape needs a gradient
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires {
                continue;
            }
            let node = &self.nodes[i];
            match (&node.op, &node.slot) {
                (None, Slot::Shared(p)) => {
                    p.0.borrow_mut().accumulate_grad(&g);
                }
                (None, Slot::Owned(_)) => {}
                (Some(op), slot) => {
                    let output = match slot {
                        Slot::Owned(t) => t,
                        Slot::Shared(_) => unreachable!("op outputs are owned"),
                    };
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&j| self.nodes[j.0].requires).collect();
                    let input_vals: Vec<ValRef<'_>> =
                        node.inputs.iter().map(|&j| self.val(j)).collect();
                    let in_grads = op.backward(&input_vals, output, &g, &needs);
                    debug_assert_eq!(in_grads.len(), node.inputs.len());
                    drop(input_vals);
                    let input_ids = node.inputs.clone();
                    for (j, ig) in input_ids.iter().zip(in_grads) {
                        if let Some(ig) = ig {
                            match &mut grads[j.0] {
                                Some(buf) => {
                                    for (b, v) in buf.iter_mut().zip(&ig) {
                                        *b += v;
                                    }
                                }
                                slot_g => *slot_g = Some(ig),
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
