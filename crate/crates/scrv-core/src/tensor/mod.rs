//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created on it. Tensors are cheap handles
//! (tape + node id); recording an operation appends a node holding the forward
//! values plus a backward rule over its input ids. The node list is
//! topologically ordered by construction, so [`Tensor::backward`] is a single
//! reverse sweep that visits each node exactly once.
//!
//! Tensors on the tape are never mutated in place; optimizer updates happen on
//! parameter storage outside the tape, between steps.

mod conv;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Read-only view of one operation input during the backward sweep.
pub(crate) struct InView<'a, T: Scalar> {
    pub data: &'a [T],
    pub shape: &'a [usize],
    pub needs: bool,
}

/// Everything a backward rule may read: upstream gradient, the op's own output,
/// and views of its inputs. Rules return one owned gradient contribution per
/// input (`None` for inputs outside the gradient path); the engine accumulates.
pub(crate) struct RuleIo<'a, T: Scalar> {
    pub gout: &'a [T],
    pub out_data: &'a [T],
    pub out_shape: &'a [usize],
    pub inputs: Vec<InView<'a, T>>,
}

pub(crate) type Rule<T> = Box<dyn Fn(&RuleIo<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Recorded<T: Scalar> {
    inputs: SmallVec<[usize; 4]>,
    rule: Rule<T>,
}

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    /// Empty until touched by a backward sweep.
    grad: Vec<T>,
    /// Leaf flag: gradients accumulate here across backward calls.
    requires_grad: bool,
    /// True when this node is a `requires_grad` leaf or depends on one.
    needs_grad: bool,
    op: Option<Recorded<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Recording arena for one forward/backward pass.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidOp(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape: shape.to_vec(),
            grad: Vec::new(),
            requires_grad,
            needs_grad: requires_grad,
            op: None,
        });
        Ok(Tensor {
            tape: self.clone(),
            id,
            shape: shape.to_vec(),
        })
    }

    /// Leaf that never receives gradient (inputs, labels, constants).
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.leaf(vec![v], &[], false).expect("scalar leaf")
    }

    pub(crate) fn push_result(
        &self,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: SmallVec<[usize; 4]>,
        rule: Rule<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.inner.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| inner.nodes[i].needs_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape: shape.clone(),
            grad: Vec::new(),
            requires_grad: false,
            needs_grad,
            op: Some(Recorded { inputs, rule }),
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node on a [`Tape`].
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Node id on the owning tape; two tensors share storage iff ids match.
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub(crate) fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub(crate) fn check_same_tape(&self, other: &Tensor<T>) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    /// Copy of the forward values.
    pub fn value(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Borrowed access to the forward values.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].data)
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        debug_assert_eq!(node.data.len(), 1, "item() on non-scalar");
        node.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass touched it.
    pub fn grad(&self) -> Option<Vec<T>> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.grad.is_empty() {
            None
        } else {
            Some(node.grad.clone())
        }
    }

    /// Reverse sweep from this scalar. Leaf gradients accumulate across calls;
    /// intermediate gradients are recomputed each call. After the sweep every
    /// `requires_grad` leaf holds an allocated (possibly zero) gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        let mut inner = self.tape.inner.borrow_mut();
        let inner = &mut *inner;

        for node in inner.nodes.iter_mut() {
            if node.op.is_some() {
                node.grad.clear();
            }
        }

        let seed_sweep = {
            let loss = &mut inner.nodes[self.id];
            if loss.needs_grad {
                if loss.grad.is_empty() {
                    loss.grad = vec![T::one()];
                } else {
                    loss.grad[0] += T::one();
                }
                true
            } else {
                false
            }
        };

        if seed_sweep {
            for id in (0..=self.id).rev() {
                {
                    let node = &inner.nodes[id];
                    if node.op.is_none() || !node.needs_grad || node.grad.is_empty() {
                        continue;
                    }
                }
                // Inputs always precede their consumer, so splitting at `id`
                // gives disjoint views of the output node and all inputs.
                let (input_ids, contribs) = {
                    let (lower, rest) = inner.nodes.split_at_mut(id);
                    let out = &rest[0];
                    let rec = out.op.as_ref().unwrap();
                    let io = RuleIo {
                        gout: &out.grad,
                        out_data: &out.data,
                        out_shape: &out.shape,
                        inputs: rec
                            .inputs
                            .iter()
                            .map(|&i| InView {
                                data: &lower[i].data,
                                shape: &lower[i].shape,
                                needs: lower[i].needs_grad,
                            })
                            .collect(),
                    };
                    let contribs = (rec.rule)(&io);
                    (rec.inputs.clone(), contribs)
                };
                debug_assert_eq!(input_ids.len(), contribs.len());
                for (&tid, contrib) in input_ids.iter().zip(contribs) {
                    let Some(contrib) = contrib else { continue };
                    let target = &mut inner.nodes[tid];
                    debug_assert_eq!(contrib.len(), target.data.len());
                    if target.grad.is_empty() {
                        target.grad = contrib;
                    } else {
                        for (g, v) in target.grad.iter_mut().zip(contrib) {
                            *g += v;
                        }
                    }
                }
            }
        }

        for node in inner.nodes.iter_mut() {
            if node.requires_grad && node.grad.is_empty() {
                node.grad = vec![T::zero(); node.data.len()];
            }
        }
        Ok(())
    }
}
