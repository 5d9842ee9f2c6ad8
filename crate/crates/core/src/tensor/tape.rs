use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Element, Result, Tensor, TensorError};

/// Maps the gradient of an op's output onto its inputs.
///
/// The second argument flags which inputs need a gradient; entries for inputs
/// that do not may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
///
/// Nodes are appended in execution order, so node ids are a topological
/// order and the backward pass simply walks them in reverse. The tape is
/// single-threaded; build one per forward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients accumulate into it on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert("leaf", value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert("constant", value, Vec::new(), None, false)
    }

    /// Records the result of an op. The backward closure is dropped when no
    /// input needs a gradient.
    pub fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.insert(op, value, parents, backward, requires_grad)
    }

    fn insert(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate across calls; use [`Tape::zero_grads`] to reset.
    /// Every node that requires a gradient ends up with one (zeros when it
    /// does not influence `loss`).
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut local: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Tensor::ones(loss_node.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = local[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (true, Some(pg)) = (need, pg) else {
                    continue;
                };
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut local[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            local[id] = Some(g);
        }

        let mut grads = self.grads.borrow_mut();
        grads.resize(nodes.len(), None);
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = local
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        self.grads.borrow_mut().clear();
    }

    /// First recorded node holding a non-finite value, in execution order.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Operation names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub(crate) fn check_same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_times_x_gives_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = x.scale(0.0).sum();
        tape.backward(loss).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let loss = x.scale(3.0).sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, 6.0]);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn every_grad_input_gets_a_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2]));
        let b = tape.leaf(Tensor::ones(&[2]));
        let _unused = b.scale(2.0);
        let loss = a.sum();
        tape.backward(loss).unwrap();
        assert_eq!(b.grad().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(_unused.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        use std::cell::RefCell;
        use std::rc::Rc;
        let order = Rc::new(RefCell::new(Vec::new()));
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1]));
        let mut cur = x;
        for i in 0..4 {
            let log = order.clone();
            let v = (*cur.value()).clone();
            cur = tape.push(
                "probe",
                v,
                &[cur],
                Box::new(move |g, _| {
                    log.borrow_mut().push(i);
                    vec![Some(g.clone())]
                }),
            );
        }
        tape.backward(cur).unwrap();
        assert_eq!(*order.borrow(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn non_finite_reports_first_op() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let r = x.recip();
        let _s = r.scale(2.0);
        let (_, op) = tape.first_non_finite().unwrap();
        assert_eq!(op, "recip");
    }
}
