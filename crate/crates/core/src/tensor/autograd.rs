use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::{Scalar, Tensor};

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Origin<T: Scalar> {
    Constant,
    Leaf(usize),
    Op { inputs: Vec<Var<T>>, backward: BackwardFn<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    origin: Origin<T>,
}

/// A node in a dynamically built computation graph.
///
/// Values that do not depend on any leaf are constants and keep no history,
/// so inference runs hold only the live activations.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.requires_grad())
    }
}

impl<T: Scalar> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node { value, origin: Origin::Constant }))
    }

    /// A differentiable leaf; its gradient is reported under `id`.
    pub fn leaf(value: Tensor<T>, id: usize) -> Self {
        Var(Rc::new(Node { value, origin: Origin::Leaf(id) }))
    }

    pub(crate) fn from_op(value: Tensor<T>, inputs: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if inputs.iter().any(Var::requires_grad) {
            Var(Rc::new(Node { value, origin: Origin::Op { inputs, backward } }))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.0.origin, Origin::Constant)
    }

    /// Detached copy of the value.
    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) -> Grads<T> {
        assert_eq!(self.value().numel(), 1, "backward() needs a scalar output");
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Tensor<T>> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.0), Tensor::full(self.shape(), T::one()));
        let mut grads = Grads { by_id: HashMap::new() };
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&Rc::as_ptr(&node.0)) else {
                continue;
            };
            match &node.0.origin {
                Origin::Constant => {}
                Origin::Leaf(id) => grads.accumulate(*id, grad),
                Origin::Op { inputs, backward } => {
                    let input_grads = backward(&grad, inputs, &node.0.value);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (input, g) in inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), input.shape(), "gradient shape mismatch");
                        let key = Rc::as_ptr(&input.0);
                        match pending.get_mut(&key) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(key, g);
                            }
                        }
                    }
                }
            }
        }
        grads
    }

    /// Post-order of all differentiable ancestors (inputs before consumers).
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&var.0);
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((var.clone(), true));
            if let Origin::Op { inputs, .. } = &var.0.origin {
                for input in inputs {
                    if input.requires_grad() && !seen.contains(&Rc::as_ptr(&input.0)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients of a scalar with respect to the leaves reached by a backward pass.
#[derive(Debug)]
pub struct Grads<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    fn accumulate(&mut self, id: usize, grad: Tensor<T>) {
        match self.by_id.get_mut(&id) {
            Some(acc) => acc.add_assign(&grad),
            None => {
                self.by_id.insert(id, grad);
            }
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.by_id.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
