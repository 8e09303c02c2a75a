use super::Tensor;
use crate::error::{Error, Result};
use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

/// Maps the gradient of an op's output to gradients of its parents.
///
/// Returns one entry per parent; `None` for parents that do not need a
/// gradient.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Var]) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether new ops on this thread are recorded on the tape.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording any ops on this thread's tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Mutex<Option<Tensor>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A tensor participating in the gradient tape.
///
/// Cloning is cheap (reference counted). Values are immutable once created.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf node. Leaves with `requires_grad` receive gradients from
    /// [`Var::backward`].
    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Arc::new(Node {
            value,
            requires_grad,
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    /// Record the result of an op. The value must be finite. When grad is
    /// disabled or no parent needs a gradient the result is a constant.
    pub fn from_op<F>(op: &str, value: Tensor, parents: Vec<Var>, backward: F) -> Result<Self>
    where
        F: Fn(&Tensor, &[Var]) -> Result<Vec<Option<Tensor>>> + Send + Sync + 'static,
    {
        value.check_finite(op)?;
        let needs = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !needs {
            return Ok(Self::constant(value));
        }
        Ok(Var(Arc::new(Node {
            value,
            requires_grad: true,
            grad: Mutex::new(None),
            parents,
            backward: Some(Box::new(backward)),
        })))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Gradient stored by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> Result<f64> {
        self.0.value.item()
    }

    fn key(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable leaf with
    /// `requires_grad` has its gradient overwritten with dLoss/dLeaf.
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
        grads.insert(self.key(), Tensor::full(self.shape(), 1.0));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.requires_grad() {
                        *node.0.grad.lock().expect("grad lock poisoned") = Some(g);
                    }
                }
                Some(bw) => {
                    let parent_grads = bw(&g, &node.0.parents)?;
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.add_assign(&pg)?,
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require grad (parents before children).
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
