// Wengert-list tape: every differentiable op appends a node holding its
// output value, its parents and a backward rule. `Tape::backward` walks the
// list in reverse, so nodes are already topologically ordered.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `grad` has the shape of `output`. The returned vector holds one entry
/// per parent; entries for parents with `needs[i] == false` may be `None`.
pub trait Backward {
    fn backward(
        &self,
        grad: &[f64],
        parents: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            rule: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends the result of an op. Fails if the output is not finite.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        rule: Box<dyn Backward>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::non_finite(op));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            rule: if requires_grad { Some(rule) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be a scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(rule) = &node.rule {
                let parents: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                let parent_grads = rule.backward(&grad, &parents, &node.value, &needs);
                for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    if !need {
                        continue;
                    }
                    let Some(pg) = pg else { continue };
                    match &mut grads[parent.0] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if node.rule.is_none() && node.requires_grad {
                // Leaf: keep its gradient.
                grads[idx] = Some(grad);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, grad) in self.nodes.into_iter().zip(grads) {
            let g = match grad {
                Some(g) if node.requires_grad && node.rule.is_none() => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    if !t.is_finite() {
                        return Err(Error::non_finite("backward"));
                    }
                    Some(t)
                }
                _ => None,
            };
            out.push(g);
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of the leaves that were recorded with `requires_grad`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}
