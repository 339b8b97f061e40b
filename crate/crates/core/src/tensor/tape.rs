use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// How `log` and `div` treat arguments outside their domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainMode {
    /// Clamp to `Element::DOMAIN_EPS`.
    Training,
    /// Return an error.
    Strict,
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>> + Send + Sync>;

struct Node<F> {
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
    /// `None` marks a leaf.
    backward: Option<BackwardFn<F>>,
}

struct TapeInner<F> {
    nodes: Mutex<Vec<Node<F>>>,
    mode: DomainMode,
}

/// Ordered record of operations. Cheap to clone (shared handle).
pub struct Tape<F: Element = f32> {
    inner: Arc<TapeInner<F>>,
}

impl<F: Element> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<F: Element> std::fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("mode", &self.inner.mode)
            .finish()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef<F: Element> {
    pub(crate) tape: Tape<F>,
    pub(crate) id: usize,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self::with_mode(DomainMode::Training)
    }

    pub fn strict() -> Self {
        Self::with_mode(DomainMode::Strict)
    }

    pub fn with_mode(mode: DomainMode) -> Self {
        Self {
            inner: Arc::new(TapeInner {
                nodes: Mutex::new(Vec::new()),
                mode,
            }),
        }
    }

    pub fn mode(&self) -> DomainMode {
        self.inner.mode
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.lock().expect("tape lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape<F>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiable leaf (a parameter or input).
    pub fn leaf(&self, value: &Tensor<F>) -> Tensor<F> {
        let id = {
            let mut nodes = self.inner.nodes.lock().expect("tape lock");
            nodes.push(Node {
                inputs: Vec::new(),
                shape: value.shape.clone(),
                backward: None,
            });
            nodes.len() - 1
        };
        Tensor {
            shape: value.shape.clone(),
            data: Arc::clone(&value.data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub(crate) fn push_op(
        &self,
        inputs: Vec<Option<usize>>,
        shape: Vec<usize>,
        backward: BackwardFn<F>,
    ) -> usize {
        let mut nodes = self.inner.nodes.lock().expect("tape lock");
        nodes.push(Node {
            inputs,
            shape,
            backward: Some(backward),
        });
        nodes.len() - 1
    }

    /// Reverse sweep from a scalar output. Every leaf of the tape receives an
    /// entry; leaves the output does not depend on get zeros.
    pub fn backward(&self, output: &Tensor<F>) -> Result<Gradients<F>> {
        let node = output
            .node
            .as_ref()
            .ok_or_else(|| Error::Backward("output is not recorded on a tape".into()))?;
        if !node.tape.same(self) {
            return Err(Error::Backward("output belongs to a different tape".into()));
        }
        if output.numel() != 1 {
            return Err(Error::Backward(format!(
                "output must be a scalar, got shape {:?}",
                output.shape
            )));
        }
        let nodes = self.inner.nodes.lock().expect("tape lock");
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(node.id + 1);
        grads.resize_with(node.id + 1, || None);
        grads[node.id] = Some(vec![F::one()]);

        let mut leaves = BTreeMap::new();
        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let n = &nodes[id];
            match &n.backward {
                None => {
                    leaves.insert(id, Tensor::new(&n.shape, g)?);
                }
                Some(pullback) => {
                    let needs: Vec<bool> = n.inputs.iter().map(Option::is_some).collect();
                    let input_grads = pullback(&g, &needs);
                    debug_assert_eq!(input_grads.len(), n.inputs.len());
                    for (slot, ig) in n.inputs.iter().zip(input_grads) {
                        let (Some(j), Some(ig)) = (slot, ig) else {
                            continue;
                        };
                        match &mut grads[*j] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&ig) {
                                    *a += *b;
                                }
                            }
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        for (id, n) in nodes.iter().enumerate() {
            if n.backward.is_none() && !leaves.contains_key(&id) {
                leaves.insert(id, Tensor::zeros(&n.shape));
            }
        }
        Ok(Gradients {
            tape: self.clone(),
            leaves,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F: Element = f32> {
    tape: Tape<F>,
    leaves: BTreeMap<usize, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient with respect to `leaf`, or `None` when `leaf` is not a leaf of
    /// this tape.
    pub fn get(&self, leaf: &Tensor<F>) -> Option<&Tensor<F>> {
        let node = leaf.node.as_ref()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        self.leaves.get(&node.id)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.leaves.keys().copied()
    }
}

impl<F: Element> Tensor<F> {
    pub fn backward(&self) -> Result<Gradients<F>> {
        let tape = self
            .tape()
            .ok_or_else(|| Error::Backward("output is not recorded on a tape".into()))?
            .clone();
        tape.backward(self)
    }
}

pub(crate) fn common_tape<F: Element>(
    op: &'static str,
    inputs: &[&Tensor<F>],
) -> Result<Option<Tape<F>>> {
    let mut found: Option<&Tape<F>> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match found {
                None => found = Some(tape),
                Some(f) if f.same(tape) => {}
                Some(_) => return Err(Error::TapeMismatch(op)),
            }
        }
    }
    Ok(found.cloned())
}
