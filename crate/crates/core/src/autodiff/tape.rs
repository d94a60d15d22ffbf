use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Backward rule of a recorded node: given the output gradient and a mask of
/// which inputs are tracked, returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    shape: Vec<usize>,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    is_leaf: bool,
}

/// Straight-through bookkeeping used by finite-difference checks: the first
/// pass records every hard/soft pair, later passes replay the recorded hard
/// values so the check sees only the smooth soft path.
enum StProbe<T> {
    Off,
    Record(Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>),
    Replay {
        refs: Rc<Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>>,
        cursor: usize,
    },
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    consumed: Cell<bool>,
    probe: RefCell<StProbe<T>>,
}

/// A value bound to a tape. Constants and values on a no-grad tape carry no id.
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: Option<usize>,
    pub(crate) value: Rc<Tensor<T>>,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape,
            id: self.id,
            value: Rc::clone(&self.value),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
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
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            probe: RefCell::new(StProbe::Off),
        }
    }

    /// A tape that records nothing: every op just computes its value.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node and its saved tensors.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: value.shape().to_vec(),
                parents: Vec::new(),
                backward: None,
                is_leaf: true,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// Records a custom op. `backward` is only kept when at least one input is tracked.
    pub fn op<'t, F>(&'t self, value: Tensor<T>, inputs: &[&Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let id = if self.recording && parents.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape: value.shape().to_vec(),
                parents,
                backward: Some(Box::new(backward)),
                is_leaf: false,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// Reverse sweep from a single-element `loss`. Every leaf of this tape gets
    /// an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must have exactly one element, got shape {:?}",
                loss.value.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new graph first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(id) = loss.id {
            grads[id] = Some(Tensor::ones(loss.value.shape()));
        }
        for id in (0..nodes.len()).rev() {
            let node = &nodes[id];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let need: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = back(&g, &need)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (p, pg) else { continue };
                if pg.shape() != nodes[*p].shape.as_slice() {
                    return Err(Error::Autodiff(format!(
                        "gradient shape {:?} does not match value shape {:?}",
                        pg.shape(),
                        nodes[*p].shape
                    )));
                }
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        let mut by_id = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
                by_id.insert(id, g);
            }
        }
        Ok(Gradients { by_id })
    }

    pub(crate) fn st_begin_record(&self) {
        *self.probe.borrow_mut() = StProbe::Record(Vec::new());
    }

    pub(crate) fn st_take_record(&self) -> Rc<Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>> {
        match std::mem::replace(&mut *self.probe.borrow_mut(), StProbe::Off) {
            StProbe::Record(v) => Rc::new(v),
            _ => Rc::new(Vec::new()),
        }
    }

    pub(crate) fn st_begin_replay(&self, refs: Rc<Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>>) {
        *self.probe.borrow_mut() = StProbe::Replay { refs, cursor: 0 };
    }

    /// Value of a straight-through output, honoring any active probe.
    pub(crate) fn st_value(&self, hard: Tensor<T>, soft: &Rc<Tensor<T>>) -> Result<Tensor<T>> {
        let mut probe = self.probe.borrow_mut();
        match &mut *probe {
            StProbe::Off => Ok(hard),
            StProbe::Record(v) => {
                let hard = Rc::new(hard);
                v.push((Rc::clone(&hard), Rc::clone(soft)));
                Ok(Rc::try_unwrap(hard).unwrap_or_else(|rc| (*rc).clone()))
            }
            StProbe::Replay { refs, cursor } => {
                let (h, s) = refs.get(*cursor).ok_or_else(|| {
                    Error::Autodiff("straight-through replay ran past the recorded calls".into())
                })?;
                *cursor += 1;
                h.zip_map(soft, "straight_through", |a, b| a + b)?.sub(s)
            }
        }
    }
}

/// Gradients of the leaves of one tape, keyed by the leaf variable.
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.by_id.get(&id))
    }

    /// Gradient of `v`, zeros if `v` is untracked.
    pub fn wrt(&self, v: &Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            tape: self.tape,
            id: None,
            value: Rc::clone(&self.value),
        }
    }
}
