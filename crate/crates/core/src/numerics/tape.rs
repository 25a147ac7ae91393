//! Reverse-mode gradient tape.
//!
//! Ops record themselves on the thread's active tape in execution order.
//! `backward` replays the records once, in reverse, accumulating gradients
//! into a map keyed by tensor identity.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Tensor, TensorId};

/// One recorded op: the output it produced plus a closure that maps the
/// output gradient to per-input gradient contributions.
pub(crate) struct OpRecord {
    pub name: &'static str,
    pub output: TensorId,
    pub backward: Box<dyn Fn(&[f32]) -> Vec<(TensorId, Vec<f32>)>>,
}

#[derive(Default)]
struct TapeInner {
    records: Vec<OpRecord>,
}

thread_local! {
    static ACTIVE: RefCell<Option<Rc<RefCell<TapeInner>>>> = const { RefCell::new(None) };
}

/// Whether an op executed now should record for gradients.
pub(crate) fn tape_active() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

/// Push a record onto the active tape, if any.
pub(crate) fn record(rec: OpRecord) {
    ACTIVE.with(|a| {
        if let Some(tape) = a.borrow().as_ref() {
            tape.borrow_mut().records.push(rec);
        }
    });
}

/// RAII handle over the thread's gradient tape. Creating it activates
/// recording; dropping it (or calling `backward`) deactivates.
pub struct GradTape {
    inner: Rc<RefCell<TapeInner>>,
}

impl GradTape {
    /// Activates recording on this thread. Panics if a tape is already
    /// active: a training step is single-threaded and owns one tape.
    /// No `Default`: constructing one has a thread-wide side effect.
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let inner = Rc::new(RefCell::new(TapeInner::default()));
        ACTIVE.with(|a| {
            let mut slot = a.borrow_mut();
            assert!(slot.is_none(), "a GradTape is already active on this thread");
            *slot = Some(Rc::clone(&inner));
        });
        GradTape { inner }
    }

    pub fn num_records(&self) -> usize {
        self.inner.borrow().records.len()
    }

    /// Reverse pass from a scalar loss. Visits each recorded op exactly once,
    /// in reverse execution order, and returns gradients for every tensor
    /// that received one (leaves included). Consumes the recorded ops.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let records = std::mem::take(&mut self.inner.borrow_mut().records);
        if !records.iter().any(|r| r.output == loss.id()) {
            return Err(Error::Contract(
                "backward: loss is not connected to this tape".into(),
            ));
        }

        let mut store: HashMap<TensorId, Vec<f32>> = HashMap::new();
        store.insert(loss.id(), vec![1.0]);

        for rec in records.iter().rev() {
            let Some(grad_out) = store.get(&rec.output) else {
                continue;
            };
            let contributions = (rec.backward)(grad_out);
            for (id, grad) in contributions {
                match store.get_mut(&id) {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), grad.len(), "grad length mismatch in {}", rec.name);
                        for (a, g) in acc.iter_mut().zip(grad.iter()) {
                            *a += g;
                        }
                    }
                    None => {
                        store.insert(id, grad);
                    }
                }
            }
        }

        Ok(Gradients { map: store })
    }
}

impl Drop for GradTape {
    fn drop(&mut self) {
        ACTIVE.with(|a| {
            *a.borrow_mut() = None;
        });
    }
}

/// Accumulated gradients keyed by tensor identity.
pub struct Gradients {
    map: HashMap<TensorId, Vec<f32>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` participated.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f32]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.map.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
