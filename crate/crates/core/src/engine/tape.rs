use std::collections::HashSet;

use crate::error::{Error, Result};

use super::tensor::Tensor;

struct Step {
    op: &'static str,
    run: Box<dyn FnOnce()>,
}

/// Ordered record of executed operations for one forward pass.
///
/// Each recorded step owns a closure that, given the output's gradient,
/// accumulates gradients into the step's inputs. [`Tape::backward`] replays
/// the steps in exact reverse execution order and leaves the tape empty;
/// dropping the steps releases every captured intermediate tensor.
pub struct Tape {
    steps: Vec<Step>,
    produced: HashSet<u64>,
    recording: bool,
}

impl Tape {
    /// A recording tape for training and gradient checks.
    pub fn new() -> Tape {
        Tape {
            steps: Vec::new(),
            produced: HashSet::new(),
            recording: true,
        }
    }

    /// A non-recording tape: ops run forward-only (evaluation, mapping).
    pub fn inference() -> Tape {
        Tape {
            steps: Vec::new(),
            produced: HashSet::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded steps (diagnostic).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Called by ops to register the backward rule for `output`.
    pub(super) fn record<F: FnOnce() + 'static>(
        &mut self,
        op: &'static str,
        output: &Tensor,
        run: F,
    ) {
        if self.recording {
            self.produced.insert(output.id());
            self.steps.push(Step {
                op,
                run: Box::new(run),
            });
        }
    }

    /// Reverse-mode sweep from `loss`, which must be a scalar this tape
    /// produced. Seeds `d loss / d loss = 1`, then runs every recorded
    /// backward rule in reverse order. Consumes the recorded steps.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Graph(format!(
                "backward target must be a scalar, got shape {}",
                loss.shape()
            )));
        }
        if !self.produced.contains(&loss.id()) {
            return Err(Error::Graph(
                "backward target was not produced by this tape".into(),
            ));
        }
        loss.seed_grad(1.0);
        for step in self.steps.drain(..).rev() {
            let _ = step.op;
            (step.run)();
        }
        self.produced.clear();
        Ok(())
    }

    /// Drops all recorded steps and intermediates without running backward.
    pub fn clear(&mut self) {
        self.steps.clear();
        self.produced.clear();
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tensor::{Shape, Tensor};
    use super::*;

    #[test]
    fn backward_rejects_foreign_tensor() {
        let mut tape = Tape::new();
        let stray = Tensor::scalar(1.0);
        let err = tape.backward(&stray).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let err = tape.backward(&t).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn backward_runs_steps_in_reverse_order() {
        use std::cell::RefCell;
        use std::rc::Rc;

        let order: Rc<RefCell<Vec<u32>>> = Rc::new(RefCell::new(Vec::new()));
        let mut tape = Tape::new();
        let out = Tensor::scalar(0.0);
        for tag in [1u32, 2, 3] {
            let order = Rc::clone(&order);
            tape.record("t", &out, move || order.borrow_mut().push(tag));
        }
        tape.backward(&out).unwrap();
        assert_eq!(*order.borrow(), vec![3, 2, 1]);
        assert!(tape.is_empty());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let out = Tensor::scalar(0.0);
        tape.record("t", &out, || {});
        assert!(tape.is_empty());
        // And backward through it is a graph error.
        assert!(tape.backward(&out).is_err());
    }
}
