use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::{Shape, Tensor};

/// Per-parameter Adam moment buffers, allocated on first optimizer step.
#[derive(Default)]
pub(super) struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// A named, persistent tensor: trainable weights or non-trainable buffers
/// (batch-norm running statistics). Trainable parameters carry gradient
/// buffers and Adam moments; buffers are saved/restored but never stepped.
pub struct Parameter {
    name: String,
    tensor: Tensor,
    trainable: bool,
    pub(super) moments: RefCell<Option<Moments>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter {
            name: name.into(),
            tensor: tensor.requires_grad(),
            trainable: true,
            moments: RefCell::new(None),
        }
    }

    /// A non-trainable buffer (e.g. running statistics).
    pub fn buffer(name: impl Into<String>, tensor: Tensor) -> Parameter {
        Parameter {
            name: name.into(),
            tensor,
            trainable: false,
            moments: RefCell::new(None),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.len() == 0
    }

    /// Copy of the current values (checkpointing).
    pub fn snapshot(&self) -> Vec<f32> {
        self.tensor.values().clone()
    }

    /// Restores values from a checkpoint slice.
    pub fn restore(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "parameter '{}': restore length {} != {}",
                self.name,
                values.len(),
                self.len()
            )));
        }
        self.tensor.set_values(values)
    }
}

/// He-uniform initialization: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
/// The RNG is caller-seeded, which makes initialization deterministic.
pub fn he_uniform<R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in > 0, "he_uniform requires fan_in >= 1");
    uniform_init(shape, (6.0f64 / fan_in as f64).sqrt(), rng)
}

/// Fan-in uniform initialization: `U(−b, b)` with `b = 1 / sqrt(fan_in)` —
/// the conventional default for dense layers. Carries less gain than
/// [`he_uniform`]; used for gate layers feeding a sigmoid (attention), where
/// the ReLU-calibrated gain would start the gates saturated instead of
/// neutral. That matters at desk scale, where an attention bottleneck can be
/// a single unit: saturated gates collapse whole channels to near-constants,
/// which downstream batch norm then blows up into degenerate activations.
pub fn fan_in_uniform<R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in > 0, "fan_in_uniform requires fan_in >= 1");
    uniform_init(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn uniform_init<R: Rng>(shape: Shape, bound: f64, rng: &mut R) -> Tensor {
    let values: Vec<f32> = (0..shape.count())
        .map(|_| (rng.random::<f64>() * 2.0 * bound - bound) as f32)
        .collect();
    Tensor::from_vec(shape, values).expect("count matches by construction")
}
