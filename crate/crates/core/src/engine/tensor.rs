use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::io::Write as _;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Logical dimensions of a tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of `(n, c, h, w)` in row-major layout.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

struct Inner {
    id: u64,
    shape: Shape,
    values: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: std::cell::Cell<bool>,
}

/// A dense `(N, C, H, W)` tensor of `f32` values.
///
/// `Tensor` is a cheap handle (`Rc` inside): clones share storage. A tensor is
/// single-owner, single-threaded during forward/backward; gradients live next
/// to the values and are accumulated by the tape's backward pass.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, values: Vec<f32>) -> Result<Tensor> {
        if values.len() != shape.count() {
            return Err(Error::Dimension(format!(
                "tensor shape {} wants {} values, got {}",
                shape,
                shape.count(),
                values.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: std::cell::Cell::new(false),
            }),
        })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.count()]).expect("count matches by construction")
    }

    /// A 1-D quantity (bias, per-channel stats) stored as `(1, len, 1, 1)`.
    pub fn vector(values: Vec<f32>) -> Tensor {
        let shape = Shape::new(1, values.len(), 1, 1);
        Tensor::from_vec(shape, values).expect("count matches by construction")
    }

    /// A single scalar stored as `(1, 1, 1, 1)`.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![value]).expect("count matches")
    }

    /// Marks the tensor as a gradient target (used by parameters and
    /// gradient-check inputs). Consumes and returns `self` builder-style.
    pub fn requires_grad(self) -> Tensor {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn wants_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn values(&self) -> Ref<'_, Vec<f32>> {
        self.inner.values.borrow()
    }

    pub fn values_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.values.borrow_mut()
    }

    /// Replaces the stored values. Length must match the shape.
    pub fn set_values(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "set_values: expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        self.inner.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f32>>> {
        self.inner.grad.borrow()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Seeds the gradient buffer with a constant (used for the loss root).
    pub fn seed_grad(&self, value: f32) {
        *self.inner.grad.borrow_mut() = Some(vec![value; self.len()]);
    }

    /// Errors if any stored value is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        let values = self.values();
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op,
                    detail: format!(" (first at flat index {i}, value {v})"),
                });
            }
        }
        Ok(())
    }

    /// Writes the tensor as CSV for debugging: a `shape=N,C,H,W` header line,
    /// then one row of `W` values per `(n, c, h)` slice, row-major.
    pub fn write_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let s = self.shape();
        writeln!(out, "shape={},{},{},{}", s.n, s.c, s.h, s.w)?;
        let values = self.values();
        for row in values.chunks(s.w.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor#{}{}", self.id(), self.shape())
    }
}
