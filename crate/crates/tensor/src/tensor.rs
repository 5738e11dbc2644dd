use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor, used by a tape to route gradients back to it.
/// Every tensor (including every clone) gets a fresh id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array with an optional gradient buffer.
///
/// The data buffer is reference counted so a tape can hold onto weights
/// without copying them. Mutation goes through [`Tensor::data_mut`], which
/// copies only if a tape still shares the buffer.
#[derive(Debug)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    id: ParamId,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            id: ParamId::fresh(),
        }
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    /// Value equality on shape and data; ids and gradients are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::Dimension {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        }
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        }
    }

    /// Trainable parameter initialised uniformly in `±sqrt(1/fan_in)`.
    pub fn param<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Self::uniform(shape, bound, rng).with_grad()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<S> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<S>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let len = self.data.len();
        let buf = self.grad.get_or_insert_with(|| vec![S::zero(); len]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x;
        }
        Ok(())
    }

    /// Makes sure a (possibly all-zero) gradient buffer exists.
    pub fn ensure_grad(&mut self) {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); len]);
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_shared(shape.to_vec(), self.shared_data()))
    }

    /// Copies the values into a tensor of another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            grad: None,
            requires_grad: self.requires_grad,
            id: ParamId::fresh(),
        }
    }

    /// Element `b` of the leading axis, as a new tensor.
    pub fn select(&self, b: usize) -> Result<Self> {
        let lead = *self.shape.first().unwrap_or(&0);
        if b >= lead {
            return Err(TensorError::Index {
                op: "select",
                index: b,
                bound: lead,
            });
        }
        let stride = self.len() / lead;
        let data = self.data[b * stride..(b + 1) * stride].to_vec();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        })
    }

    /// Gathers rows of the leading axis into a new tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().unwrap_or(&0);
        let stride = self.len().checked_div(lead).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    bound: lead,
                });
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(0);
        }
        shape[0] = rows.len();
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
            id: ParamId::fresh(),
        })
    }
}
