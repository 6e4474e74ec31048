use crate::scalar::Scalar;

use super::EngineError;

/// Dense n-dimensional array with an optional gradient slot.
///
/// Invariants: `product(shape) == values.len()`, and `grad`, when present,
/// has the same length as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, EngineError> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(EngineError::dim("tensor", format!("zero-sized axis in {shape:?}")));
        }
        if expect != values.len() {
            return Err(EngineError::dim(
                "tensor",
                format!("shape {shape:?} implies {expect} values, got {}", values.len()),
            ));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![v; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], values: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self, EngineError> {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise |self - other|. Shapes must match.
    pub fn linf_distance(&self, other: &Tensor<S>) -> Result<S, EngineError> {
        if self.shape != other.shape {
            return Err(EngineError::dim(
                "linf_distance",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    /// Convert element type (used by the f64 verification mode).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Named trainable tensor inside a model.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        Parameter { name: name.into(), tensor: tensor.with_grad(true) }
    }
}
