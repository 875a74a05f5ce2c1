//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation whose operands require gradients and
//! replays them in exact reverse order on [`Graph::backward`], so gradients
//! are deterministic. Training runs the graph in `f32`; gradient checking
//! instantiates the same code in `f64`.

pub mod adam;
pub mod gradcheck;
mod graph;
mod kernels;

pub use adam::{adam_step, AdamHyper, AdamState, StepOutcome};
pub use gradcheck::{grad_check, grad_check_leaves, GradCheckReport};
pub use graph::{Graph, RopeTables, VarId};

/// Plain tensor payload detached from any graph: row-major data plus shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: crate::Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![T::zero(); n] }
    }

    pub fn scalar(v: T) -> Self {
        TensorData { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map_to<U: crate::Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}
