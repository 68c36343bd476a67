use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::DTensor;

#[derive(Debug)]
struct SumRule<T> {
    factor: T,
}

impl<T: Scalar> Backward<T> for SumRule<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0] * self.factor; inputs[0].numel()])]
    }
}

impl<T: Scalar> Tape<T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(DTensor::scalar(total), vec![x], Box::new(SumRule { factor: T::one() }))
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.data(x).len().max(1) as f64);
        let total: T = self.data(x).iter().copied().sum();
        self.push(DTensor::scalar(total / n), vec![x], Box::new(SumRule { factor: T::one() / n }))
    }
}
