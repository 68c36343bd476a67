use diffcore::{DTensor, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-15;

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f64> {
    pub steps: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            steps: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One bias-corrected update of every parameter with its own rate.
    pub fn step(&mut self, params: &mut [&mut DTensor<T>], grads: &[Vec<T>], rates: &[f64]) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        self.steps += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let one = T::one();
        let c1 = one - b1.powi(self.steps as i32);
        let c2 = one - b2.powi(self.steps as i32);
        let eps = T::lit(EPS);
        for (k, p) in params.iter_mut().enumerate() {
            let lr = T::lit(rates[k]);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
