use ndarray::{ArrayD, Zip};

use super::params::Params;
use super::scalar::Scalar;

/// Adam with bias correction. Moments are stored tensor-by-tensor in the
/// parameter enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub first: Vec<ArrayD<F>>,
    pub second: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new<P: Params<F>>(params: &P, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<ArrayD<F>> = params
            .named_tensors("")
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step<P: Params<F>>(&mut self, params: &mut P, grads: &P) {
        self.steps += 1;
        if self.learning_rate == 0.0 {
            return;
        }
        let t = self.steps as i32;
        let lr = F::of(self.learning_rate);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        let eps = F::of(self.eps);
        let one = F::one();
        let grads = grads.named_tensors("");
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            Zip::from(p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
