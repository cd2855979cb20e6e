use super::scalar::Scalar;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step = T::c(lr / (1.0 - self.beta1.powi(self.t)));
        let corr2 = T::c(1.0 / (1.0 - self.beta2.powi(self.t)));
        let eps = T::c(self.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p -= step * *m / ((*v * corr2).sqrt() + eps);
        }
    }
}
