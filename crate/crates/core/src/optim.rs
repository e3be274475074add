//! Adam with optional decoupled weight decay (AdamW), shared by every trainer.

use ndarray::{ArrayViewD, ArrayViewMutD, Zip};

use crate::scalar::Scalar;

/// A collection of parameter tensors visited in a fixed order. Gradient
/// buffers use the same type as the parameters they belong to.
pub trait ParamSet<T: Scalar>: Clone {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn fill_zero(&mut self) {
        for mut t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    fn scale(&mut self, s: T) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) {
        let c = self.config;
        self.step += 1;
        let lr = T::of(c.lr);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.eps);
        let decay = T::of(c.lr * c.weight_decay);
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);

        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "parameter/gradient shape");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut k = 0;
            Zip::from(p).and(g).for_each(|p, &g| {
                if c.weight_decay > 0.0 {
                    *p -= decay * *p;
                }
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, IxDyn};

    #[derive(Clone)]
    struct One(Array1<f64>);

    impl ParamSet<f64> for One {
        fn tensors(&self) -> Vec<ArrayViewD<'_, f64>> {
            vec![self.0.view().into_dyn()]
        }
        fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
            vec![self.0.view_mut().into_dyn()]
        }
    }

    #[test]
    fn first_step_closed_form() {
        for &(g, lr) in &[(1.0, 1e-3), (-0.25, 0.1), (3e-4, 5e-5), (10.0, 1.0)] {
            let mut p = One(Array1::from_elem(1, 0.5));
            let grads = One(Array1::from_elem(1, g));
            let mut opt = Adam::new(AdamConfig::new(lr, 0.0));
            opt.step(&mut p, &grads);
            // m = 0.1 g, v = 0.001 g^2, bias-corrected to g and g^2.
            let m = 0.1 * g;
            let v = 0.001 * g * g;
            let expected = 0.5 - lr * (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999)).sqrt() + 1e-8);
            assert!((p.0[0] - expected).abs() < 1e-12, "g={g} lr={lr}");
        }
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        let mut p = One(Array1::zeros(1));
        let mut opt = Adam::new(AdamConfig::new(0.01, 0.0));
        opt.step(&mut p, &One(Array1::ones(1)));
        assert!((p.0[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = One(Array1::from_elem(1, 2.0));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.5));
        opt.step(&mut p, &One(Array1::zeros(1)));
        assert!((p.0[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn param_set_helpers() {
        let p = One(Array1::from_vec(vec![1.0, f64::NAN]));
        assert!(!p.all_finite());
        let mut z = p.zeros_like();
        assert_eq!(z.num_params(), 2);
        assert!(z.tensors()[0].iter().all(|&v| v == 0.0));
        z.0.fill(2.0);
        z.scale(0.5);
        assert_eq!(z.tensors()[0][IxDyn(&[1])], 1.0);
    }
}
