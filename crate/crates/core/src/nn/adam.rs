//! Adam with bias correction, operating on the fixed-order tensor lists the
//! networks expose. One optimizer instance per network; it never sees the
//! parameters of any other network.

use ndarray::{ArrayD, ArrayViewMutD};

use super::nets::Grads;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    /// Moment buffers sized from the parameter shapes.
    pub fn new(lr: f64, beta1: f64, beta2: f64, shapes: &[Vec<usize>]) -> Self {
        let m = shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect();
        let v = shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// Convenience constructor from a network's current tensors.
    pub fn for_params(lr: f64, beta1: f64, beta2: f64, params: &[(String, ndarray::ArrayViewD<'_, f64>)]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
        Self::new(lr, beta1, beta2, &shapes)
    }

    /// Number of scalar parameters this optimizer tracks state for.
    pub fn tracked_parameter_count(&self) -> usize {
        self.m.iter().map(|t| t.len()).sum()
    }

    pub fn step(&mut self, mut params: Vec<(String, ArrayViewMutD<'_, f64>)>, grads: &Grads) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GeneratorArch, ParamTensors, ResnetGenerator};
    use crate::util::derive_rng;
    use ndarray::Array4;
    use rand::Rng;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize ||G(x) - target||^2 over a tiny generator; Adam should
        // reduce the loss substantially in a few hundred steps.
        let mut rng = derive_rng(1, "adam-test");
        let mut g = ResnetGenerator::new(GeneratorArch { width: 3, blocks: 1 }, &mut rng);
        let x = Array4::from_shape_fn((2, 1, 6, 6), |_| rng.random_range(-1.0..1.0));
        let target = x.mapv(|v: f64| (0.8 * v).tanh());
        let mut opt = Adam::for_params(2e-3, 0.5, 0.999, &g.tensors());
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..300 {
            let (y, cache) = g.forward(&x);
            let diff = &y - &target;
            let loss: f64 = diff.iter().map(|d| d * d).sum();
            let gy = diff * 2.0;
            let (_, grads) = g.backward(&cache, &gy);
            opt.step(g.tensors_mut(), &grads);
            first.get_or_insert(loss);
            last = loss;
        }
        let first = first.unwrap();
        assert!(
            last < 0.1 * first,
            "Adam failed to optimize: first={first}, last={last}"
        );
    }

    #[test]
    fn tracked_count_matches_network() {
        let mut rng = derive_rng(2, "adam-test");
        let g = ResnetGenerator::new(GeneratorArch { width: 4, blocks: 2 }, &mut rng);
        let opt = Adam::for_params(1e-3, 0.9, 0.999, &g.tensors());
        assert_eq!(opt.tracked_parameter_count(), g.param_count());
    }
}
