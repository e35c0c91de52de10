//! Adam with an optional geometric learning-rate decay.

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One descent step with learning rate `lr_scale * learning_rate`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr_scale: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.learning_rate * lr_scale;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / b1t) / ((*v / b2t).sqrt() + self.epsilon);
        }
    }
}

/// Multiplier at step `t` of `total` decaying geometrically from 1 to `final_fraction`.
pub fn geometric_decay(t: usize, total: usize, final_fraction: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    final_fraction.powf(t as f64 / (total - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for t in 0..3000 {
            let g = vec![2.0 * (p[0] - 1.0), 20.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g, geometric_decay(t, 3000, 0.01));
        }
        assert!((p[0] - 1.0).abs() < 1e-4 && (p[1] + 0.5).abs() < 1e-4, "{p:?}");
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(geometric_decay(0, 10, 0.1), 1.0);
        assert!((geometric_decay(9, 10, 0.1) - 0.1).abs() < 1e-15);
    }
}
