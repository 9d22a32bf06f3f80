use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, clip_norm: Option<f64>) -> Self {
        let n = params.count();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> f64 {
        let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut k = 0;
        for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
            for (w, &gv) in p.data.iter_mut().zip(&g.data) {
                let gv = gv * scale;
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gv;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gv * gv;
                let mh = self.m[k] / bc1;
                let vh = self.v[k] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
                k += 1;
            }
        }
        norm
    }
}
