use crate::designer::DesignerParams;

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: DesignerParams,
    v: DesignerParams,
    t: i32,
}

impl Adam {
    pub fn new(like: &DesignerParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `params ← params − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut DesignerParams, grad: &DesignerParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grad.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut());
        for (((p, g), m), v) in blocks {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}
