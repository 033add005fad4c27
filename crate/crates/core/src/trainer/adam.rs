//! Adam with bias correction.

use crate::tensor::Tensor;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// One moment pair per parameter; `sizes` fixes the parameter order.
    pub fn new(lr: f64, beta1: f64, beta2: f64, sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            slots: sizes
                .iter()
                .map(|&n| Slot { m: vec![0.0; n], v: vec![0.0; n] })
                .collect(),
        }
    }

    /// Advance the shared step counter; call once before updating the
    /// parameters of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply the update for parameter `slot` in place. A zero gradient entry
    /// whose moments are still zero leaves the value bitwise untouched, which
    /// is what keeps frozen factors immutable.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &[f64]) {
        let s = &mut self.slots[slot];
        assert_eq!(param.numel(), grad.len());
        assert_eq!(s.m.len(), grad.len());
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let data = param.make_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = s.m[i] / bc1;
            let v_hat = s.v[i] / bc2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
