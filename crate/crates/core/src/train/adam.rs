use ndarray::{Array2, Zip};

use crate::backend::AdapterGrad;
use crate::train::lora::LoraAdapter;

/// Adam with constant learning rate and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: Vec<[(Array2<f64>, Array2<f64>); 2]>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    fn update(&self, param: &mut Array2<f64>, grad: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        Zip::from(param)
            .and(grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
    }

    /// One update of every adapter from its gradient, in matching order.
    pub fn step<'a>(
        &mut self,
        adapters: impl IntoIterator<Item = &'a mut LoraAdapter>,
        grads: impl IntoIterator<Item = &'a AdapterGrad>,
    ) {
        self.step += 1;
        let mut moments = std::mem::take(&mut self.moments);
        for (k, (ad, g)) in adapters.into_iter().zip(grads).enumerate() {
            if moments.len() <= k {
                moments.push([
                    (Array2::zeros(ad.a.dim()), Array2::zeros(ad.a.dim())),
                    (Array2::zeros(ad.b.dim()), Array2::zeros(ad.b.dim())),
                ]);
            }
            let [(ma, va), (mb, vb)] = &mut moments[k];
            self.update(&mut ad.a, &g.a, ma, va);
            self.update(&mut ad.b, &g.b, mb, vb);
        }
        self.moments = moments;
    }
}
