//! Adam with bias correction. Moment buffers mirror parameter shapes; the
//! effective learning rate is supplied per step so schedules live with the
//! caller.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<F> {
    hyper: AdamHyper,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(shapes: &[&[usize]], hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    /// Rebuilds optimizer state from checkpointed moments.
    pub fn from_state(hyper: AdamHyper, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>, step: u64) -> Self {
        assert_eq!(m.len(), v.len(), "moment lists disagree");
        Adam { hyper, m, v, step }
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// One update over all parameters with the given effective learning rate.
    /// Gradients may be None for parameters the loss did not reach; their
    /// moments still decay and bias correction still advances.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "param count changed");
        assert_eq!(params.len(), grads.len(), "grad count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let zero_grad;
            let g = match &grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), p.shape(), "grad shape mismatch at param {i}");
                    g
                }
                None => {
                    zero_grad = Tensor::zeros(p.shape());
                    &zero_grad
                }
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gv.f64();
                let mf = b1 * mv.f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.f64() + (1.0 - b2) * gf * gf;
                *mv = F::c(mf);
                *vv = F::c(vf);
                let mhat = mf / bias1;
                let vhat = vf / bias2;
                *pv = F::c(pv.f64() - lr * mhat / (vhat.sqrt() + self.hyper.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::<f32>::filled(&[3], 2.0)];
        let mut adam = Adam::new(&[&[3]], AdamHyper::default());
        adam.step(&mut params, &[None], 0.1);
        assert_eq!(params[0], Tensor::filled(&[3], 2.0));
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // hand-computed: m=0.1, v=0.001, mhat=1, vhat=1, delta = lr/(1+eps)
        let mut params = vec![Tensor::<f32>::filled(&[1], 1.0)];
        let grads = vec![Some(Tensor::filled(&[1], 1.0))];
        let mut adam = Adam::new(&[&[1]], AdamHyper::default());
        adam.step(&mut params, &grads, 0.1);
        let got = params[0].data()[0];
        assert!((got - 0.9).abs() < 1e-6, "expected ~0.9, got {got}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // descend f(w) = w^2 from w=1; gradient 2w
        let mut params = vec![Tensor::<f32>::filled(&[1], 1.0)];
        let mut adam = Adam::new(&[&[1]], AdamHyper::default());
        for _ in 0..200 {
            let w = params[0].data()[0];
            let grads = vec![Some(Tensor::filled(&[1], 2.0 * w))];
            adam.step(&mut params, &grads, 0.05);
        }
        assert!(params[0].data()[0].abs() < 0.1);
    }
}
