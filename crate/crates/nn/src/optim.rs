use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies one update to every non-frozen network and clears gradients.
    /// The networks must be passed in the same order on every call.
    pub fn step(&mut self, nets: &mut [&mut Network<T>]) {
        if self.velocity.len() < nets.len() {
            self.velocity.resize_with(nets.len(), Vec::new);
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for (net, vel) in nets.iter_mut().zip(self.velocity.iter_mut()) {
            if net.is_frozen() {
                continue;
            }
            let mut i = 0;
            net.visit_params_mut(&mut |_, p| {
                if vel.len() <= i {
                    vel.push(Tensor::zeros(p.value.shape()));
                }
                let v = vel[i].data_mut();
                for ((w, g), vv) in p.value.data_mut().iter_mut().zip(p.grad.data_mut()).zip(v) {
                    let d = *g + wd * *w;
                    *vv = mu * *vv + d;
                    *w -= lr * *vv;
                    *g = T::zero();
                }
                i += 1;
            });
        }
    }
}

/// Adam with L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    t: i32,
    moments: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::zero(),
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, nets: &mut [&mut Network<T>]) {
        if self.moments.len() < nets.len() {
            self.moments.resize_with(nets.len(), Vec::new);
        }
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        for (net, mom) in nets.iter_mut().zip(self.moments.iter_mut()) {
            if net.is_frozen() {
                continue;
            }
            let mut i = 0;
            net.visit_params_mut(&mut |_, p| {
                if mom.len() <= i {
                    mom.push((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
                }
                let (m, v) = &mut mom[i];
                for (((w, g), mm), vv) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data_mut())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let d = *g + wd * *w;
                    *mm = b1 * *mm + (T::one() - b1) * d;
                    *vv = b2 * *vv + (T::one() - b2) * d * d;
                    *w -= step * *mm / (vv.sqrt() + eps);
                    *g = T::zero();
                }
                i += 1;
            });
        }
    }
}

/// Half-cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr<T: Scalar>(base: T, step: usize, total: usize) -> T {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * T::lit(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Layer, Linear, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic_descent(mut step: impl FnMut(&mut Network<f64>)) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new("lin", vec![Layer::Linear(Linear::<f64>::new(2, 1, &mut rng))]);
        let x = Tensor::from_f64(&[4, 2], &[1., 0., 0., 1., 1., 1., -1., 2.]).unwrap();
        let target = Tensor::from_f64(&[4, 1], &[3., -1., 2., -5.]).unwrap();
        let mut loss = 0.0;
        for _ in 0..500 {
            let (y, tape) = net.forward(&x, Mode::Train).unwrap();
            let diff = y.sub(&target).unwrap();
            loss = diff.sq_norm() / 4.0;
            let mut g = diff;
            g.scale(0.5);
            net.backward(&tape, &g).unwrap();
            step(&mut net);
        }
        loss
    }

    #[test]
    fn sgd_and_adam_fit_a_linear_target() {
        let mut sgd = Sgd::new(0.05, 0.9, 0.0);
        assert!(quadratic_descent(|n| sgd.step(&mut [n])) < 1e-6);
        let mut adam = Adam::new(0.05);
        assert!(quadratic_descent(|n| adam.step(&mut [n])) < 1e-4);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0f64, 0, 10), 1.0);
        assert!(cosine_lr(1.0f64, 10, 10).abs() < 1e-12);
        assert!((cosine_lr(1.0f64, 5, 10) - 0.5).abs() < 1e-12);
    }
}
