//! SGD with momentum, weight decay and a cosine learning-rate schedule.

use super::VisitParams;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
}

impl Sgd {
    pub fn new(lr_max: f64, lr_min: f64, momentum: f64, weight_decay: f64, total_epochs: usize) -> Self {
        Sgd { lr_max, lr_min, momentum, weight_decay, total_epochs }
    }

    /// Cosine decay from `lr_max` (epoch 0) to exactly `lr_min` (final epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.total_epochs <= 1 {
            return self.lr_max;
        }
        let last = self.total_epochs - 1;
        if epoch >= last {
            return self.lr_min;
        }
        let t = epoch as f64 / last as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// One update from the accumulated gradients:
    /// `v = momentum*v + g + wd*w; w -= lr*v`.
    pub fn step<N: VisitParams + ?Sized>(&self, net: &mut N, lr: f64) {
        let momentum = self.momentum;
        let wd = self.weight_decay;
        net.visit("", &mut |_, p| {
            if p.buffer {
                return;
            }
            let decay = if p.decay { wd } else { 0.0 };
            ndarray::Zip::from(&mut p.momentum)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &w| {
                    *v = momentum * *v + g + decay * w;
                });
            ndarray::Zip::from(&mut p.value).and(&p.momentum).for_each(|w, &v| {
                *w -= lr * v;
            });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, VisitParams};
    use ndarray::{ArrayD, IxDyn};

    struct One {
        p: Param,
    }

    impl VisitParams for One {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f(format!("{prefix}.p"), &mut self.p);
        }
    }

    #[test]
    fn momentum_update_matches_manual() {
        let mut net = One { p: Param::new(ArrayD::from_elem(IxDyn(&[1]), 1.0)) };
        net.p.decay = false;
        let sgd = Sgd::new(0.1, 0.0, 0.9, 0.0, 10);
        // two steps with constant gradient 1.0
        net.p.grad.fill(1.0);
        sgd.step(&mut net, 0.1);
        assert!((net.p.value[0] - 0.9).abs() < 1e-15); // v=1, w=1-0.1
        net.p.grad.fill(1.0);
        sgd.step(&mut net, 0.1);
        // v = 0.9*1 + 1 = 1.9, w = 0.9 - 0.19
        assert!((net.p.value[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut net = One { p: Param::new(ArrayD::from_elem(IxDyn(&[1]), 2.0)) };
        let sgd = Sgd::new(0.1, 0.0, 0.0, 0.5, 10);
        net.p.grad.fill(0.0);
        sgd.step(&mut net, 0.1);
        assert!((net.p.value[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let sgd = Sgd::new(1e-3, 1e-4, 0.9, 0.0, 100);
        assert!((sgd.lr_at(0) - 1e-3).abs() < 1e-15);
        assert!((sgd.lr_at(99) - 1e-4).abs() < 1e-12);
        assert!((sgd.lr_at(200) - 1e-4).abs() < 1e-15);
        // halfway sits between the extremes
        let mid = sgd.lr_at(50);
        assert!(mid < 1e-3 && mid > 1e-4);
        // monotone decreasing
        for e in 1..100 {
            assert!(sgd.lr_at(e) <= sgd.lr_at(e - 1) + 1e-15);
        }
    }
}
