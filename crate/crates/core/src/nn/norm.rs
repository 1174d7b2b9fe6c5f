//! Batch normalisation over 3D feature maps.

use ndarray::{Array1, Array5, ArrayD, Axis, IxDyn};

use super::{Param, VisitParams};

const EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub channels: usize,
}

/// Per-forward state the backward pass needs.
#[derive(Debug)]
pub struct BnCache {
    x_hat: Array5<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Param::no_decay(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::no_decay(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            channels,
        }
    }

    /// Training forward: normalise with batch statistics, update running ones.
    pub fn forward_train(&mut self, x: &Array5<f64>) -> (Array5<f64>, BnCache) {
        let (n, c, d, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let count = (n * d * h * w) as f64;
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let lane = x.index_axis(Axis(1), ch);
            let mean = lane.sum() / count;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = istd;
            x_hat
                .index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * istd);
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - RUNNING_MOMENTUM) * *rm + RUNNING_MOMENTUM * mean;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - RUNNING_MOMENTUM) * *rv + RUNNING_MOMENTUM * var;
        }
        let mut y = x_hat.clone();
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let b = self.beta.value[ch];
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + b);
        }
        (y, BnCache { x_hat, inv_std })
    }

    /// Inference forward using running statistics.
    pub fn forward_eval(&self, x: &Array5<f64>) -> Array5<f64> {
        let (_, c, _, _, _) = x.dim();
        assert_eq!(c, self.channels);
        let mut y = x.clone();
        for ch in 0..c {
            let mean = self.running_mean.value[ch];
            let istd = 1.0 / (self.running_var.value[ch] + EPS).sqrt();
            let g = self.gamma.value[ch];
            let b = self.beta.value[ch];
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * istd * g + b);
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Array5<f64>) -> Array5<f64> {
        let (n, c, d, h, w) = dy.dim();
        let count = (n * d * h * w) as f64;
        let mut dx = Array5::zeros((n, c, d, h, w));
        for ch in 0..c {
            let dy_c = dy.index_axis(Axis(1), ch);
            let xh_c = cache.x_hat.index_axis(Axis(1), ch);
            let dgamma: f64 = dy_c.iter().zip(xh_c.iter()).map(|(a, b)| a * b).sum();
            let dbeta: f64 = dy_c.sum();
            self.gamma.grad[ch] += dgamma;
            self.beta.grad[ch] += dbeta;
            let g = self.gamma.value[ch];
            let istd = cache.inv_std[ch];
            // dx = g*istd/count * (count*dy - dbeta - x_hat*dgamma)
            let scale = g * istd / count;
            let mut dx_c = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dx_c)
                .and(&dy_c)
                .and(&xh_c)
                .for_each(|o, &dyv, &xhv| {
                    *o = scale * (count * dyv - dbeta - xhv * dgamma);
                });
        }
        dx
    }
}

impl VisitParams for BatchNorm3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}
