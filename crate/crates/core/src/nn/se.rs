//! Squeeze-and-excitation channel gating.

use ndarray::{Array2, Array5, Axis};
use rand_chacha::ChaCha8Rng;

use super::linear::{relu, relu_backward, Linear};
use super::pool::{global_avg_pool, global_avg_pool_backward};
use super::{sigmoid, Param, VisitParams};

#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

#[derive(Debug)]
pub struct SeCache {
    squeezed: Array2<f64>,
    hidden: Array2<f64>,
    gate: Array2<f64>,
}

impl SeBlock {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> Self {
        let mid = (channels / reduction).max(1);
        SeBlock {
            fc1: Linear::new(rng, channels, mid),
            fc2: Linear::new(rng, mid, channels),
            channels,
        }
    }

    pub fn forward(&self, x: &Array5<f64>) -> (Array5<f64>, SeCache) {
        let squeezed = global_avg_pool(x);
        let hidden = relu(&self.fc1.forward(&squeezed));
        let gate = self.fc2.forward(&hidden).mapv(sigmoid);
        let mut y = x.clone();
        let (n, c, _, _, _) = x.dim();
        for i in 0..n {
            for ch in 0..c {
                let g = gate[[i, ch]];
                y.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * g);
            }
        }
        (y, SeCache { squeezed, hidden, gate })
    }

    pub fn backward(&mut self, x: &Array5<f64>, cache: &SeCache, dy: &Array5<f64>) -> Array5<f64> {
        let (n, c, _, _, _) = x.dim();
        // direct path: y = x * gate
        let mut dx = dy.clone();
        let mut dgate = Array2::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let g = cache.gate[[i, ch]];
                let xc = x.index_axis(Axis(0), i);
                let xc = xc.index_axis(Axis(0), ch);
                let dyc = dy.index_axis(Axis(0), i);
                let dyc = dyc.index_axis(Axis(0), ch);
                dgate[[i, ch]] = xc.iter().zip(dyc.iter()).map(|(a, b)| a * b).sum();
                dx.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * g);
            }
        }
        // gate path: sigmoid -> fc2 -> relu -> fc1 -> gap
        let dpre2 = &dgate * &cache.gate.mapv(|g| g * (1.0 - g));
        let dhidden = self.fc2.backward(&cache.hidden, &dpre2);
        let dhidden = relu_backward(&cache.hidden, &dhidden);
        let dsqueezed = self.fc1.backward(&cache.squeezed, &dhidden);
        let dx_gap = global_avg_pool_backward(&dsqueezed, x.dim());
        dx + dx_gap
    }
}

impl VisitParams for SeBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}
