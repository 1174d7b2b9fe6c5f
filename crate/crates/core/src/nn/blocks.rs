//! Reusable 3-D convolutional building blocks shared by the detector and
//! classifier backbones: a conv→batch-norm→ReLU unit and a residual,
//! squeeze-and-excitation encoder stage.
//!
//! Memory discipline: training caches hold each activation tensor exactly
//! once.  `forward_train` takes its input by value and stores it for the
//! convolution backward; ReLU masks are kept as byte vectors rather than
//! full float tensors.

use ndarray::Array5;
use rand_chacha::ChaCha8Rng;

use super::conv::Conv3d;
use super::linear::{relu, relu_backward};
use super::norm::{BatchNorm3d, BnCache};
use super::se::{SeBlock, SeCache};
use super::{Param, VisitParams};

/// Conv3d → BatchNorm3d → (optional) ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    apply_relu: bool,
}

/// Per-forward state a [`ConvBlock`] backward pass needs.
#[derive(Debug)]
pub struct ConvBlockCache {
    x: Array5<f64>,
    bn: BnCache,
    /// ReLU activity mask in logical (row-major) iteration order; empty when
    /// the block has no ReLU.
    mask: Vec<bool>,
}

impl ConvBlock {
    /// Standard block with a trailing ReLU.
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv3d::new(rng, cin, cout, kernel, stride, pad),
            bn: BatchNorm3d::new(cout),
            apply_relu: true,
        }
    }

    /// Block without the trailing ReLU (e.g. the second conv of a residual
    /// pair, activated only after the skip addition).
    pub fn linear(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvBlock { apply_relu: false, ..ConvBlock::new(rng, cin, cout, kernel, stride, pad) }
    }

    /// Spatial output size along one axis.
    pub fn out_dim(&self, d: usize) -> usize {
        self.conv.out_dim(d)
    }

    /// Training-mode forward.  Consumes `x`, which the cache retains for the
    /// convolution backward.
    pub fn forward_train(&mut self, x: Array5<f64>) -> (Array5<f64>, ConvBlockCache) {
        let c = self.conv.forward(&x);
        let (b, bn) = self.bn.forward_train(&c);
        if self.apply_relu {
            let y = relu(&b);
            let mask = y.iter().map(|&v| v > 0.0).collect();
            (y, ConvBlockCache { x, bn, mask })
        } else {
            (b, ConvBlockCache { x, bn, mask: Vec::new() })
        }
    }

    /// Inference-mode forward (running batch-norm statistics, no cache).
    pub fn forward_eval(&self, x: &Array5<f64>) -> Array5<f64> {
        let b = self.bn.forward_eval(&self.conv.forward(x));
        if self.apply_relu {
            relu(&b)
        } else {
            b
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvBlockCache, dy: &Array5<f64>) -> Array5<f64> {
        let db = if self.apply_relu {
            let mut d = dy.clone();
            for (v, &m) in d.iter_mut().zip(cache.mask.iter()) {
                if !m {
                    *v = 0.0;
                }
            }
            d
        } else {
            dy.clone()
        };
        let dc = self.bn.backward(&cache.bn, &db);
        self.conv.backward(&cache.x, &dc)
    }
}

impl VisitParams for ConvBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

/// One encoder stage: a stride-2 downsampling ConvBlock followed by a
/// residual pair (conv→bn→relu, conv→bn) whose output is added back to the
/// downsampled tensor, re-activated, and channel-gated by squeeze-and-
/// excitation.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    down: ConvBlock,
    conv1: ConvBlock,
    conv2: ConvBlock,
    se: SeBlock,
}

/// Per-forward state an [`EncoderStage`] backward pass needs.
#[derive(Debug)]
pub struct EncoderStageCache {
    down: ConvBlockCache,
    conv1: ConvBlockCache,
    conv2: ConvBlockCache,
    /// Post-activation residual sum; input (and ReLU mask) of the SE gate.
    sum: Array5<f64>,
    se: SeCache,
}

impl EncoderStage {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, se_reduction: usize) -> Self {
        EncoderStage {
            down: ConvBlock::new(rng, cin, cout, 3, 2, 1),
            conv1: ConvBlock::new(rng, cout, cout, 3, 1, 1),
            conv2: ConvBlock::linear(rng, cout, cout, 3, 1, 1),
            se: SeBlock::new(rng, cout, se_reduction),
        }
    }

    pub fn forward_train(&mut self, x: Array5<f64>) -> (Array5<f64>, EncoderStageCache) {
        let (d, c_down) = self.down.forward_train(x);
        let (h, c1) = self.conv1.forward_train(d.clone());
        let (h2, c2) = self.conv2.forward_train(h);
        let sum = relu(&(h2 + &d));
        let (y, c_se) = self.se.forward(&sum);
        (y, EncoderStageCache { down: c_down, conv1: c1, conv2: c2, sum, se: c_se })
    }

    pub fn forward_eval(&self, x: &Array5<f64>) -> Array5<f64> {
        let d = self.down.forward_eval(x);
        let h2 = self.conv2.forward_eval(&self.conv1.forward_eval(&d));
        let sum = relu(&(h2 + &d));
        self.se.forward(&sum).0
    }

    pub fn backward(&mut self, cache: &EncoderStageCache, dy: &Array5<f64>) -> Array5<f64> {
        let ds = self.se.backward(&cache.sum, &cache.se, dy);
        let ds = relu_backward(&cache.sum, &ds);
        let dh = self.conv2.backward(&cache.conv2, &ds);
        let dd = self.conv1.backward(&cache.conv1, &dh) + ds;
        self.down.backward(&cache.down, &dd)
    }
}

impl VisitParams for EncoderStage {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.down.visit(&format!("{prefix}.down"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.se.visit(&format!("{prefix}.se"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_directional_rel_err;
    use crate::nn::stream_rng;
    use ndarray::Array5;
    use rand::Rng;

    fn rand_input(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        let mut x = Array5::zeros(dim);
        x.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        x
    }

    #[test]
    fn conv_block_shapes_and_eval_consistency() {
        let mut rng = stream_rng(7, 0);
        let mut blk = ConvBlock::new(&mut rng, 2, 4, 3, 2, 1);
        let x = rand_input(&mut rng, (1, 2, 8, 8, 8));
        let (y, _) = blk.forward_train(x.clone());
        assert_eq!(y.dim(), (1, 4, 4, 4, 4));
        assert!(y.iter().all(|&v| v >= 0.0));
        let e = blk.forward_eval(&x);
        assert_eq!(e.dim(), (1, 4, 4, 4, 4));
    }

    #[test]
    fn encoder_stage_halves_resolution() {
        let mut rng = stream_rng(8, 0);
        let mut stage = EncoderStage::new(&mut rng, 3, 6, 4);
        let x = rand_input(&mut rng, (2, 3, 8, 8, 8));
        let (y, _) = stage.forward_train(x.clone());
        assert_eq!(y.dim(), (2, 6, 4, 4, 4));
        assert_eq!(stage.forward_eval(&x).dim(), (2, 6, 4, 4, 4));
    }

    struct Tiny {
        stage: EncoderStage,
    }

    impl VisitParams for Tiny {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            self.stage.visit(&format!("{prefix}.stage"), f);
        }
    }

    #[test]
    fn encoder_stage_gradients_match_finite_differences() {
        let mut rng = stream_rng(9, 0);
        let mut net = Tiny { stage: EncoderStage::new(&mut rng, 1, 2, 2) };
        let x = rand_input(&mut rng, (2, 1, 6, 6, 6));
        let err = max_directional_rel_err(
            &mut net,
            |net, grads| {
                let (y, cache) = net.stage.forward_train(x.clone());
                let loss = y.mapv(|v| v * v).sum() / y.len() as f64;
                if grads {
                    let dy = y.mapv(|v| 2.0 * v / y.len() as f64);
                    net.stage.backward(&cache, &dy);
                }
                loss
            },
            11,
            4,
            1e-5,
        );
        assert!(err < 1e-5, "directional gradient error {err}");
    }
}
