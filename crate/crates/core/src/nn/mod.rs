//! Minimal neural-net substrate: the handful of layers the detector and
//! classifier need, each with an explicit forward and backward pass.
//!
//! There is no autodiff tape. Every layer caches what its backward pass
//! needs and the network structs wire the chains by hand, which keeps the
//! arithmetic inspectable and makes training bit-for-bit reproducible:
//! everything runs single-threaded in f64 with fixed reduction orders,
//! and all randomness flows from explicitly seeded generators.
//! Convolutions are lowered to im2col plus a GEMM.

pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod lstm;
pub mod norm;
pub mod pool;
pub mod se;
pub mod sgd;

pub use blocks::{ConvBlock, ConvBlockCache, EncoderStage, EncoderStageCache};
pub use checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::Conv3d;
pub use linear::{relu, relu_backward, Linear};
pub use loss::{focal_loss, focal_term, smooth_l1, softmax_cross_entropy, softmax_rows};
pub use lstm::Lstm;
pub use norm::BatchNorm3d;
pub use pool::{
    avg_pool3, avg_pool3_backward, global_avg_pool, global_avg_pool_backward, upsample2x,
    upsample2x_backward,
};
pub use se::SeBlock;
pub use sgd::Sgd;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One tensor of a network: value, gradient and momentum state.
///
/// Buffers (batch-norm running statistics) participate in checkpoints but
/// are skipped by the optimiser.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub momentum: ArrayD<f64>,
    /// Apply weight decay (off for biases and norm scales).
    pub decay: bool,
    /// Not trainable; carried along for checkpointing only.
    pub buffer: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let momentum = ArrayD::zeros(value.raw_dim());
        Param { value, grad, momentum, decay: true, buffer: false }
    }

    pub fn no_decay(value: ArrayD<f64>) -> Self {
        let mut p = Param::new(value);
        p.decay = false;
        p
    }

    pub fn buffer(value: ArrayD<f64>) -> Self {
        let mut p = Param::new(value);
        p.decay = false;
        p.buffer = true;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Networks expose their parameters by name through this visitor, which
/// the optimiser, the checkpoint writer and the gradient checker share.
pub trait VisitParams {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn zero_grads(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if !p.buffer {
                n += p.value.len();
            }
        });
        n
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Clones every visited parameter value (weights and buffers alike), in
/// visit order.
pub fn snapshot_params<N: VisitParams + ?Sized>(net: &mut N) -> Vec<ArrayD<f64>> {
    let mut snap = Vec::new();
    net.visit("", &mut |_, p| snap.push(p.value.clone()));
    snap
}

/// Writes a snapshot back; the visit order must match the one that took it.
pub fn restore_params<N: VisitParams + ?Sized>(net: &mut N, snap: &[ArrayD<f64>]) {
    let mut i = 0;
    net.visit("", &mut |_, p| {
        p.value.assign(&snap[i]);
        i += 1;
    });
    assert_eq!(i, snap.len(), "parameter count changed between snapshot and restore");
}

/// Deterministic generator for a (seed, stream) pair. Every component of
/// the pipeline draws from its own stream so that adding randomness to one
/// stage never perturbs another.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// He-normal initialisation for tensors feeding ReLUs.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * sd;
    }
    out
}

/// Uniform Xavier/Glorot initialisation.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    out
}
