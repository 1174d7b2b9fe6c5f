//! Directional finite-difference checking of backward passes.

use rand_distr::{Distribution, StandardNormal};

use super::{stream_rng, VisitParams};

/// Compare the analytic gradient of `loss` against central finite
/// differences along `n_dirs` random unit directions in parameter space.
/// Returns the worst relative error.
///
/// The closure must run a full forward/backward when `grads` is true
/// (gradients freshly accumulated on the network) and may skip the
/// backward pass otherwise. Buffers are never perturbed.
pub fn max_directional_rel_err<N, L>(net: &mut N, mut loss: L, seed: u64, n_dirs: usize, h: f64) -> f64
where
    N: VisitParams,
    L: FnMut(&mut N, bool) -> f64,
{
    net.zero_grads();
    let _ = loss(net, true);
    let mut grad_flat = Vec::new();
    net.visit("", &mut |_, p| {
        if !p.buffer {
            grad_flat.extend(p.grad.iter().cloned());
        }
    });
    let dim = grad_flat.len();
    let mut rng = stream_rng(seed, 77);
    let mut worst: f64 = 0.0;
    for _ in 0..n_dirs {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut dir {
            *v /= norm;
        }
        let analytic: f64 = grad_flat.iter().zip(&dir).map(|(g, d)| g * d).sum();

        let shift = |net: &mut N, scale: f64, dir: &[f64]| {
            let mut k = 0;
            net.visit("", &mut |_, p| {
                if p.buffer {
                    return;
                }
                for v in p.value.iter_mut() {
                    *v += scale * dir[k];
                    k += 1;
                }
            });
        };
        shift(net, h, &dir);
        let l_plus = loss(net, false);
        shift(net, -2.0 * h, &dir);
        let l_minus = loss(net, false);
        shift(net, h, &dir);

        let fd = (l_plus - l_minus) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}
