//! Loss functions: focal, smooth-L1 and softmax cross-entropy.
//!
//! Every function returns the scalar loss together with the gradient with
//! respect to its raw inputs, with the batch normalisation (1/N) already
//! folded in.

use ndarray::{Array1, Array2};

/// log(sigmoid(x)) computed without overflow.
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

use super::sigmoid;

/// One focal term from a probability: `-alpha * (1 - p_t)^gamma * ln(p_t)`
/// with `p_t = p` for positives and `1 - p` for negatives. `alpha`
/// multiplies both classes uniformly, so `gamma = 0, alpha = 1` is exactly
/// binary cross-entropy.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p_t = if positive { p } else { 1.0 - p };
    let p_t = p_t.clamp(1e-300, 1.0);
    -alpha * (1.0 - p_t).powf(gamma) * p_t.ln()
}

/// Mean focal loss over a batch of logits with 0/1 targets. Returns the
/// loss and its gradient with respect to the logits.
pub fn focal_loss(logits: &Array1<f64>, targets: &Array1<f64>, alpha: f64, gamma: f64) -> (f64, Array1<f64>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len();
    if n == 0 {
        return (0.0, Array1::zeros(0));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dlogits = Array1::zeros(n);
    for k in 0..n {
        let l = logits[k];
        let s = sigmoid(l);
        let y = targets[k];
        let (log_pt, one_minus_pt, term_grad) = if y > 0.5 {
            let log_pt = log_sigmoid(l);
            let q = 1.0 - s;
            // d/dl of -alpha (1-s)^g ln s
            let g = alpha * (gamma * s * q.powf(gamma) * log_pt - q.powf(gamma + 1.0));
            (log_pt, q, g)
        } else {
            let log_pt = log_sigmoid(-l);
            let q = s;
            let g = alpha * (-gamma * (1.0 - s) * q.powf(gamma) * log_pt + q.powf(gamma + 1.0));
            (log_pt, q, g)
        };
        loss += -alpha * one_minus_pt.powf(gamma) * log_pt;
        dlogits[k] = term_grad * inv_n;
    }
    (loss * inv_n, dlogits)
}

/// Mean smooth-L1 (Huber) loss between predictions and targets.
pub fn smooth_l1(pred: &Array1<f64>, target: &Array1<f64>, beta: f64) -> (f64, Array1<f64>) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len();
    if n == 0 {
        return (0.0, Array1::zeros(0));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(n);
    for k in 0..n {
        let d = pred[k] - target[k];
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            grad[k] = d / beta * inv_n;
        } else {
            loss += d.abs() - 0.5 * beta;
            grad[k] = d.signum() * inv_n;
        }
    }
    (loss * inv_n, grad)
}

/// Mean softmax cross-entropy over rows of `logits` with integer targets.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    assert_eq!(n, targets.len());
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros((n, k));
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            z += (row[j] - m).exp();
        }
        let log_z = z.ln() + m;
        loss += log_z - row[targets[i]];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            dlogits[[i, j]] = (p - if j == targets[i] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss * inv_n, dlogits)
}

/// Softmax probabilities for each row.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let (n, k) = logits.dim();
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            z += (row[j] - m).exp();
        }
        for j in 0..k {
            out[[i, j]] = (row[j] - m).exp() / z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;
    use rand::Rng;

    #[test]
    fn focal_point_value() {
        // p = 0.9 positive with alpha 0.25, gamma 2:
        // 0.25 * (0.1)^2 * (-ln 0.9)
        let expect = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((focal_term(0.9, true, 0.25, 2.0) - expect).abs() < 1e-9);
    }

    #[test]
    fn focal_reduces_to_bce() {
        let mut rng = stream_rng(21, 0);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let logits = Array1::from_iter((0..n).map(|_| rng.gen_range(-4.0..4.0)));
            let targets = Array1::from_iter((0..n).map(|_| f64::from(rng.gen_bool(0.5))));
            let (focal, dfocal) = focal_loss(&logits, &targets, 1.0, 0.0);
            let mut bce = 0.0;
            for k in 0..n {
                let p = sigmoid(logits[k]);
                bce -= if targets[k] > 0.5 { p.ln() } else { (1.0 - p).ln() };
            }
            bce /= n as f64;
            assert!((focal - bce).abs() < 1e-9, "{focal} vs {bce}");
            for k in 0..n {
                let p = sigmoid(logits[k]);
                let dbce = (p - targets[k]) / n as f64;
                assert!((dfocal[k] - dbce).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = stream_rng(22, 0);
        let logits = Array1::from_iter((0..9).map(|_| rng.gen_range(-3.0..3.0)));
        let targets = Array1::from_iter((0..9).map(|i| f64::from(i % 2 == 0)));
        let (_, grad) = focal_loss(&logits, &targets, 0.25, 2.0);
        let h = 1e-6;
        for k in 0..9 {
            let mut lp = logits.clone();
            lp[k] += h;
            let mut lm = logits.clone();
            lm[k] -= h;
            let fd = (focal_loss(&lp, &targets, 0.25, 2.0).0 - focal_loss(&lm, &targets, 0.25, 2.0).0) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-8, "fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn smooth_l1_regions_and_gradient() {
        let pred = ndarray::arr1(&[0.1, 3.0, -2.0, 0.0]);
        let target = ndarray::arr1(&[0.0, 0.0, 0.0, 0.0]);
        let (loss, grad) = smooth_l1(&pred, &target, 1.0);
        let expect = (0.5 * 0.01 + (3.0 - 0.5) + (2.0 - 0.5) + 0.0) / 4.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((grad[0] - 0.1 / 4.0).abs() < 1e-12);
        assert!((grad[1] - 0.25).abs() < 1e-12);
        assert!((grad[2] + 0.25).abs() < 1e-12);
        let h = 1e-6;
        for k in 0..4 {
            let mut pp = pred.clone();
            pp[k] += h;
            let mut pm = pred.clone();
            pm[k] -= h;
            let fd = (smooth_l1(&pp, &target, 1.0).0 - smooth_l1(&pm, &target, 1.0).0) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = stream_rng(23, 0);
        let mut logits = Array2::zeros((4, 2));
        for v in logits.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let targets = vec![0usize, 1, 1, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &targets);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let fd = (softmax_cross_entropy(&lp, &targets).0 - softmax_cross_entropy(&lm, &targets).0) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = ndarray::arr2(&[[100.0, 102.0], [-50.0, -53.0]]);
        let p = softmax_rows(&logits);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }
}
