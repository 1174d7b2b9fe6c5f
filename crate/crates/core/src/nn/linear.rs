//! Fully-connected layer on `[n, features]` batches.

use ndarray::{Array2, ArrayD, IxDyn};
use ndarray::linalg::general_mat_mul;
use rand_chacha::ChaCha8Rng;

use super::{xavier_uniform, Param, VisitParams};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Linear {
            w: Param::new(xavier_uniform(rng, &[output, input], input, output)),
            b: Param::no_decay(ArrayD::zeros(IxDyn(&[output]))),
            input,
            output,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, f) = x.dim();
        assert_eq!(f, self.input, "linear input width");
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = Array2::zeros((n, self.output));
        general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
        for mut row in y.outer_iter_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += self.b.value[o];
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dw = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
        for row in dy.outer_iter() {
            for (o, v) in row.iter().enumerate() {
                self.b.grad[o] += v;
            }
        }
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(1.0, dy, &w, 0.0, &mut dx);
        dx
    }
}

impl VisitParams for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// ReLU on any array, returning output (which doubles as the backward mask).
pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Given the ReLU *output* and upstream grad, produce the input grad.
pub fn relu_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;
    use rand::Rng;

    #[test]
    fn forward_matches_manual() {
        let mut rng = stream_rng(9, 0);
        let lin = Linear::new(&mut rng, 3, 2);
        let x = ndarray::arr2(&[[1.0, 2.0, -1.0]]);
        let y = lin.forward(&x);
        for o in 0..2 {
            let mut expect = lin.b.value[o];
            for i in 0..3 {
                expect += lin.w.value[[o, i]] * x[[0, i]];
            }
            assert!((y[[0, o]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(10, 0);
        let mut lin = Linear::new(&mut rng, 4, 3);
        let mut x = Array2::zeros((5, 4));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut coeff = Array2::zeros((5, 3));
        for v in coeff.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |l: &Linear, x: &Array2<f64>| (&l.forward(x) * &coeff).sum();
        lin.zero_grads();
        let dx = lin.backward(&x, &coeff);
        let h = 1e-6;
        for idx in [[0, 0], [4, 3], [2, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for (r, c) in [(0usize, 0usize), (2, 3), (1, 2)] {
            let orig = lin.w.value[[r, c]];
            lin.w.value[[r, c]] = orig + h;
            let lp = loss(&lin, &x);
            lin.w.value[[r, c]] = orig - h;
            let lm = loss(&lin, &x);
            lin.w.value[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - lin.w.grad[[r, c]]).abs() < 1e-7);
        }
    }

    #[test]
    fn relu_backward_masks() {
        let x = ndarray::arr1(&[-1.0, 0.0, 2.0]);
        let y = relu(&x);
        let dy = ndarray::arr1(&[5.0, 5.0, 5.0]);
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx, ndarray::arr1(&[0.0, 0.0, 5.0]));
    }
}
