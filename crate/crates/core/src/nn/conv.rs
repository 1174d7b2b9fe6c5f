//! 3D convolution lowered to im2col + GEMM.
//!
//! Weights are stored pre-flattened as `[cout, cin*k^3]` so both passes
//! are single matrix products per sample. The column buffer is rebuilt in
//! the backward pass instead of cached; that trades a little bandwidth
//! for hundreds of megabytes of activation memory at detector scale.

use ndarray::{Array2, Array5, ArrayView4, ArrayViewMut4, Axis};
use ndarray::linalg::general_mat_mul;
use rand_chacha::ChaCha8Rng;

use super::{he_normal, Param, VisitParams};

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Param,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let k3 = cin * kernel * kernel * kernel;
        Conv3d {
            w: Param::new(he_normal(rng, &[cout, k3], k3)),
            b: Param::no_decay(ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout]))),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Array5<f64>) -> Array5<f64> {
        let (n, cin, d, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let (od, oh, ow) = (self.out_dim(d), self.out_dim(h), self.out_dim(w));
        let n_out = od * oh * ow;
        let k3 = self.cin * self.kernel.pow(3);
        let mut cols = Array2::<f64>::zeros((k3, n_out));
        let mut y = Array5::<f64>::zeros((n, self.cout, od, oh, ow));
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let geom = Geom { cin: self.cin, kernel: self.kernel, stride: self.stride, pad: self.pad };
        for i in 0..n {
            im2col(&geom, x.index_axis(Axis(0), i), &mut cols, (od, oh, ow));
            let mut ymat = y
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.cout, n_out))
                .unwrap();
            general_mat_mul(1.0, &w2, &cols, 0.0, &mut ymat);
            for (oc, mut row) in ymat.outer_iter_mut().enumerate() {
                let b = self.b.value[oc];
                row.mapv_inplace(|v| v + b);
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array5<f64>, dy: &Array5<f64>) -> Array5<f64> {
        let (n, _, d, h, w) = x.dim();
        let (_, cdy, od, oh, ow) = dy.dim();
        assert_eq!(cdy, self.cout, "conv grad channels");
        let n_out = od * oh * ow;
        let k3 = self.cin * self.kernel.pow(3);
        let mut cols = Array2::<f64>::zeros((k3, n_out));
        let mut dcols = Array2::<f64>::zeros((k3, n_out));
        let mut dx = Array5::<f64>::zeros((n, self.cin, d, h, w));
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dw2 = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let geom = Geom { cin: self.cin, kernel: self.kernel, stride: self.stride, pad: self.pad };
        for i in 0..n {
            let dymat = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.cout, n_out))
                .unwrap();
            im2col(&geom, x.index_axis(Axis(0), i), &mut cols, (od, oh, ow));
            general_mat_mul(1.0, &dymat, &cols.t(), 1.0, &mut dw2);
            for (oc, row) in dymat.outer_iter().enumerate() {
                self.b.grad[oc] += row.sum();
            }
            general_mat_mul(1.0, &w2.t(), &dymat, 0.0, &mut dcols);
            col2im_add(&geom, &dcols, dx.index_axis_mut(Axis(0), i), (od, oh, ow));
        }
        dx
    }

}

/// Convolution geometry shared by the column transforms.
struct Geom {
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Valid output range along one axis for kernel offset `k_off`:
/// indices `o` with `0 <= o*stride + k_off - pad < in_dim`.
fn axis_range(g: &Geom, k_off: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let s = g.stride as isize;
    let shift = k_off as isize - g.pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    let hi_excl = ((in_dim as isize - shift) + s - 1) / s;
    let lo = lo.max(0) as usize;
    let hi = hi_excl.clamp(0, out_dim as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(g: &Geom, x: ArrayView4<f64>, cols: &mut Array2<f64>, out: (usize, usize, usize)) {
    let (_, d, h, w) = x.dim();
    let (od, oh, ow) = out;
    let k = g.kernel;
    let s = g.stride;
    cols.fill(0.0);
    let mut row = 0;
    for ic in 0..g.cin {
        let xc = x.index_axis(Axis(0), ic);
        for kz in 0..k {
            let (z_lo, z_hi) = axis_range(g, kz, d, od);
            for ky in 0..k {
                let (y_lo, y_hi) = axis_range(g, ky, h, oh);
                for kx in 0..k {
                    let (x_lo, x_hi) = axis_range(g, kx, w, ow);
                    let mut crow = cols.row_mut(row);
                    if x_hi > x_lo {
                        for oz in z_lo..z_hi {
                            let iz = oz * s + kz - g.pad;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - g.pad;
                                let ix0 = x_lo * s + kx - g.pad;
                                let src = xc.slice(ndarray::s![
                                    iz,
                                    iy,
                                    ix0..ix0 + (x_hi - x_lo - 1) * s + 1; s
                                ]);
                                let base = (oz * oh + oy) * ow;
                                crow.slice_mut(ndarray::s![base + x_lo..base + x_hi])
                                    .assign(&src);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im_add(g: &Geom, dcols: &Array2<f64>, mut dx: ArrayViewMut4<f64>, out: (usize, usize, usize)) {
    let (_, d, h, w) = dx.dim();
    let (od, oh, ow) = out;
    let k = g.kernel;
    let s = g.stride;
    let mut row = 0;
    for ic in 0..g.cin {
        let mut xc = dx.index_axis_mut(Axis(0), ic);
        for kz in 0..k {
            let (z_lo, z_hi) = axis_range(g, kz, d, od);
            for ky in 0..k {
                let (y_lo, y_hi) = axis_range(g, ky, h, oh);
                for kx in 0..k {
                    let (x_lo, x_hi) = axis_range(g, kx, w, ow);
                    let crow = dcols.row(row);
                    if x_hi > x_lo {
                        for oz in z_lo..z_hi {
                            let iz = oz * s + kz - g.pad;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - g.pad;
                                let ix0 = x_lo * s + kx - g.pad;
                                let base = (oz * oh + oy) * ow;
                                let src = crow.slice(ndarray::s![base + x_lo..base + x_hi]);
                                let mut dst = xc.slice_mut(ndarray::s![
                                    iz,
                                    iy,
                                    ix0..ix0 + (x_hi - x_lo - 1) * s + 1; s
                                ]);
                                dst.zip_mut_with(&src, |a, &b| *a += b);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl VisitParams for Conv3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;
    use ndarray::Array5;
    use rand::Rng;

    /// Direct triple-loop convolution used as the oracle.
    fn conv_naive(x: &Array5<f64>, conv: &Conv3d) -> Array5<f64> {
        let (n, cin, d, h, w) = x.dim();
        let (od, oh, ow) = (conv.out_dim(d), conv.out_dim(h), conv.out_dim(w));
        let k = conv.kernel;
        let mut y = Array5::<f64>::zeros((n, conv.cout, od, oh, ow));
        for i in 0..n {
            for oc in 0..conv.cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = conv.b.value[oc];
                            for ic in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * conv.stride + kz) as isize - conv.pad as isize;
                                            let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                            let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= w {
                                                continue;
                                            }
                                            let widx = ((ic * k + kz) * k + ky) * k + kx;
                                            acc += x[[i, ic, iz, iy, ix]]
                                                * conv.w.value[[oc, widx]];
                                        }
                                    }
                                }
                            }
                            y[[i, oc, oz, oy, ox]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_input(rng: &mut rand_chacha::ChaCha8Rng, shape: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        let mut x = Array5::zeros(shape);
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = stream_rng(11, 0);
        for (stride, pad, kernel) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let conv = Conv3d::new(&mut rng, 3, 4, kernel, stride, pad);
            let x = random_input(&mut rng, (2, 3, 7, 6, 5));
            let fast = conv.forward(&x);
            let slow = conv_naive(&x, &conv);
            assert_eq!(fast.dim(), slow.dim());
            let err = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "stride {stride} pad {pad} kernel {kernel}: max err {err}");
        }
    }

    #[test]
    fn output_shape_law() {
        let mut rng = stream_rng(1, 0);
        let conv = Conv3d::new(&mut rng, 1, 2, 3, 2, 1);
        let x = random_input(&mut rng, (1, 1, 16, 16, 16));
        assert_eq!(conv.forward(&x).dim(), (1, 2, 8, 8, 8));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(5, 0);
        let mut conv = Conv3d::new(&mut rng, 2, 3, 3, 2, 1);
        let x = random_input(&mut rng, (2, 2, 5, 5, 5));
        // Loss = sum(y * coeff) for fixed random coeff so dL/dy is known.
        let coeff = random_input(&mut rng, {
            let y = conv.forward(&x);
            y.dim()
        });
        let loss = |c: &Conv3d, x: &Array5<f64>| (&c.forward(x) * &coeff).sum();

        conv.zero_grads();
        let dy = coeff.clone();
        let dx = conv.backward(&x, &dy);

        let h = 1e-6;
        // input gradient, a few probes
        let mut probe_rng = stream_rng(6, 0);
        for _ in 0..5 {
            let idx = [
                probe_rng.gen_range(0..2),
                probe_rng.gen_range(0..2),
                probe_rng.gen_range(0..5),
                probe_rng.gen_range(0..5),
                probe_rng.gen_range(0..5),
            ];
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx: fd {fd} vs {}", dx[idx]);
        }
        // weight gradient
        for _ in 0..5 {
            let r = probe_rng.gen_range(0..3);
            let c = probe_rng.gen_range(0..2 * 27);
            let orig = conv.w.value[[r, c]];
            conv.w.value[[r, c]] = orig + h;
            let lp = loss(&conv, &x);
            conv.w.value[[r, c]] = orig - h;
            let lm = loss(&conv, &x);
            conv.w.value[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - conv.w.grad[[r, c]]).abs() < 1e-6, "dw: fd {fd} vs {}", conv.w.grad[[r, c]]);
        }
        // bias gradient
        let orig = conv.b.value[1];
        conv.b.value[1] = orig + h;
        let lp = loss(&conv, &x);
        conv.b.value[1] = orig - h;
        let lm = loss(&conv, &x);
        conv.b.value[1] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - conv.b.grad[1]).abs() < 1e-6);
    }
}
