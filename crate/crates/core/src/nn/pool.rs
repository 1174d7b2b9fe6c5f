//! Pooling and upsampling on `[n, c, d, h, w]` feature maps.

use ndarray::{Array2, Array5};

/// Non-overlapping cubic average pooling. Trailing voxels that do not fill
/// a complete window are dropped.
pub fn avg_pool3(x: &Array5<f64>, p: usize) -> Array5<f64> {
    let (n, c, d, h, w) = x.dim();
    let (od, oh, ow) = (d / p, h / p, w / p);
    let norm = 1.0 / (p * p * p) as f64;
    let mut y = Array5::zeros((n, c, od, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dz in 0..p {
                            for dy in 0..p {
                                for dx in 0..p {
                                    acc += x[[i, ch, oz * p + dz, oy * p + dy, ox * p + dx]];
                                }
                            }
                        }
                        y[[i, ch, oz, oy, ox]] = acc * norm;
                    }
                }
            }
        }
    }
    y
}

pub fn avg_pool3_backward(dy: &Array5<f64>, input_dim: (usize, usize, usize, usize, usize), p: usize) -> Array5<f64> {
    let (n, c, od, oh, ow) = dy.dim();
    let norm = 1.0 / (p * p * p) as f64;
    let mut dx = Array5::zeros(input_dim);
    for i in 0..n {
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[[i, ch, oz, oy, ox]] * norm;
                        for dz in 0..p {
                            for dyy in 0..p {
                                for dxx in 0..p {
                                    dx[[i, ch, oz * p + dz, oy * p + dyy, ox * p + dxx]] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean over the spatial axes: `[n, c, d, h, w] -> [n, c]`.
pub fn global_avg_pool(x: &Array5<f64>) -> Array2<f64> {
    let (n, c, d, h, w) = x.dim();
    let norm = 1.0 / (d * h * w) as f64;
    let mut y = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for zz in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        acc += x[[i, ch, zz, yy, xx]];
                    }
                }
            }
            y[[i, ch]] = acc * norm;
        }
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, input_dim: (usize, usize, usize, usize, usize)) -> Array5<f64> {
    let (n, c, d, h, w) = input_dim;
    let norm = 1.0 / (d * h * w) as f64;
    let mut dx = Array5::zeros(input_dim);
    for i in 0..n {
        for ch in 0..c {
            let g = dy[[i, ch]] * norm;
            dx.slice_mut(ndarray::s![i, ch, .., .., ..]).fill(g);
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling along all spatial axes.
pub fn upsample2x(x: &Array5<f64>) -> Array5<f64> {
    let (n, c, d, h, w) = x.dim();
    let mut y = Array5::zeros((n, c, d * 2, h * 2, w * 2));
    for i in 0..n {
        for ch in 0..c {
            for zz in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let v = x[[i, ch, zz, yy, xx]];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    y[[i, ch, zz * 2 + dz, yy * 2 + dy, xx * 2 + dx]] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &Array5<f64>) -> Array5<f64> {
    let (n, c, d2, h2, w2) = dy.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut dx = Array5::zeros((n, c, d, h, w));
    for i in 0..n {
        for ch in 0..c {
            for zz in 0..d2 {
                for yy in 0..h2 {
                    for xx in 0..w2 {
                        dx[[i, ch, zz / 2, yy / 2, xx / 2]] += dy[[i, ch, zz, yy, xx]];
                    }
                }
            }
        }
    }
    dx
}
