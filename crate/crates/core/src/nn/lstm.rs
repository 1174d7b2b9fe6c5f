//! Single-layer LSTM over short sequences.
//!
//! Screen series hold at most three steps, so sequences are processed one
//! at a time; the surrounding networks batch at the embedding level.
//! Gate layout in the stacked weight matrices is (input, forget, cell,
//! output). The forget-gate bias starts at one.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, xavier_uniform, Param, VisitParams};

#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub b: Param,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug)]
pub struct LstmCache {
    xs: Array2<f64>,
    gates: Array2<f64>,
    cells: Array2<f64>,
    hiddens: Array2<f64>,
}

impl Lstm {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        let mut b = ArrayD::zeros(IxDyn(&[4 * hidden]));
        for i in hidden..2 * hidden {
            b[i] = 1.0;
        }
        Lstm {
            w_ih: Param::new(xavier_uniform(rng, &[4 * hidden, input], input, hidden)),
            w_hh: Param::new(xavier_uniform(rng, &[4 * hidden, hidden], hidden, hidden)),
            b: Param::no_decay(b),
            input,
            hidden,
        }
    }

    /// Run one sequence `[t, input]`, returning the final hidden state.
    pub fn forward(&self, xs: &Array2<f64>) -> (Array1<f64>, LstmCache) {
        let (t_len, width) = xs.dim();
        assert_eq!(width, self.input, "lstm input width");
        let hn = self.hidden;
        let w_ih = self.w_ih.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w_hh = self.w_hh.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut gates = Array2::zeros((t_len, 4 * hn));
        let mut cells = Array2::zeros((t_len, hn));
        let mut hiddens = Array2::zeros((t_len, hn));
        let mut h_prev = Array1::zeros(hn);
        let mut c_prev = Array1::<f64>::zeros(hn);
        for t in 0..t_len {
            let x_t = xs.row(t);
            let mut pre = Array1::zeros(4 * hn);
            for r in 0..4 * hn {
                let mut acc = self.b.value[r];
                for c in 0..self.input {
                    acc += w_ih[[r, c]] * x_t[c];
                }
                for c in 0..hn {
                    acc += w_hh[[r, c]] * h_prev[c];
                }
                pre[r] = acc;
            }
            for j in 0..hn {
                let i_g = sigmoid(pre[j]);
                let f_g = sigmoid(pre[hn + j]);
                let g_g = pre[2 * hn + j].tanh();
                let o_g = sigmoid(pre[3 * hn + j]);
                let c_t = f_g * c_prev[j] + i_g * g_g;
                let h_t = o_g * c_t.tanh();
                gates[[t, j]] = i_g;
                gates[[t, hn + j]] = f_g;
                gates[[t, 2 * hn + j]] = g_g;
                gates[[t, 3 * hn + j]] = o_g;
                cells[[t, j]] = c_t;
                hiddens[[t, j]] = h_t;
            }
            h_prev.assign(&hiddens.row(t));
            c_prev.assign(&cells.row(t));
        }
        let last = hiddens.row(t_len - 1).to_owned();
        (last, LstmCache { xs: xs.clone(), gates, cells, hiddens })
    }

    /// Backpropagate a gradient on the final hidden state; returns the
    /// per-step input gradients `[t, input]`.
    pub fn backward(&mut self, cache: &LstmCache, dh_last: &Array1<f64>) -> Array2<f64> {
        let (t_len, _) = cache.xs.dim();
        let hn = self.hidden;
        let w_ih = self.w_ih.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w_hh = self.w_hh.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dw_ih = Array2::zeros((4 * hn, self.input));
        let mut dw_hh = Array2::zeros((4 * hn, hn));
        let mut db = Array1::<f64>::zeros(4 * hn);
        let mut dxs = Array2::zeros((t_len, self.input));
        let mut dh = dh_last.clone();
        let mut dc_next = Array1::<f64>::zeros(hn);
        for t in (0..t_len).rev() {
            let mut da = Array1::zeros(4 * hn);
            for j in 0..hn {
                let i_g = cache.gates[[t, j]];
                let f_g = cache.gates[[t, hn + j]];
                let g_g = cache.gates[[t, 2 * hn + j]];
                let o_g = cache.gates[[t, 3 * hn + j]];
                let c_t = cache.cells[[t, j]];
                let c_prev = if t == 0 { 0.0 } else { cache.cells[[t - 1, j]] };
                let tanh_c = c_t.tanh();
                let d_o = dh[j] * tanh_c;
                let dc = dh[j] * o_g * (1.0 - tanh_c * tanh_c) + dc_next[j];
                let d_i = dc * g_g;
                let d_g = dc * i_g;
                let d_f = dc * c_prev;
                dc_next[j] = dc * f_g;
                da[j] = d_i * i_g * (1.0 - i_g);
                da[hn + j] = d_f * f_g * (1.0 - f_g);
                da[2 * hn + j] = d_g * (1.0 - g_g * g_g);
                da[3 * hn + j] = d_o * o_g * (1.0 - o_g);
            }
            let x_t = cache.xs.row(t);
            for r in 0..4 * hn {
                let a = da[r];
                if a == 0.0 {
                    continue;
                }
                for c in 0..self.input {
                    dw_ih[[r, c]] += a * x_t[c];
                }
                db[r] += a;
            }
            if t > 0 {
                let h_prev = cache.hiddens.row(t - 1);
                for r in 0..4 * hn {
                    let a = da[r];
                    for c in 0..hn {
                        dw_hh[[r, c]] += a * h_prev[c];
                    }
                }
            }
            for c in 0..self.input {
                let mut acc = 0.0;
                for r in 0..4 * hn {
                    acc += w_ih[[r, c]] * da[r];
                }
                dxs[[t, c]] = acc;
            }
            let mut dh_prev = Array1::zeros(hn);
            for c in 0..hn {
                let mut acc = 0.0;
                for r in 0..4 * hn {
                    acc += w_hh[[r, c]] * da[r];
                }
                dh_prev[c] = acc;
            }
            dh = dh_prev;
        }
        let mut gw_ih = self.w_ih.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        gw_ih += &dw_ih;
        let mut gw_hh = self.w_hh.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        gw_hh += &dw_hh;
        for r in 0..4 * hn {
            self.b.grad[r] += db[r];
        }
        dxs
    }
}

impl VisitParams for Lstm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w_ih"), &mut self.w_ih);
        f(format!("{prefix}.w_hh"), &mut self.w_hh);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;
    use rand::Rng;

    #[test]
    fn single_step_matches_manual_cell() {
        let mut rng = stream_rng(13, 0);
        let lstm = Lstm::new(&mut rng, 2, 1);
        let xs = ndarray::arr2(&[[0.3, -0.7]]);
        let (h, _) = lstm.forward(&xs);
        let w_ih = &lstm.w_ih.value;
        let pre = |r: usize| lstm.b.value[r] + w_ih[[r, 0]] * 0.3 + w_ih[[r, 1]] * -0.7;
        let i = sigmoid(pre(0));
        let f = sigmoid(pre(1));
        let g = pre(2).tanh();
        let o = sigmoid(pre(3));
        // zero initial cell state: c = f*0 + i*g
        let c = f * 0.0 + i * g;
        assert!((h[0] - o * c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn longer_sequences_differ_from_truncated_ones() {
        let mut rng = stream_rng(14, 0);
        let lstm = Lstm::new(&mut rng, 3, 4);
        let mut xs = Array2::zeros((3, 3));
        for v in xs.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (h3, _) = lstm.forward(&xs);
        let (h1, _) = lstm.forward(&xs.slice(ndarray::s![2..3, ..]).to_owned());
        assert!((&h3 - &h1).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(15, 0);
        let mut lstm = Lstm::new(&mut rng, 3, 2);
        let mut xs = Array2::zeros((3, 3));
        for v in xs.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let coeff = Array1::from_vec(vec![0.7, -1.2]);
        let loss = |l: &Lstm, xs: &Array2<f64>| (&l.forward(xs).0 * &coeff).sum();

        let (_, cache) = lstm.forward(&xs);
        lstm.zero_grads();
        let dxs = lstm.backward(&cache, &coeff);

        let h = 1e-6;
        for idx in [[0usize, 0usize], [1, 2], [2, 1]] {
            let mut xp = xs.clone();
            xp[idx] += h;
            let mut xm = xs.clone();
            xm[idx] -= h;
            let fd = (loss(&lstm, &xp) - loss(&lstm, &xm)) / (2.0 * h);
            assert!((fd - dxs[idx]).abs() < 1e-7, "dx fd {fd} vs {}", dxs[idx]);
        }
        for (r, c) in [(0usize, 0usize), (5, 1), (7, 2)] {
            let orig = lstm.w_ih.value[[r, c]];
            lstm.w_ih.value[[r, c]] = orig + h;
            let lp = loss(&lstm, &xs);
            lstm.w_ih.value[[r, c]] = orig - h;
            let lm = loss(&lstm, &xs);
            lstm.w_ih.value[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - lstm.w_ih.grad[[r, c]]).abs() < 1e-7, "dw fd {fd}");
        }
        for (r, c) in [(0usize, 0usize), (6, 1)] {
            let orig = lstm.w_hh.value[[r, c]];
            lstm.w_hh.value[[r, c]] = orig + h;
            let lp = loss(&lstm, &xs);
            lstm.w_hh.value[[r, c]] = orig - h;
            let lm = loss(&lstm, &xs);
            lstm.w_hh.value[[r, c]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - lstm.w_hh.grad[[r, c]]).abs() < 1e-7, "dwhh fd {fd}");
        }
    }
}
