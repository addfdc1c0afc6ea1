//! Low-level network building blocks with hand-written reverse-mode
//! gradients.
//!
//! Everything operates on `f64` ndarray values. Forward passes return the
//! intermediate state a matching `*_backward` needs; gradients accumulate
//! into caller-owned containers so batches sum naturally.

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::rng::Rng;
use rand::Rng as _;

/// Epsilon inside layer-norm / batch-norm standard deviations.
pub const NORM_EPS: f64 = 1e-5;

/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform init in [-s, +s] with s = 1/sqrt(fan_in).
pub fn init_uniform(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..=s)).collect()
}

pub fn outer_acc(acc: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for i in 0..a.len() {
        if a[i] == 0.0 {
            continue;
        }
        for j in 0..b.len() {
            acc[[i, j]] += a[i] * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// 1-D convolution over a (positions x channels) sequence, 'same' zero padding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// (out_channels, in_channels, kernel)
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

impl Conv1d {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        Conv1d {
            weight: Array3::zeros((out_ch, in_ch, kernel)),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn init(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = in_ch * kernel;
        let w = init_uniform(rng, fan_in, out_ch * in_ch * kernel);
        let b = init_uniform(rng, fan_in, out_ch);
        Conv1d {
            weight: Array3::from_shape_vec((out_ch, in_ch, kernel), w).unwrap(),
            bias: Array1::from_vec(b),
        }
    }

    /// input: (K, in_ch) -> output: (K, out_ch); kernel must be odd.
    pub fn forward(&self, input: &Array2<f64>) -> Array2<f64> {
        let (out_ch, in_ch, kernel) = self.weight.dim();
        let k_len = input.nrows();
        let pad = (kernel - 1) / 2;
        let mut out = Array2::zeros((k_len, out_ch));
        for k in 0..k_len {
            for c in 0..out_ch {
                let mut acc = self.bias[c];
                for t in 0..kernel {
                    let src = k + t;
                    if src < pad || src - pad >= k_len {
                        continue;
                    }
                    let src = src - pad;
                    for j in 0..in_ch {
                        acc += self.weight[[c, j, t]] * input[[src, j]];
                    }
                }
                out[[k, c]] = acc;
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns d_input.
    pub fn backward(
        &self,
        input: &Array2<f64>,
        d_out: &Array2<f64>,
        grad: &mut Conv1d,
    ) -> Array2<f64> {
        let (out_ch, in_ch, kernel) = self.weight.dim();
        let k_len = input.nrows();
        let pad = (kernel - 1) / 2;
        let mut d_input = Array2::zeros(input.raw_dim());
        for k in 0..k_len {
            for c in 0..out_ch {
                let g = d_out[[k, c]];
                if g == 0.0 {
                    continue;
                }
                grad.bias[c] += g;
                for t in 0..kernel {
                    let src = k + t;
                    if src < pad || src - pad >= k_len {
                        continue;
                    }
                    let src = src - pad;
                    for j in 0..in_ch {
                        grad.weight[[c, j, t]] += g * input[[src, j]];
                        d_input[[src, j]] += g * self.weight[[c, j, t]];
                    }
                }
            }
        }
        d_input
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `pre` is the pre-activation input that was fed to [`relu`].
pub fn relu_backward(pre: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let mut d = d_out.clone();
    d.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

// ---------------------------------------------------------------------------
// Layer norm over the channel axis, one normalization per sequence position
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(width),
            shift: Array1::zeros(width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(width),
            shift: Array1::zeros(width),
        }
    }

    /// input: (K, width)
    pub fn forward(&self, input: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (k_len, width) = input.dim();
        let mut out = Array2::zeros((k_len, width));
        let mut x_hat = Array2::zeros((k_len, width));
        let mut inv_std = Array1::zeros(k_len);
        for k in 0..k_len {
            let row = input.row(k);
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[k] = istd;
            for c in 0..width {
                let xh = (input[[k, c]] - mean) * istd;
                x_hat[[k, c]] = xh;
                out[[k, c]] = self.gain[c] * xh + self.shift[c];
            }
        }
        (out, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        d_out: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let (k_len, width) = d_out.dim();
        let n = width as f64;
        let mut d_input = Array2::zeros((k_len, width));
        for k in 0..k_len {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..width {
                let g = d_out[[k, c]];
                let xh = cache.x_hat[[k, c]];
                grad.gain[c] += g * xh;
                grad.shift[c] += g;
                let dxh = g * self.gain[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh;
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            for c in 0..width {
                let dxh = d_out[[k, c]] * self.gain[c];
                d_input[[k, c]] =
                    cache.inv_std[k] * (dxh - mean_dxhat - cache.x_hat[[k, c]] * mean_dxhat_xhat);
            }
        }
        d_input
    }
}

// ---------------------------------------------------------------------------
// Inverted dropout
// ---------------------------------------------------------------------------

/// Samples a keep/scale mask; entries are 0 or 1/(1-rate).
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut Rng) -> Array2<f64> {
    let scale = 1.0 / (1.0 - rate);
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        let u: f64 = rng.gen();
        *v = if u < rate { 0.0 } else { scale };
    }
    mask
}

// ---------------------------------------------------------------------------
// Gated recurrent cell
// ---------------------------------------------------------------------------

/// Update/reset gated cell:
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)          update gate
/// r = sigmoid(Wr x + Ur h + br)          reset gate
/// c = tanh(Wc x + Uc (r . h) + bc)       candidate state
/// h' = z . h + (1 - z) . c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_update: Array2<f64>,
    pub u_update: Array2<f64>,
    pub b_update: Array1<f64>,
    pub w_reset: Array2<f64>,
    pub u_reset: Array2<f64>,
    pub b_reset: Array1<f64>,
    pub w_cand: Array2<f64>,
    pub u_cand: Array2<f64>,
    pub b_cand: Array1<f64>,
}

pub struct GruStepCache {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    reset: Array1<f64>,
    update: Array1<f64>,
    cand: Array1<f64>,
}

impl GruCell {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruCell {
            w_update: Array2::zeros((hidden, input)),
            u_update: Array2::zeros((hidden, hidden)),
            b_update: Array1::zeros(hidden),
            w_reset: Array2::zeros((hidden, input)),
            u_reset: Array2::zeros((hidden, hidden)),
            b_reset: Array1::zeros(hidden),
            w_cand: Array2::zeros((hidden, input)),
            u_cand: Array2::zeros((hidden, hidden)),
            b_cand: Array1::zeros(hidden),
        }
    }

    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        fn mat(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
            let w = init_uniform(rng, cols, rows * cols);
            Array2::from_shape_vec((rows, cols), w).unwrap()
        }
        let w_update = mat(rng, hidden, input);
        let u_update = mat(rng, hidden, hidden);
        let b_update = Array1::from_vec(init_uniform(rng, input, hidden));
        let w_reset = mat(rng, hidden, input);
        let u_reset = mat(rng, hidden, hidden);
        let b_reset = Array1::from_vec(init_uniform(rng, input, hidden));
        let w_cand = mat(rng, hidden, input);
        let u_cand = mat(rng, hidden, hidden);
        let b_cand = Array1::from_vec(init_uniform(rng, input, hidden));
        GruCell {
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.b_update.len()
    }

    pub fn step(&self, x: ArrayView1<'_, f64>, h_prev: ArrayView1<'_, f64>) -> (Array1<f64>, GruStepCache) {
        let update = (self.w_update.dot(&x) + self.u_update.dot(&h_prev) + &self.b_update)
            .mapv(sigmoid);
        let reset =
            (self.w_reset.dot(&x) + self.u_reset.dot(&h_prev) + &self.b_reset).mapv(sigmoid);
        let gated: Array1<f64> = &reset * &h_prev;
        let cand = (self.w_cand.dot(&x) + self.u_cand.dot(&gated) + &self.b_cand).mapv(f64::tanh);
        let h = &update * &h_prev + (1.0 - &update) * &cand;
        (
            h,
            GruStepCache {
                x: x.to_owned(),
                h_prev: h_prev.to_owned(),
                reset,
                update,
                cand,
            },
        )
    }

    /// Backward through one step. Returns (d_x, d_h_prev).
    pub fn step_backward(
        &self,
        cache: &GruStepCache,
        d_h: ArrayView1<'_, f64>,
        grad: &mut GruCell,
    ) -> (Array1<f64>, Array1<f64>) {
        let GruStepCache {
            x,
            h_prev,
            reset,
            update,
            cand,
        } = cache;

        let d_update: Array1<f64> = &d_h.to_owned() * &(h_prev - cand);
        let d_cand: Array1<f64> = &d_h.to_owned() * &(1.0 - update);
        let mut d_h_prev: Array1<f64> = &d_h.to_owned() * update;

        // candidate path
        let du_c: Array1<f64> = &d_cand * &cand.mapv(|c| 1.0 - c * c);
        let gated: Array1<f64> = reset * h_prev;
        outer_acc(&mut grad.w_cand, du_c.view(), x.view());
        outer_acc(&mut grad.u_cand, du_c.view(), gated.view());
        grad.b_cand += &du_c;
        let mut d_x = self.w_cand.t().dot(&du_c);
        let d_gated = self.u_cand.t().dot(&du_c);
        let d_reset: Array1<f64> = &d_gated * h_prev;
        d_h_prev += &(&d_gated * reset);

        // update gate
        let du_z: Array1<f64> = &d_update * &update.mapv(|z| z * (1.0 - z));
        outer_acc(&mut grad.w_update, du_z.view(), x.view());
        outer_acc(&mut grad.u_update, du_z.view(), h_prev.view());
        grad.b_update += &du_z;
        d_x += &self.w_update.t().dot(&du_z);
        d_h_prev += &self.u_update.t().dot(&du_z);

        // reset gate
        let du_r: Array1<f64> = &d_reset * &reset.mapv(|r| r * (1.0 - r));
        outer_acc(&mut grad.w_reset, du_r.view(), x.view());
        outer_acc(&mut grad.u_reset, du_r.view(), h_prev.view());
        grad.b_reset += &du_r;
        d_x += &self.w_reset.t().dot(&du_r);
        d_h_prev += &self.u_reset.t().dot(&du_r);

        (d_x, d_h_prev)
    }
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out: usize, input: usize) -> Self {
        Affine {
            weight: Array2::zeros((out, input)),
            bias: Array1::zeros(out),
        }
    }

    pub fn init(out: usize, input: usize, rng: &mut Rng) -> Self {
        let w = init_uniform(rng, input, out * input);
        let b = init_uniform(rng, input, out);
        Affine {
            weight: Array2::from_shape_vec((out, input), w).unwrap(),
            bias: Array1::from_vec(b),
        }
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(
        &self,
        x: ArrayView1<'_, f64>,
        d_out: ArrayView1<'_, f64>,
        grad: &mut Affine,
    ) -> Array1<f64> {
        outer_acc(&mut grad.weight, d_out, x);
        grad.bias += &d_out;
        self.weight.t().dot(&d_out)
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution over (channels, frames, freq) volumes, 'same' padding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_ch, in_ch, kh, kw)
    pub weight: ndarray::Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        Conv2d {
            weight: ndarray::Array4::zeros((out_ch, in_ch, kh, kw)),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn init(out_ch: usize, in_ch: usize, kh: usize, kw: usize, rng: &mut Rng) -> Self {
        let fan_in = in_ch * kh * kw;
        let w = init_uniform(rng, fan_in, out_ch * in_ch * kh * kw);
        let b = init_uniform(rng, fan_in, out_ch);
        Conv2d {
            weight: ndarray::Array4::from_shape_vec((out_ch, in_ch, kh, kw), w).unwrap(),
            bias: Array1::from_vec(b),
        }
    }

    /// input: (in_ch, T, F) -> (out_ch, T, F)
    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (out_ch, in_ch, kh, kw) = self.weight.dim();
        let (_, t_len, f_len) = input.dim();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = Array3::zeros((out_ch, t_len, f_len));
        for c in 0..out_ch {
            for t in 0..t_len {
                for f in 0..f_len {
                    let mut acc = self.bias[c];
                    for dt in 0..kh {
                        let st = t + dt;
                        if st < ph || st - ph >= t_len {
                            continue;
                        }
                        for df in 0..kw {
                            let sf = f + df;
                            if sf < pw || sf - pw >= f_len {
                                continue;
                            }
                            for j in 0..in_ch {
                                acc += self.weight[[c, j, dt, df]] * input[[j, st - ph, sf - pw]];
                            }
                        }
                    }
                    out[[c, t, f]] = acc;
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        input: &Array3<f64>,
        d_out: &Array3<f64>,
        grad: &mut Conv2d,
    ) -> Array3<f64> {
        let (out_ch, in_ch, kh, kw) = self.weight.dim();
        let (_, t_len, f_len) = input.dim();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut d_input = Array3::zeros(input.raw_dim());
        for c in 0..out_ch {
            for t in 0..t_len {
                for f in 0..f_len {
                    let g = d_out[[c, t, f]];
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[c] += g;
                    for dt in 0..kh {
                        let st = t + dt;
                        if st < ph || st - ph >= t_len {
                            continue;
                        }
                        for df in 0..kw {
                            let sf = f + df;
                            if sf < pw || sf - pw >= f_len {
                                continue;
                            }
                            for j in 0..in_ch {
                                grad.weight[[c, j, dt, df]] += g * input[[j, st - ph, sf - pw]];
                                d_input[[j, st - ph, sf - pw]] += g * self.weight[[c, j, dt, df]];
                            }
                        }
                    }
                }
            }
        }
        d_input
    }
}

// ---------------------------------------------------------------------------
// Batch norm over per-channel statistics of a batch of (C, T, F) volumes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

pub struct BatchNormCache {
    x_hat: Vec<Array3<f64>>,
    inv_std: Array1<f64>,
    count: usize,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gain: Array1::ones(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        BatchNorm {
            gain: Array1::zeros(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
        }
    }

    /// Train mode: normalize by batch statistics pooled over every position
    /// of every volume, and fold them into the running statistics.
    pub fn forward_train(&mut self, inputs: &[Array3<f64>]) -> (Vec<Array3<f64>>, BatchNormCache) {
        let channels = self.gain.len();
        let mut count = 0usize;
        let mut mean = Array1::<f64>::zeros(channels);
        for x in inputs {
            let (_, t_len, f_len) = x.dim();
            count += t_len * f_len;
            for c in 0..channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        mean[c] += x[[c, t, f]];
                    }
                }
            }
        }
        let n = count as f64;
        mean.mapv_inplace(|v| v / n);
        let mut var = Array1::<f64>::zeros(channels);
        for x in inputs {
            let (_, t_len, f_len) = x.dim();
            for c in 0..channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        let d = x[[c, t, f]] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
        }
        var.mapv_inplace(|v| v / n);

        for c in 0..channels {
            self.running_mean[c] = BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            self.running_var[c] = BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
        }

        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let mut outs = Vec::with_capacity(inputs.len());
        let mut x_hat = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut xh = x.clone();
            let (_, t_len, f_len) = x.dim();
            for c in 0..channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        xh[[c, t, f]] = (x[[c, t, f]] - mean[c]) * inv_std[c];
                    }
                }
            }
            let mut y = xh.clone();
            for c in 0..channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        y[[c, t, f]] = self.gain[c] * xh[[c, t, f]] + self.shift[c];
                    }
                }
            }
            outs.push(y);
            x_hat.push(xh);
        }
        (outs, BatchNormCache { x_hat, inv_std, count })
    }

    /// Eval mode: normalize each volume by the running statistics alone.
    pub fn forward_eval(&self, input: &Array3<f64>) -> Array3<f64> {
        let channels = self.gain.len();
        let (_, t_len, f_len) = input.dim();
        let mut out = input.clone();
        for c in 0..channels {
            let istd = 1.0 / (self.running_var[c] + NORM_EPS).sqrt();
            for t in 0..t_len {
                for f in 0..f_len {
                    out[[c, t, f]] =
                        self.gain[c] * (input[[c, t, f]] - self.running_mean[c]) * istd + self.shift[c];
                }
            }
        }
        out
    }

    /// Backward through the train-mode forward (batch statistics couple all
    /// volumes, so the whole batch comes back at once).
    pub fn backward_train(
        &self,
        cache: &BatchNormCache,
        d_outs: &[Array3<f64>],
        grad: &mut BatchNorm,
    ) -> Vec<Array3<f64>> {
        let channels = self.gain.len();
        let n = cache.count as f64;
        let mut sum_dxhat = Array1::<f64>::zeros(channels);
        let mut sum_dxhat_xhat = Array1::<f64>::zeros(channels);
        for (xh, dy) in cache.x_hat.iter().zip(d_outs) {
            let (_, t_len, f_len) = xh.dim();
            for c in 0..channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        let g = dy[[c, t, f]];
                        grad.gain[c] += g * xh[[c, t, f]];
                        grad.shift[c] += g;
                        let dxh = g * self.gain[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * xh[[c, t, f]];
                    }
                }
            }
        }
        let mut d_inputs = Vec::with_capacity(d_outs.len());
        for (xh, dy) in cache.x_hat.iter().zip(d_outs) {
            let mut dx = xh.clone();
            let (_, t_len, f_len) = xh.dim();
            for c in 0..channels {
                for t in 0..t_len {
                    for f in 0..f_len {
                        let dxh = dy[[c, t, f]] * self.gain[c];
                        dx[[c, t, f]] = cache.inv_std[c]
                            * (dxh - sum_dxhat[c] / n - xh[[c, t, f]] * sum_dxhat_xhat[c] / n);
                    }
                }
            }
            d_inputs.push(dx);
        }
        d_inputs
    }

    pub fn backward_eval(&self, d_out: &Array3<f64>) -> Array3<f64> {
        let channels = self.gain.len();
        let mut dx = d_out.clone();
        let (_, t_len, f_len) = d_out.dim();
        for c in 0..channels {
            let istd = 1.0 / (self.running_var[c] + NORM_EPS).sqrt();
            for t in 0..t_len {
                for f in 0..f_len {
                    dx[[c, t, f]] = d_out[[c, t, f]] * self.gain[c] * istd;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::arr2;

    const FD_STEP: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(42);
        let mut conv = Conv1d::init(3, 2, 3, &mut rng);
        for b in conv.bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let input = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        // scalar loss: weighted sum of outputs so every path is exercised
        let probe = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |c: &Conv1d, x: &Array2<f64>| (c.forward(x) * &probe).sum();

        let mut grad = Conv1d::zeros(3, 2, 3);
        let d_input = conv.backward(&input, &probe, &mut grad);

        // weight gradient
        for idx in [[0usize, 0, 0], [2, 1, 2], [1, 0, 1]] {
            let mut hi = conv.clone();
            hi.weight[idx] += FD_STEP;
            let mut lo = conv.clone();
            lo.weight[idx] -= FD_STEP;
            let fd = (loss(&hi, &input) - loss(&lo, &input)) / (2.0 * FD_STEP);
            assert!(rel_err(grad.weight[idx], fd) < 1e-7, "weight {idx:?}");
        }
        // input gradient
        for idx in [[0usize, 0], [4, 1], [2, 0]] {
            let mut hi = input.clone();
            hi[idx] += FD_STEP;
            let mut lo = input.clone();
            lo[idx] -= FD_STEP;
            let fd = (loss(&conv, &hi) - loss(&conv, &lo)) / (2.0 * FD_STEP);
            assert!(rel_err(d_input[idx], fd) < 1e-7, "input {idx:?}");
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(7);
        let mut ln = LayerNorm::identity(4);
        for g in ln.gain.iter_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
        let input = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let loss = |ln: &LayerNorm, x: &Array2<f64>| (ln.forward(x).0 * &probe).sum();

        let (_, cache) = ln.forward(&input);
        let mut grad = LayerNorm::zeros(4);
        let d_input = ln.backward(&cache, &probe, &mut grad);

        for idx in [[0usize, 0], [1, 3], [2, 2]] {
            let mut hi = input.clone();
            hi[idx] += FD_STEP;
            let mut lo = input.clone();
            lo[idx] -= FD_STEP;
            let fd = (loss(&ln, &hi) - loss(&ln, &lo)) / (2.0 * FD_STEP);
            assert!(rel_err(d_input[idx], fd) < 1e-6, "input {idx:?}");
        }
        for c in 0..4 {
            let mut hi = ln.clone();
            hi.gain[c] += FD_STEP;
            let mut lo = ln.clone();
            lo.gain[c] -= FD_STEP;
            let fd = (loss(&hi, &input) - loss(&lo, &input)) / (2.0 * FD_STEP);
            assert!(rel_err(grad.gain[c], fd) < 1e-6, "gain {c}");
        }
    }

    #[test]
    fn gru_step_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(19);
        let cell = GruCell::init(3, 4, &mut rng);
        let x = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let h_prev = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let probe = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let loss = |cell: &GruCell, x: &Array1<f64>, h: &Array1<f64>| {
            (cell.step(x.view(), h.view()).0 * &probe).sum()
        };

        let (_, cache) = cell.step(x.view(), h_prev.view());
        let mut grad = GruCell::zeros(3, 4);
        let (d_x, d_h_prev) = cell.step_backward(&cache, probe.view(), &mut grad);

        for i in 0..4 {
            let mut hi = x.clone();
            hi[i] += FD_STEP;
            let mut lo = x.clone();
            lo[i] -= FD_STEP;
            let fd = (loss(&cell, &hi, &h_prev) - loss(&cell, &lo, &h_prev)) / (2.0 * FD_STEP);
            assert!(rel_err(d_x[i], fd) < 1e-6, "x[{i}]");
        }
        for i in 0..3 {
            let mut hi = h_prev.clone();
            hi[i] += FD_STEP;
            let mut lo = h_prev.clone();
            lo[i] -= FD_STEP;
            let fd = (loss(&cell, &x, &hi) - loss(&cell, &x, &lo)) / (2.0 * FD_STEP);
            assert!(rel_err(d_h_prev[i], fd) < 1e-6, "h_prev[{i}]");
        }
        for idx in [[0usize, 1], [2, 3], [1, 0]] {
            let mut hi = cell.clone();
            hi.w_cand[idx] += FD_STEP;
            let mut lo = cell.clone();
            lo.w_cand[idx] -= FD_STEP;
            let fd = (loss(&hi, &x, &h_prev) - loss(&lo, &x, &h_prev)) / (2.0 * FD_STEP);
            assert!(rel_err(grad.w_cand[idx], fd) < 1e-6, "w_cand {idx:?}");
        }
        for idx in [[1usize, 1], [2, 0]] {
            let mut hi = cell.clone();
            hi.u_update[idx] += FD_STEP;
            let mut lo = cell.clone();
            lo.u_update[idx] -= FD_STEP;
            let fd = (loss(&hi, &x, &h_prev) - loss(&lo, &x, &h_prev)) / (2.0 * FD_STEP);
            assert!(rel_err(grad.u_update[idx], fd) < 1e-6, "u_update {idx:?}");
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(5);
        let conv = Conv2d::init(2, 2, 3, 3, &mut rng);
        let input = Array3::from_shape_fn((2, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let probe = Array3::from_shape_fn((2, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x) * &probe).sum();

        let mut grad = Conv2d::zeros(2, 2, 3, 3);
        let d_input = conv.backward(&input, &probe, &mut grad);

        for idx in [[0usize, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut hi = conv.clone();
            hi.weight[idx] += FD_STEP;
            let mut lo = conv.clone();
            lo.weight[idx] -= FD_STEP;
            let fd = (loss(&hi, &input) - loss(&lo, &input)) / (2.0 * FD_STEP);
            assert!(rel_err(grad.weight[idx], fd) < 1e-7, "weight {idx:?}");
        }
        for idx in [[0usize, 0, 0], [1, 3, 2]] {
            let mut hi = input.clone();
            hi[idx] += FD_STEP;
            let mut lo = input.clone();
            lo[idx] -= FD_STEP;
            let fd = (loss(&conv, &hi) - loss(&conv, &lo)) / (2.0 * FD_STEP);
            assert!(rel_err(d_input[idx], fd) < 1e-7, "input {idx:?}");
        }
    }

    #[test]
    fn batch_norm_train_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(23);
        let bn = BatchNorm::identity(2);
        let inputs = vec![
            Array3::from_shape_fn((2, 3, 2), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0)),
        ];
        let probes = vec![
            Array3::from_shape_fn((2, 3, 2), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0)),
        ];
        let loss = |bn: &BatchNorm, xs: &[Array3<f64>]| {
            let mut b = bn.clone();
            let (ys, _) = b.forward_train(xs);
            ys.iter().zip(&probes).map(|(y, p)| (y * p).sum()).sum::<f64>()
        };

        let mut bn_train = bn.clone();
        let (_, cache) = bn_train.forward_train(&inputs);
        let mut grad = BatchNorm::zeros(2);
        let d_inputs = bn.backward_train(&cache, &probes, &mut grad);

        for (vi, idx) in [(0usize, [0usize, 0, 0]), (1, [1, 1, 1]), (0, [1, 2, 0])] {
            let mut hi = inputs.clone();
            hi[vi][idx] += FD_STEP;
            let mut lo = inputs.clone();
            lo[vi][idx] -= FD_STEP;
            let fd = (loss(&bn, &hi) - loss(&bn, &lo)) / (2.0 * FD_STEP);
            assert!(
                rel_err(d_inputs[vi][idx], fd) < 1e-6,
                "input v{vi} {idx:?}: got {} fd {}",
                d_inputs[vi][idx],
                fd
            );
        }
        for c in 0..2 {
            let mut hi = bn.clone();
            hi.gain[c] += FD_STEP;
            let mut lo = bn.clone();
            lo.gain[c] -= FD_STEP;
            let fd = (loss(&hi, &inputs) - loss(&lo, &inputs)) / (2.0 * FD_STEP);
            assert!(rel_err(grad.gain[c], fd) < 1e-6, "gain {c}");
        }
    }

    #[test]
    fn relu_zeroes_negative_gradient_paths() {
        let pre = arr2(&[[-1.0, 2.0], [0.0, 3.0]]);
        let d = relu_backward(&pre, &arr2(&[[5.0, 5.0], [5.0, 5.0]]));
        assert_eq!(d, arr2(&[[0.0, 5.0], [0.0, 5.0]]));
    }
}
