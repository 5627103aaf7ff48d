use std::borrow::Cow;

use rand::Rng;

use super::{gemm, join, Module, Param, SpectralNorm, Tensor, Visitor};

/// A weight matrix `[rows, cols]` with an optional bias and optional spectral
/// normalization.
#[derive(Clone, Debug)]
pub struct Weights {
    pub weight: Param,
    pub bias: Option<Param>,
    pub spectral: Option<SpectralNorm>,
    rows: usize,
    cols: usize,
}

impl Weights {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, bias: bool, spectral: bool, rng: &mut R) -> Self {
        let weight = Param::normal(vec![rows, cols], std, rng);
        let spectral = spectral.then(|| SpectralNorm::new(rows, cols, &weight.value, 30, rng));
        let bias = bias.then(|| Param::zeros(vec![rows]));
        Self { weight, bias, spectral, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The matrix used in the forward pass and its normalizer (1 without
    /// spectral normalization).
    pub fn effective(&self) -> (Cow<'_, [f32]>, f32) {
        match &self.spectral {
            None => (Cow::Borrowed(&self.weight.value), 1.0),
            Some(sn) => {
                let sigma = sn.sigma(&self.weight.value);
                let inv = 1.0 / sigma;
                (Cow::Owned(self.weight.value.iter().map(|w| w * inv).collect()), sigma)
            }
        }
    }

    pub fn refresh_spectral(&mut self) {
        if let Some(sn) = &mut self.spectral {
            sn.refresh(&self.weight.value);
        }
    }

    fn accumulate(&mut self, w_eff: &[f32], sigma: f32, grad_eff: &[f32]) {
        match &self.spectral {
            None => self.weight.grad.iter_mut().zip(grad_eff).for_each(|(g, d)| *g += d),
            Some(sn) => sn.backward(w_eff, sigma, grad_eff, &mut self.weight.grad),
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
        if let Some(sn) = &mut self.spectral {
            v.buffer(&join(prefix, "sn_u"), &[self.rows], &mut sn.u);
            v.buffer(&join(prefix, "sn_v"), &[self.cols], &mut sn.v);
        }
    }
}

/// Fully connected layer on `[B, in]` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weights: Weights,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Vec<f32>,
    batch: usize,
    w_eff: Vec<f32>,
    sigma: f32,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f32, spectral: bool, rng: &mut R) -> Self {
        Self { weights: Weights::new(outputs, inputs, std, true, spectral, rng) }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, DenseCache) {
        let (inp, out) = (self.inputs(), self.outputs());
        assert_eq!(x.shape().len(), 2);
        assert_eq!(x.shape()[1], inp, "dense input width");
        let batch = x.shape()[0];
        let (w, sigma) = self.weights.effective();
        let mut y = vec![0.0; batch * out];
        if let Some(b) = &self.weights.bias {
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(&b.value);
            }
        }
        gemm(batch, inp, out, x.data(), false, &w, true, &mut y, 1.0);
        let cache = DenseCache { input: x.data().to_vec(), batch, w_eff: w.into_owned(), sigma };
        (Tensor::new(vec![batch, out], y), cache)
    }

    pub fn backward(&mut self, cache: &DenseCache, grad: &Tensor) -> Tensor {
        let (inp, out, batch) = (self.inputs(), self.outputs(), cache.batch);
        let dy = grad.data();
        let mut dw = vec![0.0; out * inp];
        gemm(out, batch, inp, dy, true, &cache.input, false, &mut dw, 0.0);
        self.weights.accumulate(&cache.w_eff, cache.sigma, &dw);
        if let Some(b) = &mut self.weights.bias {
            for row in dy.chunks_exact(out) {
                b.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
        let mut dx = vec![0.0; batch * inp];
        gemm(batch, out, inp, dy, false, &cache.w_eff, false, &mut dx, 0.0);
        Tensor::new(vec![batch, inp], dx)
    }
}

impl Module for Dense {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.weights.visit(prefix, v);
    }
}

/// 3D convolution on `[C, B, D, H, W]`; 2D convolution is the `D = 1`,
/// depth-1 kernel case.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weights: Weights,
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: [usize; 5],
    out_spatial: [usize; 3],
    w_eff: Vec<f32>,
    sigma: f32,
}

fn out_extent(input: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(input + 2 * p >= k, "kernel {k} larger than padded input {input}+2*{p}");
    (input + 2 * p - k) / s + 1
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        std: f32,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let cols = in_channels * kernel.iter().product::<usize>();
        Self {
            weights: Weights::new(out_channels, cols, std, true, spectral, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Square 2D convolution with kernel `k`, stride `s`, padding `p`.
    pub fn new_2d<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
        std: f32,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(cin, cout, [1, k, k], [1, s, s], [0, p, p], std, spectral, rng)
    }

    /// Cubic 3D convolution with kernel `k`, stride `s`, padding `p`.
    pub fn new_3d<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
        std: f32,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(cin, cout, [k; 3], [s; 3], [p; 3], std, spectral, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| out_extent(input[a], self.kernel[a], self.stride[a], self.pad[a]))
    }

    fn im2col(&self, x: &[f32], shape: [usize; 5], out: [usize; 3]) -> Vec<f32> {
        let [c_in, batch, d, h, w] = shape;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let [od, oh, ow] = out;
        let positions = od * oh * ow;
        let width = batch * positions;
        let mut cols = vec![0.0f32; c_in * kd * kh * kw * width];
        let mut row = 0;
        for c in 0..c_in {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst_row = &mut cols[row * width..(row + 1) * width];
                        for b in 0..batch {
                            let src = &x[(c * batch + b) * d * h * w..(c * batch + b + 1) * d * h * w];
                            let dst = &mut dst_row[b * positions..(b + 1) * positions];
                            for oz in 0..od {
                                let iz = (oz * sd + kz) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let src_row = &src[(iz as usize * h + iy as usize) * w..][..w];
                                    let dst_line = &mut dst[(oz * oh + oy) * ow..][..ow];
                                    for (ox, slot) in dst_line.iter_mut().enumerate() {
                                        let ix = (ox * sw + kx) as isize - pw as isize;
                                        if ix >= 0 && ix < w as isize {
                                            *slot = src_row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], shape: [usize; 5], out: [usize; 3]) -> Vec<f32> {
        let [c_in, batch, d, h, w] = shape;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let [od, oh, ow] = out;
        let positions = od * oh * ow;
        let width = batch * positions;
        let mut dx = vec![0.0f32; c_in * batch * d * h * w];
        let mut row = 0;
        for c in 0..c_in {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src_row = &cols[row * width..(row + 1) * width];
                        for b in 0..batch {
                            let dst = &mut dx[(c * batch + b) * d * h * w..(c * batch + b + 1) * d * h * w];
                            let src = &src_row[b * positions..(b + 1) * positions];
                            for oz in 0..od {
                                let iz = (oz * sd + kz) as isize - pd as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let dst_row = &mut dst[(iz as usize * h + iy as usize) * w..][..w];
                                    let src_line = &src[(oz * oh + oy) * ow..][..ow];
                                    for (ox, &g) in src_line.iter().enumerate() {
                                        let ix = (ox * sw + kx) as isize - pw as isize;
                                        if ix >= 0 && ix < w as isize {
                                            dst_row[ix as usize] += g;
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        let s = x.shape();
        assert_eq!(s.len(), 5, "conv expects [C, B, D, H, W]");
        assert_eq!(s[0], self.in_channels, "conv input channels");
        let in_shape = [s[0], s[1], s[2], s[3], s[4]];
        let out = self.output_spatial([s[2], s[3], s[4]]);
        let cols = self.im2col(x.data(), in_shape, out);
        let width = s[1] * out.iter().product::<usize>();
        let k = self.weights.cols;
        let (w, sigma) = self.weights.effective();
        let mut y = vec![0.0; self.out_channels * width];
        if let Some(b) = &self.weights.bias {
            for (row, &bv) in y.chunks_exact_mut(width).zip(&b.value) {
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm(self.out_channels, k, width, &w, false, &cols, false, &mut y, 1.0);
        let cache = ConvCache { cols, in_shape, out_spatial: out, w_eff: w.into_owned(), sigma };
        (Tensor::new(vec![self.out_channels, s[1], out[0], out[1], out[2]], y), cache)
    }

    pub fn backward(&mut self, cache: &ConvCache, grad: &Tensor) -> Tensor {
        let width = cache.in_shape[1] * cache.out_spatial.iter().product::<usize>();
        let k = self.weights.cols;
        let dy = grad.data();
        assert_eq!(dy.len(), self.out_channels * width);
        let mut dw = vec![0.0; self.out_channels * k];
        gemm(self.out_channels, width, k, dy, false, &cache.cols, true, &mut dw, 0.0);
        self.weights.accumulate(&cache.w_eff, cache.sigma, &dw);
        if let Some(b) = &mut self.weights.bias {
            for (g, row) in b.grad.iter_mut().zip(dy.chunks_exact(width)) {
                *g += row.iter().sum::<f32>();
            }
        }
        let mut dcols = vec![0.0; k * width];
        gemm(k, self.out_channels, width, &cache.w_eff, true, dy, false, &mut dcols, 0.0);
        let dx = self.col2im(&dcols, cache.in_shape, cache.out_spatial);
        Tensor::new(cache.in_shape.to_vec(), dx)
    }
}

impl Module for Conv {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.weights.visit(prefix, v);
    }
}

/// Transposed 3D convolution (the adjoint of [`Conv`] with the same
/// geometry) on `[C, B, D, H, W]`, with a per-output-channel bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    /// Convolution from this layer's output channels to its input channels.
    adjoint: Conv,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeCache {
    input: Vec<f32>,
    in_shape: [usize; 5],
    out_spatial: [usize; 3],
}

impl ConvTranspose {
    /// Cubic kernel `k`, stride `s`, padding `p`: spatial extent
    /// `(in - 1) * s - 2p + k`.
    pub fn new_3d<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, s: usize, p: usize, std: f32, rng: &mut R) -> Self {
        let cols = cout * k * k * k;
        let adjoint = Conv {
            weights: Weights::new(cin, cols, std, false, false, rng),
            in_channels: cout,
            out_channels: cin,
            kernel: [k; 3],
            stride: [s; 3],
            pad: [p; 3],
        };
        Self { adjoint, bias: Param::zeros(vec![cout]) }
    }

    pub fn weights(&self) -> &Weights {
        &self.adjoint.weights
    }

    pub fn out_channels(&self) -> usize {
        self.adjoint.in_channels
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let c = &self.adjoint;
        [0, 1, 2].map(|a| (input[a] - 1) * c.stride[a] + c.kernel[a] - 2 * c.pad[a])
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvTransposeCache) {
        let s = x.shape();
        assert_eq!(s.len(), 5, "transposed conv expects [C, B, D, H, W]");
        assert_eq!(s[0], self.adjoint.out_channels, "transposed conv input channels");
        let in_shape = [s[0], s[1], s[2], s[3], s[4]];
        let out = self.output_spatial([s[2], s[3], s[4]]);
        let width = s[1] * s[2] * s[3] * s[4];
        let k = self.adjoint.weights.cols;
        let mut cols = vec![0.0; k * width];
        gemm(k, s[0], width, &self.adjoint.weights.weight.value, true, x.data(), false, &mut cols, 0.0);
        let cout = self.out_channels();
        let out_shape = [cout, s[1], out[0], out[1], out[2]];
        let mut y = self.adjoint.col2im(&cols, out_shape, [s[2], s[3], s[4]]);
        let per = y.len() / cout;
        for (row, &b) in y.chunks_exact_mut(per).zip(&self.bias.value) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let cache = ConvTransposeCache { input: x.data().to_vec(), in_shape, out_spatial: out };
        (Tensor::new(out_shape.to_vec(), y), cache)
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache, grad: &Tensor) -> Tensor {
        let [cin, batch, d, h, w] = cache.in_shape;
        let cout = self.out_channels();
        let out = cache.out_spatial;
        let dy = grad.data();
        let per = dy.len() / cout;
        for (g, row) in self.bias.grad.iter_mut().zip(dy.chunks_exact(per)) {
            *g += row.iter().sum::<f32>();
        }
        let cols = self.adjoint.im2col(dy, [cout, batch, out[0], out[1], out[2]], [d, h, w]);
        let width = batch * d * h * w;
        let k = self.adjoint.weights.cols;
        gemm(cin, width, k, &cache.input, false, &cols, true, &mut self.adjoint.weights.weight.grad, 1.0);
        let mut dx = vec![0.0; cin * width];
        gemm(cin, k, width, &self.adjoint.weights.weight.value, false, &cols, false, &mut dx, 0.0);
        Tensor::new(cache.in_shape.to_vec(), dx)
    }
}

impl Module for ConvTranspose {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.adjoint.weights.visit(prefix, v);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization over `[C, B, ...]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    momentum: f32,
    eps: f32,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// averages; evaluation mode uses the frozen running averages.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, BatchNormCache) {
        let c = self.channels();
        assert_eq!(x.shape()[0], c, "batch norm channels");
        let m = x.len() / c;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let src = &x.data()[ch * m..(ch + 1) * m];
            let (mean, var) = if train {
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                let mo = self.momentum;
                self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * mean as f32;
                self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * unbiased as f32;
                (mean as f32, var as f32)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let xh = &mut xhat[ch * m..(ch + 1) * m];
            let dst = &mut y[ch * m..(ch + 1) * m];
            for ((o, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                *h = (v - mean) * is;
                *o = g * *h + b;
            }
        }
        (Tensor::new(x.shape().to_vec(), y), BatchNormCache { xhat, inv_std, train })
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad: &Tensor) -> Tensor {
        let c = self.channels();
        let m = grad.len() / c;
        let mut dx = vec![0.0; grad.len()];
        for ch in 0..c {
            let dy = &grad.data()[ch * m..(ch + 1) * m];
            let xh = &cache.xhat[ch * m..(ch + 1) * m];
            let sum_dy: f32 = dy.iter().sum();
            let sum_dy_xh: f32 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            let dst = &mut dx[ch * m..(ch + 1) * m];
            if cache.train {
                let scale = g * is / m as f32;
                for ((o, &d), &h) in dst.iter_mut().zip(dy).zip(xh) {
                    *o = scale * (m as f32 * d - sum_dy - h * sum_dy_xh);
                }
            } else {
                for (o, &d) in dst.iter_mut().zip(dy) {
                    *o = g * is * d;
                }
            }
        }
        Tensor::new(grad.shape().to_vec(), dx)
    }
}

impl Module for BatchNorm {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let c = self.channels();
        v.param(&join(prefix, "gamma"), &mut self.gamma);
        v.param(&join(prefix, "beta"), &mut self.beta);
        v.buffer(&join(prefix, "running_mean"), &[c], &mut self.running_mean);
        v.buffer(&join(prefix, "running_var"), &[c], &mut self.running_var);
    }
}

pub fn relu(x: Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    Tensor::new(shape, x.into_data().into_iter().map(|v| v.max(0.0)).collect())
}

/// `output` is the forward result; its sign pattern equals the input's.
pub fn relu_backward(output: &Tensor, grad: Tensor) -> Tensor {
    let shape = grad.shape().to_vec();
    let data = grad.into_data().into_iter().zip(output.data()).map(|(g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(shape, data)
}

pub fn leaky_relu(x: Tensor, slope: f32) -> Tensor {
    let shape = x.shape().to_vec();
    Tensor::new(shape, x.into_data().into_iter().map(|v| if v > 0.0 { v } else { slope * v }).collect())
}

pub fn leaky_relu_backward(output: &Tensor, grad: Tensor, slope: f32) -> Tensor {
    let shape = grad.shape().to_vec();
    let data =
        grad.into_data().into_iter().zip(output.data()).map(|(g, &y)| if y > 0.0 { g } else { slope * g }).collect();
    Tensor::new(shape, data)
}

/// Logistic function, clamped so saturated f32 results stay inside `(0, 1)`.
pub fn sigmoid(x: Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    let hi = 1.0 - f32::EPSILON / 2.0;
    Tensor::new(shape, x.into_data().into_iter().map(|v| (1.0 / (1.0 + (-v).exp())).clamp(f32::MIN_POSITIVE, hi)).collect())
}

pub fn sigmoid_backward(output: &Tensor, grad: Tensor) -> Tensor {
    let shape = grad.shape().to_vec();
    let data = grad.into_data().into_iter().zip(output.data()).map(|(g, &y)| g * y * (1.0 - y)).collect();
    Tensor::new(shape, data)
}

/// `[C, B, D, H, W]` to `[B, C*D*H*W]`.
pub fn flatten(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, b) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for bi in 0..b {
            out[(bi * c + ch) * sp..][..sp].copy_from_slice(&x.data()[(ch * b + bi) * sp..][..sp]);
        }
    }
    Tensor::new(vec![b, c * sp], out)
}

/// Inverse of [`flatten`] for the given channel count and spatial extent.
pub fn unflatten(x: &Tensor, channels: usize, spatial: [usize; 3]) -> Tensor {
    let b = x.shape()[0];
    let sp: usize = spatial.iter().product();
    assert_eq!(x.shape()[1], channels * sp);
    let mut out = vec![0.0; x.len()];
    for ch in 0..channels {
        for bi in 0..b {
            out[(ch * b + bi) * sp..][..sp].copy_from_slice(&x.data()[(bi * channels + ch) * sp..][..sp]);
        }
    }
    Tensor::new(vec![channels, b, spatial[0], spatial[1], spatial[2]], out)
}
