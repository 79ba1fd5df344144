//! Layer primitives with hand-written backward passes.
//!
//! Every layer has two forward paths: `eval` is pure and used for
//! inference, `forward` records what `backward` needs. Parameter gradients
//! accumulate until the optimizer clears them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use super::tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: String, shape: &[usize], value: Vec<T>) -> Self {
        let len = shape.iter().product();
        assert_eq!(value.len(), len);
        Self {
            name,
            shape: shape.to_vec(),
            value,
            grad: vec![T::zero(); len],
        }
    }

    pub fn zeros(name: String, shape: &[usize]) -> Self {
        Self::new(name, shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn filled(name: String, shape: &[usize], v: T) -> Self {
        Self::new(name, shape, vec![v; shape.iter().product()])
    }

    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    pub fn gaussian<R: Rng + ?Sized>(name: String, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Dense,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Relu,
    BatchNorm,
    Standardize,
    Flatten,
    Residual,
    Concat,
    Sequential,
}

/// Node counts of a layer graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub conv: usize,
    pub dense: usize,
    pub max_pool: usize,
    pub avg_pool: usize,
    pub global_avg_pool: usize,
    pub relu: usize,
    pub batch_norm: usize,
    pub standardize: usize,
    pub flatten: usize,
    pub residual: usize,
    pub concat: usize,
}

impl Census {
    pub fn count(&mut self, kind: LayerKind) {
        match kind {
            LayerKind::Conv => self.conv += 1,
            LayerKind::Dense => self.dense += 1,
            LayerKind::MaxPool => self.max_pool += 1,
            LayerKind::AvgPool => self.avg_pool += 1,
            LayerKind::GlobalAvgPool => self.global_avg_pool += 1,
            LayerKind::Relu => self.relu += 1,
            LayerKind::BatchNorm => self.batch_norm += 1,
            LayerKind::Standardize => self.standardize += 1,
            LayerKind::Flatten => self.flatten += 1,
            LayerKind::Residual => self.residual += 1,
            LayerKind::Concat => self.concat += 1,
            LayerKind::Sequential => {}
        }
    }

    /// Convolution plus fully connected layers.
    pub fn weighted(&self) -> usize {
        self.conv + self.dense
    }

    /// Windowed pooling layers (global pooling excluded).
    pub fn pooling(&self) -> usize {
        self.max_pool + self.avg_pool
    }
}

pub trait Layer<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> LayerKind;
    /// Inference-mode forward pass.
    fn eval(&self, x: &Tensor<T>) -> Tensor<T>;
    /// Training-mode forward pass; caches what `backward` needs.
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T>;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
    /// Visits every persistent array: parameters and buffers.
    fn visit_state(&self, _f: &mut dyn FnMut(&str, &[usize], &[T])) {}
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&str, &[usize], &mut [T])) {}
    fn census(&self, c: &mut Census) {
        c.count(self.kind());
    }
}

fn visit_param<T: Scalar>(p: &Param<T>, f: &mut dyn FnMut(&str, &[usize], &[T])) {
    f(&p.name, &p.shape, &p.value);
}

fn visit_param_mut<T: Scalar>(p: &mut Param<T>, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
    f(&p.name, &p.shape, &mut p.value);
}

/// Number of batch chunks used for parallel gradient accumulation. Depends
/// only on the batch size so reductions are schedule independent.
fn chunk_len(n: usize) -> usize {
    n.div_ceil(n.clamp(1, 8))
}

pub struct Conv2d<T> {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let name = name.into();
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = Param::gaussian(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel.0, kernel.1],
            fan_in,
            rng,
        );
        let bias = bias.then(|| Param::zeros(format!("{name}.bias"), &[out_channels]));
        Self {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "{}: input {h}x{w} smaller than kernel", self.name);
        ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
    }

    fn pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Valid output-column range for kernel column `kx`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (sw, pw) = (self.stride.1, self.padding.1);
        let lo = if pw > kx { (pw - kx).div_ceil(sw) } else { 0 };
        let hi = if w + pw > kx { ((w - 1 + pw - kx) / sw + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut col[((c * kh + ky) * kw + kx) * p..][..p];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let out = &mut row[oy * ow..(oy + 1) * ow];
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        for ox in lo..hi {
                            out[ox] = src[ox * sw + kx - pw];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &col[((c * kh + ky) * kw + kx) * p..][..p];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            dst[ox * sw + kx - pw] += src[ox];
                        }
                    }
                }
            }
        }
    }

    fn compute(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.name);
        let (oh, ow) = self.output_hw(h, w);
        let (p, k, oc) = (oh * ow, self.patch_len(), self.out_channels);
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        let pointwise = self.pointwise();
        let col_len = if pointwise { 0 } else { k * p };
        out.data
            .par_chunks_mut(oc * p)
            .zip(x.data.par_chunks(c * h * w))
            .for_each_init(
                || vec![T::zero(); col_len],
                |col, (y, xi)| {
                    let cols: &[T] = if pointwise {
                        xi
                    } else {
                        self.im2col(xi, h, w, oh, ow, col);
                        col
                    };
                    gemm(false, false, oc, p, k, T::one(), &self.weight.value, cols, T::zero(), y);
                    if let Some(b) = &self.bias {
                        for (o, plane) in y.chunks_mut(p).enumerate() {
                            plane.iter_mut().for_each(|v| *v += b.value[o]);
                        }
                    }
                },
            );
        out
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Conv
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.compute(x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward without forward");
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = self.output_hw(h, w);
        let (p, k, oc) = (oh * ow, self.patch_len(), self.out_channels);
        let (in_len, out_len) = (c * h * w, oc * p);
        let chunk = chunk_len(n);
        let pointwise = self.pointwise();
        let weight = &self.weight.value;
        let has_bias = self.bias.is_some();

        let mut dx = Tensor::zeros(&x.shape);
        let partials: Vec<(Vec<T>, Vec<T>)> = dx
            .data
            .par_chunks_mut(chunk * in_len)
            .zip(x.data.par_chunks(chunk * in_len))
            .zip(grad.data.par_chunks(chunk * out_len))
            .map(|((dxc, xc), gc)| {
                let mut dw = vec![T::zero(); weight.len()];
                let mut db = vec![T::zero(); if has_bias { oc } else { 0 }];
                let mut col = vec![T::zero(); if pointwise { 0 } else { k * p }];
                let mut dcol = vec![T::zero(); if pointwise { 0 } else { k * p }];
                for ((dxs, xs), gs) in dxc
                    .chunks_mut(in_len)
                    .zip(xc.chunks(in_len))
                    .zip(gc.chunks(out_len))
                {
                    let cols: &[T] = if pointwise {
                        xs
                    } else {
                        self.im2col(xs, h, w, oh, ow, &mut col);
                        &col
                    };
                    gemm(false, true, oc, k, p, T::one(), gs, cols, T::one(), &mut dw);
                    if has_bias {
                        for (o, plane) in gs.chunks(p).enumerate() {
                            db[o] += plane.iter().copied().sum::<T>();
                        }
                    }
                    if pointwise {
                        gemm(true, false, k, p, oc, T::one(), weight, gs, T::zero(), dxs);
                    } else {
                        gemm(true, false, k, p, oc, T::one(), weight, gs, T::zero(), &mut dcol);
                        self.col2im(&dcol, h, w, oh, ow, dxs);
                    }
                }
                (dw, db)
            })
            .collect();

        for (dw, db) in partials {
            for (g, d) in self.weight.grad.iter_mut().zip(dw) {
                *g += d;
            }
            if let Some(b) = &mut self.bias {
                for (g, d) in b.grad.iter_mut().zip(db) {
                    *g += d;
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_param(&self.weight, f);
        if let Some(b) = &self.bias {
            visit_param(b, f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_param_mut(&mut self.weight, f);
        if let Some(b) = &mut self.bias {
            visit_param_mut(b, f);
        }
    }
}

/// Fully connected layer on `[N, F]` inputs.
pub struct Dense<T> {
    name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let name = name.into();
        Self {
            weight: Param::gaussian(format!("{name}.weight"), &[out_features, in_features], in_features, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
            name,
            in_features,
            out_features,
            input: None,
        }
    }

    fn compute(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, f) = x.dims2();
        assert_eq!(f, self.in_features, "{}: feature mismatch", self.name);
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for row in y.data.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(false, true, n, self.out_features, f, T::one(), &x.data, &self.weight.value, T::one(), &mut y.data);
        y
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Dense
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.compute(x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward without forward");
        let (n, f) = x.dims2();
        let o = self.out_features;
        gemm(true, false, o, f, n, T::one(), &grad.data, &x.data, T::one(), &mut self.weight.grad);
        for row in grad.data.chunks(o) {
            for (b, &g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(false, false, n, f, o, T::one(), &grad.data, &self.weight.value, T::zero(), &mut dx.data);
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_param(&self.weight, f);
        visit_param(&self.bias, f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_param_mut(&mut self.weight, f);
        visit_param_mut(&mut self.bias, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    /// Average over the full window, padding counted as zeros.
    Avg,
}

pub struct Pool2d {
    name: String,
    pub mode: PoolMode,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    in_shape: Option<Vec<usize>>,
    argmax: Vec<usize>,
}

impl Pool2d {
    pub fn new(
        name: impl Into<String>,
        mode: PoolMode,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self {
            name: name.into(),
            mode,
            kernel,
            stride,
            padding,
            in_shape: None,
            argmax: Vec::new(),
        }
    }

    pub fn max(name: impl Into<String>, k: usize, s: usize) -> Self {
        Self::new(name, PoolMode::Max, (k, k), (s, s), (0, 0))
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "{}: input {h}x{w} smaller than window", self.name);
        ((h + 2 * ph - kh) / self.stride.0 + 1, (w + 2 * pw - kw) / self.stride.1 + 1)
    }

    /// In-bounds input rows and columns of the window at `(oy, ox)`.
    fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = (oy * self.stride.0) as isize - self.padding.0 as isize;
        let x0 = (ox * self.stride.1) as isize - self.padding.1 as isize;
        let ys = y0.max(0) as usize..((y0 + self.kernel.0 as isize).min(h as isize)).max(0) as usize;
        let xs = x0.max(0) as usize..((x0 + self.kernel.1 as isize).min(w as isize)).max(0) as usize;
        (ys, xs)
    }

    fn compute<T: Scalar>(&self, x: &Tensor<T>, mut argmax: Option<&mut Vec<usize>>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = self.output_hw(h, w);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.resize(y.len(), 0);
        }
        let area = T::from_f64((self.kernel.0 * self.kernel.1) as f64);
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (ys, xs) = self.window(oy, ox, h, w);
                    let o = (plane * oh + oy) * ow + ox;
                    match self.mode {
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            let mut at = 0;
                            for iy in ys {
                                for ix in xs.clone() {
                                    let v = src[iy * w + ix];
                                    if v > best || (v.is_nan() && !best.is_nan()) {
                                        best = v;
                                        at = iy * w + ix;
                                    }
                                }
                            }
                            y.data[o] = best;
                            if let Some(a) = argmax.as_deref_mut() {
                                a[o] = plane * h * w + at;
                            }
                        }
                        PoolMode::Avg => {
                            let mut s = T::zero();
                            for iy in ys {
                                for ix in xs.clone() {
                                    s += src[iy * w + ix];
                                }
                            }
                            y.data[o] = s / area;
                        }
                    }
                }
            }
        }
        y
    }
}

impl<T: Scalar> Layer<T> for Pool2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        match self.mode {
            PoolMode::Max => LayerKind::MaxPool,
            PoolMode::Avg => LayerKind::AvgPool,
        }
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x, None)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut argmax = std::mem::take(&mut self.argmax);
        let y = self.compute(x, Some(&mut argmax));
        self.argmax = argmax;
        self.in_shape = Some(x.shape.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.in_shape.take().expect("backward without forward");
        let mut dx = Tensor::zeros(&shape);
        match self.mode {
            PoolMode::Max => {
                for (&src, &g) in self.argmax.iter().zip(&grad.data) {
                    dx.data[src] += g;
                }
            }
            PoolMode::Avg => {
                let (n, c, h, w) = dx.dims4();
                let (oh, ow) = self.output_hw(h, w);
                let area = T::from_f64((self.kernel.0 * self.kernel.1) as f64);
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad.data[(plane * oh + oy) * ow + ox] / area;
                            let (ys, xs) = self.window(oy, ox, h, w);
                            for iy in ys {
                                for ix in xs.clone() {
                                    dx.data[plane * h * w + iy * w + ix] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
pub struct GlobalAvgPool {
    name: String,
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            in_shape: None,
        }
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::GlobalAvgPool
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let area = T::from_f64((h * w) as f64);
        let data = x
            .data
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / area)
            .collect();
        Tensor::from_vec(&[n, c], data)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.in_shape = Some(x.shape.clone());
        self.eval(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.in_shape.take().expect("backward without forward");
        let mut dx = Tensor::zeros(&shape);
        let (_, _, h, w) = dx.dims4();
        let area = T::from_f64((h * w) as f64);
        for (plane, &g) in dx.data.chunks_mut(h * w).zip(&grad.data) {
            plane.fill(g / area);
        }
        dx
    }
}

pub struct Relu {
    name: String,
    mask: Vec<bool>,
}

impl Relu {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            mask: Vec::new(),
        }
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Relu
    }

    // NaN passes through so a diverged run shows up in the loss.
    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = x.data.iter().map(|&v| v > T::zero() || v.is_nan()).collect();
        self.eval(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let data = grad
            .data
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor::from_vec(&grad.shape, data)
    }
}

/// `[N, ...] -> [N, F]`.
pub struct Flatten {
    name: String,
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            in_shape: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Flatten {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Flatten
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone().reshape(&[x.batch(), x.item_len()])
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.in_shape = Some(x.shape.clone());
        self.eval(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.in_shape.take().expect("backward without forward");
        grad.clone().reshape(&shape)
    }
}

/// Per-sample standardization: every item is shifted to zero mean and scaled
/// to unit variance, with `eps` flooring the variance of flat images.
pub struct Standardize<T> {
    name: String,
    pub eps: f64,
    /// Normalized output and `1 / sqrt(var + eps)` per item.
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> Standardize<T> {
    pub fn new(name: impl Into<String>, eps: f64) -> Self {
        Self {
            name: name.into(),
            eps,
            cache: None,
        }
    }

    fn compute(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let len = x.item_len();
        let mut y = x.clone();
        let mut inv = Vec::with_capacity(x.batch());
        for item in y.data.chunks_mut(len) {
            let m = len as f64;
            let mean = item.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
            let var = item.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / m;
            let r = 1.0 / (var + self.eps).sqrt();
            for v in item.iter_mut() {
                *v = T::from_f64((v.to_f64().unwrap() - mean) * r);
            }
            inv.push(T::from_f64(r));
        }
        (y, inv)
    }
}

impl<T: Scalar> Layer<T> for Standardize<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::Standardize
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x).0
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, inv) = self.compute(x);
        self.cache = Some((y.clone(), inv));
        y
    }

    // dx = r * (g - mean(g) - y * mean(g * y))
    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (y, inv) = self.cache.take().expect("backward without forward");
        let len = y.item_len();
        let m = T::from_f64(len as f64);
        let mut dx = grad.clone();
        for ((d, yi), &r) in dx.data.chunks_mut(len).zip(y.data.chunks(len)).zip(&inv) {
            let mean_g = d.iter().copied().sum::<T>() / m;
            let mean_gy = d.iter().zip(yi).map(|(&g, &v)| g * v).sum::<T>() / m;
            for (g, &v) in d.iter_mut().zip(yi) {
                *g = r * (*g - mean_g - v * mean_gy);
            }
        }
        dx
    }
}

/// Per-channel batch normalization over `[N, C, H, W]`.
pub struct BatchNorm2d<T> {
    name: String,
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<(Vec<T>, Vec<T>, Vec<usize>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: 1e-5,
            momentum: 0.1,
            name,
            channels,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> LayerKind {
        LayerKind::BatchNorm
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "{}: channel mismatch", self.name);
        let eps = T::from_f64(self.eps);
        let scale: Vec<T> = (0..c)
            .map(|k| self.gamma.value[k] / (self.running_var[k] + eps).sqrt())
            .collect();
        let mut y = x.clone();
        for (i, plane) in y.data.chunks_mut(h * w).enumerate() {
            let k = i % c;
            let (m, s, b) = (self.running_mean[k], scale[k], self.beta.value[k]);
            plane.iter_mut().for_each(|v| *v = (*v - m) * s + b);
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "{}: channel mismatch", self.name);
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        for (i, plane) in x.data.chunks(hw).enumerate() {
            mean[i % c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, plane) in x.data.chunks(hw).enumerate() {
            let m = mean[i % c];
            var[i % c] += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + self.eps).sqrt())).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = Tensor::zeros(&x.shape);
        for (i, (plane, (xh, out))) in x
            .data
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(y.data.chunks_mut(hw)))
            .enumerate()
        {
            let k = i % c;
            let (m, s) = (T::from_f64(mean[k]), inv_std[k]);
            let (g, b) = (self.gamma.value[k], self.beta.value[k]);
            for j in 0..hw {
                xh[j] = (plane[j] - m) * s;
                out[j] = xh[j] * g + b;
            }
        }

        let mom = self.momentum;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for k in 0..c {
            let rm = self.running_mean[k].as_f64();
            let rv = self.running_var[k].as_f64();
            self.running_mean[k] = T::from_f64((1.0 - mom) * rm + mom * mean[k]);
            self.running_var[k] = T::from_f64((1.0 - mom) * rv + mom * var[k] * unbias);
        }
        self.cache = Some((xhat, inv_std, x.shape.clone()));
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std, shape) = self.cache.take().expect("backward without forward");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let count = T::from_f64((n * hw) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, (g, xh)) in grad.data.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
            let k = i % c;
            for j in 0..hw {
                dgamma[k] += g[j] * xh[j];
                dbeta[k] += g[j];
            }
        }
        let mut dx = Tensor::zeros(&shape);
        for (i, (out, (g, xh))) in dx
            .data
            .chunks_mut(hw)
            .zip(grad.data.chunks(hw).zip(xhat.chunks(hw)))
            .enumerate()
        {
            let k = i % c;
            let scale = self.gamma.value[k] * inv_std[k] / count;
            for j in 0..hw {
                out[j] = scale * (count * g[j] - dbeta[k] - xh[j] * dgamma[k]);
            }
        }
        for k in 0..c {
            self.gamma.grad[k] += dgamma[k];
            self.beta.grad[k] += dbeta[k];
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        visit_param(&self.gamma, f);
        visit_param(&self.beta, f);
        f(&format!("{}.running_mean", self.name), &[self.channels], &self.running_mean);
        f(&format!("{}.running_var", self.name), &[self.channels], &self.running_var);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        visit_param_mut(&mut self.gamma, f);
        visit_param_mut(&mut self.beta, f);
        let c = [self.channels];
        f(&format!("{}.running_mean", self.name), &c, &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &c, &mut self.running_var);
    }
}
