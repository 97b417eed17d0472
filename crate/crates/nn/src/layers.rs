//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Spatial activations are channels-last (`[N, H, W, C]`); images enter in
//! `[N, C, H, W]` and are permuted by [`Layer::ChannelsLast`].

use rand::Rng;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running statistics updated.
    Train,
    /// Running statistics; no state mutation.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `[out, k, k, in]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub body: Vec<Layer<T>>,
    /// Empty means identity.
    pub shortcut: Vec<Layer<T>>,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    ChannelsLast,
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Linear(Linear<T>),
    Relu,
    MaxPool2d(usize),
    GlobalAvgPool,
    Residual(Residual<T>),
}

#[derive(Clone, Debug)]
pub enum Cache<T> {
    ChannelsLast,
    Conv { cols: Tensor<T>, in_shape: [usize; 4], out_hw: (usize, usize) },
    BatchNorm { xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    Linear { input: Tensor<T> },
    Relu { output: Tensor<T> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Gap { in_shape: [usize; 4] },
    Residual { body: Vec<Cache<T>>, shortcut: Vec<Cache<T>> },
}

fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(Tensor::uniform(&[output, input], kaiming_bound(input), rng)),
            bias: Param::new(Tensor::zeros(&[output])),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = T::one();
        }
        Self { weight: Param::new(w), bias: Param::new(Tensor::zeros(&[dim])) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 2 || x.dim(1) != self.in_features() {
            return Err(NnError::Shape(format!(
                "linear expects [B, {}], got {:?}",
                self.in_features(),
                x.shape()
            )));
        }
        let mut y = x.matmul(&self.weight.value, false, true)?;
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }

    fn backward(&mut self, input: &Tensor<T>, grad: &Tensor<T>, accumulate: bool, need_input: bool) -> Result<Tensor<T>> {
        if accumulate {
            let (out_f, in_f) = (self.out_features(), self.in_features());
            gemm(
                grad.data(),
                grad.rows(),
                out_f,
                true,
                input.data(),
                input.rows(),
                in_f,
                false,
                self.weight.grad.data_mut(),
                T::one(),
                T::one(),
            );
            let gb = self.bias.grad.data_mut();
            for r in 0..grad.rows() {
                for (g, &v) in gb.iter_mut().zip(grad.row(r)) {
                    *g += v;
                }
            }
        }
        if need_input {
            grad.matmul(&self.weight.value, false, false)
        } else {
            Ok(Tensor::zeros(&[0]))
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        Self {
            weight: Param::new(Tensor::uniform(&[output, kernel, kernel, input], kaiming_bound(fan_in), rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[output]))),
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(3)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(NnError::Shape(format!("conv kernel {k} larger than padded input {h}x{w}")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn im2col(&self, x: &Tensor<T>) -> Result<(Tensor<T>, [usize; 4], (usize, usize))> {
        let [n, h, w, c] = x.dims4()?;
        if c != self.in_channels() {
            return Err(NnError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let patch = k * k * c;
        let mut cols = vec![T::zero(); n * oh * ow * patch];
        let src = x.data();
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let from = ((b * h + iy as usize) * w + ix as usize) * c;
                            let to = row + (ky * k + kx) * c;
                            cols[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(&[n * oh * ow, patch], cols)?, [n, h, w, c], (oh, ow)))
    }

    fn col2im(&self, dcols: &Tensor<T>, in_shape: [usize; 4], (oh, ow): (usize, usize)) -> Tensor<T> {
        let [n, h, w, c] = in_shape;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let patch = k * k * c;
        let mut dx = vec![T::zero(); n * h * w * c];
        let src = dcols.data();
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let to = ((b * h + iy as usize) * w + ix as usize) * c;
                            let from = row + (ky * k + kx) * c;
                            for (d, &g) in dx[to..to + c].iter_mut().zip(&src[from..from + c]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[n, h, w, c], dx).expect("col2im shape")
    }

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let (cols, in_shape, (oh, ow)) = self.im2col(x)?;
        let o = self.out_channels();
        let mut y = vec![T::zero(); cols.rows() * o];
        gemm(
            cols.data(),
            cols.rows(),
            cols.cols(),
            false,
            self.weight.value.data(),
            o,
            cols.cols(),
            true,
            &mut y,
            T::one(),
            T::zero(),
        );
        if let Some(bias) = &self.bias {
            for row in y.chunks_mut(o) {
                for (v, &b) in row.iter_mut().zip(bias.value.data()) {
                    *v += b;
                }
            }
        }
        let y = Tensor::new(&[in_shape[0], oh, ow, o], y)?;
        Ok((y, Cache::Conv { cols, in_shape, out_hw: (oh, ow) }))
    }

    fn backward(
        &mut self,
        cols: &Tensor<T>,
        in_shape: [usize; 4],
        out_hw: (usize, usize),
        grad: &Tensor<T>,
        accumulate: bool,
        need_input: bool,
    ) -> Result<Tensor<T>> {
        let o = self.out_channels();
        let rows = cols.rows();
        let patch = cols.cols();
        if grad.numel() != rows * o {
            return Err(NnError::Shape(format!("conv backward grad {:?}", grad.shape())));
        }
        if accumulate {
            gemm(grad.data(), rows, o, true, cols.data(), rows, patch, false, self.weight.grad.data_mut(), T::one(), T::one());
            if let Some(bias) = &mut self.bias {
                let gb = bias.grad.data_mut();
                for row in grad.data().chunks(o) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
        }
        if !need_input {
            return Ok(Tensor::zeros(&[0]));
        }
        let mut dcols = Tensor::zeros(&[rows, patch]);
        gemm(grad.data(), rows, o, false, self.weight.value.data(), o, patch, false, dcols.data_mut(), T::one(), T::zero());
        Ok(self.col2im(&dcols, in_shape, out_hw))
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.channels() {
            return Err(NnError::Shape(format!(
                "batchnorm over {} channels, got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(c)
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let c = mean.len();
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (xr, yr) in xhat.data_mut().chunks_mut(c).zip(y.data_mut().chunks_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                xr[j] = h;
                yr[j] = g[j] * h + b[j];
            }
        }
        (y, xhat)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let c = self.check(x)?;
        let m = x.numel() / c;
        match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                for row in x.data().chunks(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let inv_m = T::one() / T::from_usize(m).unwrap();
                mean.iter_mut().for_each(|v| *v *= inv_m);
                let mut var = vec![T::zero(); c];
                for row in x.data().chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_m);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
                let (y, xhat) = self.normalize(x, &mean, &inv_std);
                let mom = self.momentum;
                let unbias = if m > 1 {
                    T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
                } else {
                    T::one()
                };
                for j in 0..c {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = (T::one() - mom) * *rm + mom * mean[j];
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = (T::one() - mom) * *rv + mom * var[j] * unbias;
                }
                Ok((y, Cache::BatchNorm { xhat, inv_std, train: true }))
            }
            Mode::Eval => {
                let inv_std: Vec<T> = self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + self.eps).sqrt())
                    .collect();
                let (y, xhat) = self.normalize(x, self.running_mean.data(), &inv_std);
                Ok((y, Cache::BatchNorm { xhat, inv_std, train: false }))
            }
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + self.eps).sqrt())
            .collect();
        Ok(self.normalize(x, self.running_mean.data(), &inv_std).0)
    }

    fn backward(
        &mut self,
        xhat: &Tensor<T>,
        inv_std: &[T],
        train: bool,
        grad: &Tensor<T>,
        accumulate: bool,
    ) -> Result<Tensor<T>> {
        let c = inv_std.len();
        let m = grad.numel() / c;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (gr, hr) in grad.data().chunks(c).zip(xhat.data().chunks(c)) {
            for j in 0..c {
                sum_dy[j] += gr[j];
                sum_dy_xhat[j] += gr[j] * hr[j];
            }
        }
        if accumulate {
            for j in 0..c {
                self.gamma.grad.data_mut()[j] += sum_dy_xhat[j];
                self.beta.grad.data_mut()[j] += sum_dy[j];
            }
        }
        let g = self.gamma.value.data();
        let mut dx = grad.clone();
        if train {
            let inv_m = T::one() / T::from_usize(m).unwrap();
            for (dr, hr) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                for j in 0..c {
                    dr[j] = g[j] * inv_std[j] * (dr[j] - inv_m * sum_dy[j] - hr[j] * inv_m * sum_dy_xhat[j]);
                }
            }
        } else {
            for dr in dx.data_mut().chunks_mut(c) {
                for j in 0..c {
                    dr[j] *= g[j] * inv_std[j];
                }
            }
        }
        Ok(dx)
    }
}

fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, h, w, c] = x.dims4()?;
    if k == 0 || h < k || w < k {
        return Err(NnError::Shape(format!("maxpool {k} on {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let src = x.data();
    let mut out = vec![T::neg_infinity(); n * oh * ow * c];
    let mut arg = vec![0usize; out.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = ((b * h + oy * k + dy) * w + ox * k + dx) * c;
                        for ch in 0..c {
                            if src[i + ch] > out[o + ch] {
                                out[o + ch] = src[i + ch];
                                arg[o + ch] = i + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[n, oh, ow, c], out)?, arg))
}

fn gap<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims4()?;
    let mut out = vec![T::zero(); n * c];
    let inv = T::one() / T::from_usize(h * w).unwrap();
    for b in 0..n {
        let o = &mut out[b * c..(b + 1) * c];
        for p in 0..h * w {
            let i = (b * h * w + p) * c;
            for (acc, &v) in o.iter_mut().zip(&x.data()[i..i + c]) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[n, c], out)
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::ChannelsLast => Ok((x.nchw_to_nhwc()?, Cache::ChannelsLast)),
            Layer::Conv2d(conv) => conv.forward(x),
            Layer::BatchNorm(bn) => bn.forward(x, mode),
            Layer::Linear(lin) => Ok((lin.apply(x)?, Cache::Linear { input: x.clone() })),
            Layer::Relu => {
                let y = relu(x);
                Ok((y.clone(), Cache::Relu { output: y }))
            }
            Layer::MaxPool2d(k) => {
                let (y, argmax) = maxpool(x, *k)?;
                Ok((y, Cache::MaxPool { argmax, in_shape: x.shape().to_vec() }))
            }
            Layer::GlobalAvgPool => Ok((gap(x)?, Cache::Gap { in_shape: x.dims4()? })),
            Layer::Residual(res) => {
                let (body_out, body) = forward_seq(&mut res.body, x, mode)?;
                let (short_out, shortcut) = forward_seq(&mut res.shortcut, x, mode)?;
                Ok((body_out.add(&short_out)?, Cache::Residual { body, shortcut }))
            }
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::ChannelsLast => x.nchw_to_nhwc(),
            Layer::Conv2d(conv) => Ok(conv.forward(x)?.0),
            Layer::BatchNorm(bn) => bn.infer(x),
            Layer::Linear(lin) => lin.apply(x),
            Layer::Relu => Ok(relu(x)),
            Layer::MaxPool2d(k) => Ok(maxpool(x, *k)?.0),
            Layer::GlobalAvgPool => gap(x),
            Layer::Residual(res) => infer_seq(&res.body, x)?.add(&infer_seq(&res.shortcut, x)?),
        }
    }

    /// Propagates `grad` (w.r.t. this layer's output) to its input. Parameter
    /// gradients are accumulated only when `accumulate` is set.
    pub fn backward(
        &mut self,
        cache: &Cache<T>,
        grad: &Tensor<T>,
        accumulate: bool,
        need_input: bool,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::ChannelsLast, Cache::ChannelsLast) => grad.nhwc_to_nchw(),
            (Layer::Conv2d(conv), Cache::Conv { cols, in_shape, out_hw }) => {
                conv.backward(cols, *in_shape, *out_hw, grad, accumulate, need_input)
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std, train }) => {
                bn.backward(xhat, inv_std, *train, grad, accumulate)
            }
            (Layer::Linear(lin), Cache::Linear { input }) => lin.backward(input, grad, accumulate, need_input),
            (Layer::Relu, Cache::Relu { output }) => {
                grad.zip_map(output, |g, y| if y > T::zero() { g } else { T::zero() })
            }
            (Layer::MaxPool2d(_), Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                for (&i, &g) in argmax.iter().zip(grad.data()) {
                    d[i] += g;
                }
                Ok(dx)
            }
            (Layer::GlobalAvgPool, Cache::Gap { in_shape }) => {
                let [n, h, w, c] = *in_shape;
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                for b in 0..n {
                    let g = grad.row(b);
                    for p in 0..h * w {
                        let i = (b * h * w + p) * c;
                        for (dv, &gv) in d[i..i + c].iter_mut().zip(g) {
                            *dv = gv * inv;
                        }
                    }
                }
                Ok(dx)
            }
            (Layer::Residual(res), Cache::Residual { body, shortcut }) => {
                let d_body = backward_seq(&mut res.body, body, grad, accumulate, true)?;
                let d_short = backward_seq(&mut res.shortcut, shortcut, grad, accumulate, true)?;
                d_body.add(&d_short)
            }
            (layer, _) => Err(NnError::Shape(format!(
                "cache does not belong to layer {}",
                layer.kind()
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::ChannelsLast => "channels_last",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Residual(_) => "residual",
        }
    }

    /// Visits trainable parameters with their dotted names.
    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Layer::Conv2d(conv) => {
                f(&format!("{prefix}.weight"), &mut conv.weight);
                if let Some(b) = &mut conv.bias {
                    f(&format!("{prefix}.bias"), b);
                }
            }
            Layer::BatchNorm(bn) => {
                f(&format!("{prefix}.weight"), &mut bn.gamma);
                f(&format!("{prefix}.bias"), &mut bn.beta);
            }
            Layer::Linear(lin) => {
                f(&format!("{prefix}.weight"), &mut lin.weight);
                f(&format!("{prefix}.bias"), &mut lin.bias);
            }
            Layer::Residual(res) => {
                for (i, l) in res.body.iter_mut().enumerate() {
                    l.visit_params_mut(&format!("{prefix}.body.{i}"), f);
                }
                for (i, l) in res.shortcut.iter_mut().enumerate() {
                    l.visit_params_mut(&format!("{prefix}.shortcut.{i}"), f);
                }
            }
            _ => {}
        }
    }

    /// Visits every persistent tensor (parameters and running statistics).
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Layer::Conv2d(conv) => {
                f(&format!("{prefix}.weight"), &conv.weight.value);
                if let Some(b) = &conv.bias {
                    f(&format!("{prefix}.bias"), &b.value);
                }
            }
            Layer::BatchNorm(bn) => {
                f(&format!("{prefix}.weight"), &bn.gamma.value);
                f(&format!("{prefix}.bias"), &bn.beta.value);
                f(&format!("{prefix}.running_mean"), &bn.running_mean);
                f(&format!("{prefix}.running_var"), &bn.running_var);
            }
            Layer::Linear(lin) => {
                f(&format!("{prefix}.weight"), &lin.weight.value);
                f(&format!("{prefix}.bias"), &lin.bias.value);
            }
            Layer::Residual(res) => {
                for (i, l) in res.body.iter().enumerate() {
                    l.visit_state(&format!("{prefix}.body.{i}"), f);
                }
                for (i, l) in res.shortcut.iter().enumerate() {
                    l.visit_state(&format!("{prefix}.shortcut.{i}"), f);
                }
            }
            _ => {}
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Layer::Conv2d(conv) => {
                f(&format!("{prefix}.weight"), &mut conv.weight.value);
                if let Some(b) = &mut conv.bias {
                    f(&format!("{prefix}.bias"), &mut b.value);
                }
            }
            Layer::BatchNorm(bn) => {
                f(&format!("{prefix}.weight"), &mut bn.gamma.value);
                f(&format!("{prefix}.bias"), &mut bn.beta.value);
                f(&format!("{prefix}.running_mean"), &mut bn.running_mean);
                f(&format!("{prefix}.running_var"), &mut bn.running_var);
            }
            Layer::Linear(lin) => {
                f(&format!("{prefix}.weight"), &mut lin.weight.value);
                f(&format!("{prefix}.bias"), &mut lin.bias.value);
            }
            Layer::Residual(res) => {
                for (i, l) in res.body.iter_mut().enumerate() {
                    l.visit_state_mut(&format!("{prefix}.body.{i}"), f);
                }
                for (i, l) in res.shortcut.iter_mut().enumerate() {
                    l.visit_state_mut(&format!("{prefix}.shortcut.{i}"), f);
                }
            }
            _ => {}
        }
    }

    /// Short structural description used for fingerprints.
    pub fn describe(&self) -> String {
        match self {
            Layer::Conv2d(c) => format!(
                "conv({}->{},k{},s{},p{},b{})",
                c.in_channels(),
                c.out_channels(),
                c.kernel,
                c.stride,
                c.padding,
                c.bias.is_some()
            ),
            Layer::BatchNorm(bn) => format!("bn({})", bn.channels()),
            Layer::Linear(l) => format!("linear({}->{})", l.in_features(), l.out_features()),
            Layer::MaxPool2d(k) => format!("maxpool({k})"),
            Layer::Residual(r) => format!(
                "res[{}|{}]",
                r.body.iter().map(Layer::describe).collect::<Vec<_>>().join(","),
                r.shortcut.iter().map(Layer::describe).collect::<Vec<_>>().join(",")
            ),
            other => other.kind().to_string(),
        }
    }
}

pub fn forward_seq<T: Scalar>(layers: &mut [Layer<T>], x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers.iter_mut() {
        let (y, cache) = layer.forward(&cur, mode)?;
        caches.push(cache);
        cur = y;
    }
    Ok((cur, caches))
}

pub fn infer_seq<T: Scalar>(layers: &[Layer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.infer(&cur)?;
    }
    Ok(cur)
}

pub fn backward_seq<T: Scalar>(
    layers: &mut [Layer<T>],
    caches: &[Cache<T>],
    grad: &Tensor<T>,
    accumulate: bool,
    need_input: bool,
) -> Result<Tensor<T>> {
    if layers.len() != caches.len() {
        return Err(NnError::Shape(format!(
            "{} caches for {} layers",
            caches.len(),
            layers.len()
        )));
    }
    // Index of the first layer whose input gradient can still reach a parameter.
    let first_param = layers
        .iter()
        .position(|l| !matches!(l, Layer::ChannelsLast | Layer::Relu | Layer::MaxPool2d(_)))
        .unwrap_or(0);
    let mut cur = grad.clone();
    for (i, (layer, cache)) in layers.iter_mut().zip(caches).enumerate().rev() {
        let need = need_input || i > first_param;
        if !need && i < first_param {
            break;
        }
        cur = layer.backward(cache, &cur, accumulate, need)?;
    }
    Ok(cur)
}
