//! Layer primitives with hand-written backward passes.
//!
//! Networks are flat layer lists. Skip connections are expressed with a
//! stack: `MaxPool` pushes its (pre-pooling) input, `UpConcat` pops it and
//! concatenates it behind the upsampled activations. A layer slice can be run
//! on its own as long as every push inside it is matched by a pop.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Architecture-only description of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Stride-1 convolution with "same" zero padding; `kernel` must be odd.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Tanh,
    /// 2x2/2 max pooling; pushes its input onto the skip stack.
    MaxPool,
    /// Nearest-neighbour 2x upsampling followed by concatenation of the popped skip.
    UpConcat,
}

impl LayerKind {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out, in * k * k)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        for w in conv.weight.iter_mut() {
            *w = T::from_f64(normal.sample(rng));
        }
        conv
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = input.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let plane = h * w;
        let patch = self.patch_len();
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let mut col = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        for s in 0..n {
            let src = input.sample(s);
            let cols: &[T] = if self.kernel == 1 {
                src
            } else {
                im2col(src, c, h, w, self.kernel, &mut col);
                &col
            };
            let dst = out.sample_mut(s);
            T::gemm(
                self.out_channels,
                patch,
                plane,
                T::one(),
                &self.weight,
                patch as isize,
                1,
                cols,
                plane as isize,
                1,
                T::zero(),
                dst,
                plane as isize,
                1,
            );
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                let b = self.bias[o];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: &mut ConvGrad<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = input.shape();
        let plane = h * w;
        let patch = self.patch_len();
        let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
        let mut col = vec![T::zero(); if self.kernel == 1 { 0 } else { patch * plane }];
        let mut dcol = vec![T::zero(); if need_input_grad { patch * plane } else { 0 }];
        for s in 0..n {
            let src = input.sample(s);
            let go = grad_out.sample(s);
            let cols: &[T] = if self.kernel == 1 {
                src
            } else {
                im2col(src, c, h, w, self.kernel, &mut col);
                &col
            };
            // dW += dOut . col^T
            T::gemm(
                self.out_channels,
                plane,
                patch,
                T::one(),
                go,
                plane as isize,
                1,
                cols,
                1,
                plane as isize,
                T::one(),
                &mut grad.weight,
                patch as isize,
                1,
            );
            for (o, row) in go.chunks(plane).enumerate() {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                grad.bias[o] += acc;
            }
            if let Some(gi) = grad_in.as_mut() {
                // dcol = W^T . dOut
                T::gemm(
                    patch,
                    self.out_channels,
                    plane,
                    T::one(),
                    &self.weight,
                    1,
                    patch as isize,
                    go,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                let dst = gi.sample_mut(s);
                if self.kernel == 1 {
                    dst.copy_from_slice(&dcol);
                } else {
                    col2im(&dcol, c, h, w, self.kernel, dst);
                }
            }
        }
        grad_in
    }
}

fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let plane = h * w;
    for ch in 0..c {
        let chan = &src[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                let dst = &mut col[row..row + plane];
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let (lo, hi) = valid_range(w, shift);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = k / 2;
    let plane = h * w;
    dst.fill(T::zero());
    for ch in 0..c {
        let chan = &mut dst[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * plane;
                let srcp = &col[row..row + plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad as isize;
                    let (lo, hi) = valid_range(w, shift);
                    let in_row = &srcp[y * w..(y + 1) * w];
                    let base = sy as usize * w;
                    for x in lo..hi {
                        chan[base + (x as isize + shift) as usize] += in_row[x];
                    }
                }
            }
        }
    }
}

/// Output columns `x` in `[lo, hi)` for which `x + shift` is inside `[0, w)`.
fn valid_range(w: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
    (lo.min(w), hi.max(lo.min(w)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    Relu,
    Tanh,
    MaxPool,
    UpConcat,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(c) => LayerKind::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
            },
            Layer::Relu => LayerKind::Relu,
            Layer::Tanh => LayerKind::Tanh,
            Layer::MaxPool => LayerKind::MaxPool,
            Layer::UpConcat => LayerKind::UpConcat,
        }
    }

    pub fn init<R: Rng + ?Sized>(kind: LayerKind, rng: &mut R) -> Self {
        match kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => Layer::Conv(Conv2d::init(in_channels, out_channels, kernel, rng)),
            LayerKind::Relu => Layer::Relu,
            LayerKind::Tanh => Layer::Tanh,
            LayerKind::MaxPool => Layer::MaxPool,
            LayerKind::UpConcat => Layer::UpConcat,
        }
    }

    pub fn conv(&self) -> Option<&Conv2d<T>> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut Conv2d<T>> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv().map_or(0, |c| c.weight.len() + c.bias.len())
    }
}

pub fn param_count<T: Scalar>(layers: &[Layer<T>]) -> usize {
    layers.iter().map(Layer::param_count).sum()
}

/// Gradient buffers for one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T = f32> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-layer gradients aligned with a layer slice; `None` for parameter-free layers.
pub type Gradients<T> = Vec<Option<ConvGrad<T>>>;

pub fn zero_grads<T: Scalar>(layers: &[Layer<T>]) -> Gradients<T> {
    layers
        .iter()
        .map(|l| {
            l.conv().map(|c| ConvGrad {
                weight: vec![T::zero(); c.weight.len()],
                bias: vec![T::zero(); c.bias.len()],
            })
        })
        .collect()
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug)]
pub struct Trace<T = f32> {
    saved: Vec<Saved<T>>,
}

#[derive(Debug)]
enum Saved<T> {
    Conv(Tensor<T>),
    Relu(Vec<bool>),
    Tanh(Tensor<T>),
    MaxPool { argmax: Vec<u8>, in_shape: [usize; 4] },
    UpConcat { up_channels: usize },
}

/// Channel count emitted after `layers[..boundary]` and the skip-stack depth at
/// that boundary, given the input channel count.
pub fn channels_at(layers: &[LayerKind], in_channels: usize, boundary: usize) -> Result<(usize, usize)> {
    let mut ch = in_channels;
    let mut stack = Vec::new();
    for (i, kind) in layers.iter().take(boundary).enumerate() {
        match *kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels != ch {
                    return Err(Error::Model(format!(
                        "layer {i}: conv expects {in_channels} channels but receives {ch}"
                    )));
                }
                if kernel % 2 == 0 {
                    return Err(Error::Model(format!("layer {i}: kernel {kernel} is not odd")));
                }
                ch = out_channels;
            }
            LayerKind::Relu | LayerKind::Tanh => {}
            LayerKind::MaxPool => stack.push(ch),
            LayerKind::UpConcat => {
                let skip = stack.pop().ok_or_else(|| {
                    Error::Model(format!("layer {i}: upsample has no matching pooling layer"))
                })?;
                ch += skip;
            }
        }
    }
    Ok((ch, stack.len()))
}

/// Runs `layers` on `input`. The trace is only recorded when `keep_trace` is set.
pub fn forward<T: Scalar>(
    layers: &[Layer<T>],
    input: Tensor<T>,
    keep_trace: bool,
) -> Result<(Tensor<T>, Option<Trace<T>>)> {
    let mut x = input;
    let mut stack: Vec<Tensor<T>> = Vec::new();
    let mut saved = Vec::with_capacity(if keep_trace { layers.len() } else { 0 });
    for layer in layers {
        x = match layer {
            Layer::Conv(conv) => {
                let out = conv.forward(&x)?;
                if keep_trace {
                    saved.push(Saved::Conv(x));
                }
                out
            }
            Layer::Relu => {
                let mut mask = Vec::new();
                if keep_trace {
                    mask.reserve(x.data().len());
                }
                for v in x.data_mut() {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    if keep_trace {
                        mask.push(on);
                    }
                }
                if keep_trace {
                    saved.push(Saved::Relu(mask));
                }
                x
            }
            Layer::Tanh => {
                for v in x.data_mut() {
                    *v = v.tanh();
                }
                if keep_trace {
                    saved.push(Saved::Tanh(x.clone()));
                }
                x
            }
            Layer::MaxPool => {
                let (out, argmax) = max_pool(&x)?;
                if keep_trace {
                    saved.push(Saved::MaxPool {
                        argmax,
                        in_shape: x.shape(),
                    });
                }
                stack.push(x);
                out
            }
            Layer::UpConcat => {
                let skip = stack
                    .pop()
                    .ok_or_else(|| Error::Model("upsample without a matching pooling layer".into()))?;
                let up_channels = x.channels();
                let out = up_concat(&x, &skip)?;
                if keep_trace {
                    saved.push(Saved::UpConcat { up_channels });
                }
                out
            }
        };
    }
    if !stack.is_empty() {
        return Err(Error::Model(format!(
            "{} skip connection(s) left open at the end of the layer slice",
            stack.len()
        )));
    }
    Ok((x, keep_trace.then_some(Trace { saved })))
}

/// Back-propagates `grad` through `layers`, accumulating parameter gradients
/// into `grads`. Returns the input gradient when `need_input_grad` is set.
pub fn backward<T: Scalar>(
    layers: &[Layer<T>],
    trace: Trace<T>,
    grad: Tensor<T>,
    grads: &mut [Option<ConvGrad<T>>],
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    if trace.saved.len() != layers.len() || grads.len() != layers.len() {
        return Err(Error::Model("trace/gradient buffers do not match the layers".into()));
    }
    let mut g = grad;
    let mut skip_grads: Vec<Tensor<T>> = Vec::new();
    let mut saved = trace.saved;
    for i in (0..layers.len()).rev() {
        let entry = saved.pop().expect("length checked");
        let first = i == 0 && !need_input_grad;
        g = match (&layers[i], entry) {
            (Layer::Conv(conv), Saved::Conv(input)) => {
                let buf = grads[i]
                    .as_mut()
                    .ok_or_else(|| Error::Model(format!("missing gradient buffer for layer {i}")))?;
                match conv.backward(&input, &g, buf, !first) {
                    Some(gi) => gi,
                    None => return Ok(None),
                }
            }
            (Layer::Relu, Saved::Relu(mask)) => {
                for (v, on) in g.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = T::zero();
                    }
                }
                g
            }
            (Layer::Tanh, Saved::Tanh(out)) => {
                for (v, &y) in g.data_mut().iter_mut().zip(out.data()) {
                    *v = *v * (T::one() - y * y);
                }
                g
            }
            (Layer::MaxPool, Saved::MaxPool { argmax, in_shape }) => {
                let mut gi = max_pool_backward(&g, &argmax, in_shape);
                let skip = skip_grads
                    .pop()
                    .ok_or_else(|| Error::Model("pooling layer without a skip gradient".into()))?;
                for (a, b) in gi.data_mut().iter_mut().zip(skip.data()) {
                    *a += *b;
                }
                gi
            }
            (Layer::UpConcat, Saved::UpConcat { up_channels }) => {
                let (up, skip) = up_concat_backward(&g, up_channels);
                skip_grads.push(skip);
                up
            }
            _ => return Err(Error::Model(format!("trace entry {i} does not match its layer"))),
        };
    }
    Ok(need_input_grad.then_some(g))
}

fn max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u8; n * c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let cand = [src[i0], src[i0 + 1], src[i0 + w], src[i0 + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = (nc * oh + y) * ow + xx;
                dst[o] = cand[best];
                argmax[o] = best as u8;
            }
        }
    }
    Ok((out, argmax))
}

fn max_pool_backward<T: Scalar>(g: &Tensor<T>, argmax: &[u8], in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut gi = Tensor::zeros(in_shape);
    let dst = gi.data_mut();
    let src = g.data();
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let o = (nc * oh + y) * ow + xx;
                let a = argmax[o] as usize;
                let idx = base + (2 * y + a / 2) * w + 2 * xx + a % 2;
                dst[idx] = src[o];
            }
        }
    }
    gi
}

fn up_concat<T: Scalar>(x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, cx, h, w] = x.shape();
    let [ns, cs, hs, ws] = skip.shape();
    if ns != n || hs != 2 * h || ws != 2 * w {
        return Err(Error::Shape(format!(
            "cannot concatenate upsampled {:?} with skip {:?}",
            x.shape(),
            skip.shape()
        )));
    }
    let mut out = Tensor::zeros([n, cx + cs, hs, ws]);
    let plane = hs * ws;
    for s in 0..n {
        let src = x.sample(s);
        let sk = skip.sample(s);
        let dst = out.sample_mut(s);
        for ch in 0..cx {
            let from = &src[ch * h * w..(ch + 1) * h * w];
            let to = &mut dst[ch * plane..(ch + 1) * plane];
            for y in 0..hs {
                let row = &from[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..ws {
                    to[y * ws + xx] = row[xx / 2];
                }
            }
        }
        dst[cx * plane..].copy_from_slice(sk);
    }
    Ok(out)
}

fn up_concat_backward<T: Scalar>(g: &Tensor<T>, up_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, hs, ws] = g.shape();
    let (h, w) = (hs / 2, ws / 2);
    let cs = c - up_channels;
    let mut gu = Tensor::zeros([n, up_channels, h, w]);
    let mut gs = Tensor::zeros([n, cs, hs, ws]);
    let plane = hs * ws;
    for s in 0..n {
        let src = g.sample(s);
        {
            let dst = gu.sample_mut(s);
            for ch in 0..up_channels {
                let from = &src[ch * plane..(ch + 1) * plane];
                let to = &mut dst[ch * h * w..(ch + 1) * h * w];
                for y in 0..hs {
                    for xx in 0..ws {
                        to[(y / 2) * w + xx / 2] += from[y * ws + xx];
                    }
                }
            }
        }
        gs.sample_mut(s).copy_from_slice(&src[up_channels * plane..]);
    }
    (gu, gs)
}
