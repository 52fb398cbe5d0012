//! Toy conditional velocity network.
//!
//! A stack of `same`-padded convolutions over the latent plus two fixed
//! coordinate channels. Every layer receives a per-channel bias that depends
//! on the prompt class (embedding table) and on `t` (linear projection of a
//! few fixed time features). Hidden layers use SiLU; the last layer is linear
//! and emits one value per latent element.
//!
//! The backward pass is hand-written and accumulates into a flat gradient
//! buffer that shares the layout of [`VelocityField::params`].

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
const COORD_CHANNELS: usize = 2;
const INPUT_CHANNELS: usize = IMAGE_CHANNELS + COORD_CHANNELS;
pub const TIME_FEATURES: usize = 4;

/// Shape of the network; serialized into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Training image side; forward accepts any spatial size.
    pub side: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            side: 16,
            hidden: 16,
            layers: 4,
            kernel: 3,
            num_classes: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerSlots {
    c_in: usize,
    c_out: usize,
    weight: usize,
    bias: usize,
    class_embed: usize,
    time_proj: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs ≥ 2 layers, hidden ≥ 1, classes ≥ 1: {self:?}"
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    fn slots(&self) -> Vec<LayerSlots> {
        let mut offset = 0;
        let k2 = self.kernel * self.kernel;
        (0..self.layers)
            .map(|l| {
                let c_in = if l == 0 { INPUT_CHANNELS } else { self.hidden };
                let c_out = if l + 1 == self.layers {
                    IMAGE_CHANNELS
                } else {
                    self.hidden
                };
                let weight = offset;
                let bias = weight + c_out * c_in * k2;
                let class_embed = bias + c_out;
                let time_proj = class_embed + self.num_classes * c_out;
                offset = time_proj + c_out * TIME_FEATURES;
                LayerSlots {
                    c_in,
                    c_out,
                    weight,
                    bias,
                    class_embed,
                    time_proj,
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.slots()
            .last()
            .map(|s| s.time_proj + s.c_out * TIME_FEATURES)
            .unwrap_or(0)
    }
}

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let pi_t = std::f64::consts::PI * t;
    [t, t * t, pi_t.sin(), pi_t.cos()]
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    class: usize,
    time: [f64; TIME_FEATURES],
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    arch: Architecture,
    slots: Vec<LayerSlots>,
    params: Vec<f64>,
}

impl VelocityField {
    /// Fan-in scaled normal initialization; the output layer starts small.
    pub fn new(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let slots = arch.slots();
        let mut params = vec![0.0; arch.num_params()];
        let k2 = arch.kernel * arch.kernel;
        for (l, s) in slots.iter().enumerate() {
            let fan_in = (s.c_in * k2) as f64;
            let gain = if l + 1 == arch.layers { 0.1 } else { 2.0f64.sqrt() };
            let std = gain / fan_in.sqrt();
            for p in &mut params[s.weight..s.bias] {
                *p = std * rng.normal();
            }
            for p in &mut params[s.class_embed..s.time_proj] {
                *p = 0.1 * rng.normal();
            }
        }
        Ok(Self { arch, slots, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "architecture expects {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self {
            arch,
            slots: arch.slots(),
            params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same network evaluated at a different parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_params(params);
        m
    }

    fn check_input(&self, z: &Tensor, class: usize) -> Result<(usize, usize)> {
        let (h, w) = match *z.shape() {
            [IMAGE_CHANNELS, h, w] if h > 0 && w > 0 => (h, w),
            ref s => return Err(Error::ShapeMismatch(format!("velocity input must be 3×H×W, got {s:?}"))),
        };
        if class >= self.arch.num_classes {
            return Err(Error::UnknownClass(format!(
                "class index {class} ≥ {}",
                self.arch.num_classes
            )));
        }
        Ok((h, w))
    }

    pub fn forward(&self, z: &Tensor, t: f64, class: usize) -> Result<Tensor> {
        self.forward_cached(z, t, class).map(|(v, _)| v)
    }

    pub fn forward_cached(&self, z: &Tensor, t: f64, class: usize) -> Result<(Tensor, ForwardCache)> {
        let (h, w) = self.check_input(z, class)?;
        let hw = h * w;
        let time = time_features(t);

        let mut x = Vec::with_capacity(INPUT_CHANNELS * hw);
        x.extend_from_slice(z.data());
        for y in 0..h {
            for _ in 0..w {
                x.push(coord(y, h));
            }
        }
        for _ in 0..h {
            for xi in 0..w {
                x.push(coord(xi, w));
            }
        }

        let mut inputs = Vec::with_capacity(self.arch.layers);
        let mut pre = Vec::with_capacity(self.arch.layers - 1);
        for (l, s) in self.slots.iter().enumerate() {
            let mut out = vec![0.0; s.c_out * hw];
            for o in 0..s.c_out {
                let b = self.channel_bias(s, o, class, &time);
                out[o * hw..(o + 1) * hw].fill(b);
            }
            conv_forward(
                &x,
                &self.params[s.weight..s.bias],
                &mut out,
                s.c_in,
                s.c_out,
                h,
                w,
                self.arch.kernel,
            );
            let is_last = l + 1 == self.arch.layers;
            inputs.push(std::mem::take(&mut x));
            if is_last {
                x = out;
            } else {
                x = out.iter().map(|&v| v * sigmoid(v)).collect();
                pre.push(out);
            }
        }

        let v = Tensor::new(vec![IMAGE_CHANNELS, h, w], x)?;
        Ok((
            v,
            ForwardCache {
                height: h,
                width: w,
                class,
                time,
                inputs,
                pre,
            },
        ))
    }

    fn channel_bias(&self, s: &LayerSlots, o: usize, class: usize, time: &[f64; TIME_FEATURES]) -> f64 {
        let p = &self.params;
        let mut b = p[s.bias + o] + p[s.class_embed + class * s.c_out + o];
        for (f, &tf) in time.iter().enumerate() {
            b += p[s.time_proj + o * TIME_FEATURES + f] * tf;
        }
        b
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        debug_assert_eq!(d_out.len(), IMAGE_CHANNELS * hw);
        debug_assert_eq!(grad.len(), self.params.len());

        let mut g = d_out.to_vec();
        for l in (0..self.arch.layers).rev() {
            let s = &self.slots[l];
            for o in 0..s.c_out {
                let total: f64 = g[o * hw..(o + 1) * hw].iter().sum();
                grad[s.bias + o] += total;
                grad[s.class_embed + cache.class * s.c_out + o] += total;
                for (f, &tf) in cache.time.iter().enumerate() {
                    grad[s.time_proj + o * TIME_FEATURES + f] += total * tf;
                }
            }
            let need_input_grad = l > 0;
            let mut d_in = if need_input_grad {
                vec![0.0; s.c_in * hw]
            } else {
                Vec::new()
            };
            conv_backward(
                &cache.inputs[l],
                &self.params[s.weight..s.bias],
                &g,
                &mut grad[s.weight..s.bias],
                need_input_grad.then_some(d_in.as_mut_slice()),
                s.c_in,
                s.c_out,
                h,
                w,
                self.arch.kernel,
            );
            if need_input_grad {
                for (d, &p) in d_in.iter_mut().zip(&cache.pre[l - 1]) {
                    let sg = sigmoid(p);
                    *d *= sg * (1.0 + p * (1.0 - sg));
                }
                g = d_in;
            }
        }
    }
}

#[inline]
fn coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Valid output index range along one axis for kernel offset `d`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    weight: &[f64],
    out: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for o in 0..c_out {
        let plane = &mut out[o * hw..(o + 1) * hw];
        for i in 0..c_in {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weight[((o * c_in + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    mut d_input: Option<&mut [f64]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for o in 0..c_out {
        let g = &d_out[o * hw..(o + 1) * hw];
        for i in 0..c_in {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((o * c_in + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[s0..s0 + (x1 - x0)];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(d_in) = d_input.as_deref_mut() {
                            let di = &mut d_in[i * hw + s0..i * hw + s0 + (x1 - x0)];
                            for (d, &gv) in di.iter_mut().zip(gr) {
                                *d += wv * gv;
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
}
