//! EDSR-style 3D feature learner: head conv, a stack of conv-ReLU-conv
//! residual blocks without normalization, a tail conv and a global skip from
//! the head output.
//!
//! All convolutions are 3×3×3, stride 1, zero padding 1.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureVolume;
use crate::volume::Volume;

pub const TAPS: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub n_res_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            n_res_blocks: 16,
        }
    }
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        Self {
            channels: 4,
            n_res_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.n_res_blocks == 0 {
            return Err(Error::Config(format!(
                "encoder needs channels >= 1 and n_res_blocks >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A 3×3×3 convolution. `weight` is laid out `[tap][in][out]` with
/// `tap = (dz * 3 + dx) * 3 + dy`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub struct ConvGrads {
    pub input: Option<FeatureVolume>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; TAPS * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// Centre tap is the identity matrix (requires `in == out`), everything else zero.
    pub fn identity(channels: usize) -> Self {
        let mut conv = Self::zeros(channels, channels);
        let centre = 13 * channels * channels;
        for c in 0..channels {
            conv.weight[centre + c * channels + c] = 1.0;
        }
        conv
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((TAPS * in_channels) as f64).sqrt();
        let mut conv = Self::zeros(in_channels, out_channels);
        for w in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
            *w = rng.gen_range(-bound..=bound);
        }
        conv
    }

    fn check_input(&self, input: &FeatureVolume) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureVolume) -> Result<FeatureVolume> {
        self.check_input(input)?;
        let [h, w, d] = input.dims();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let padded = pad(input);
        let (ph, pw) = (h + 2, w + 2);
        let mut out = vec![0.0; h * w * d * cout];
        out.par_chunks_mut(h * w * cout)
            .enumerate()
            .for_each(|(z, plane)| {
                for x in 0..h {
                    for y in 0..w {
                        let acc = &mut plane[(x * w + y) * cout..(x * w + y + 1) * cout];
                        acc.copy_from_slice(&self.bias);
                        for dz in 0..3 {
                            for dx in 0..3 {
                                for dy in 0..3 {
                                    let tap = (dz * 3 + dx) * 3 + dy;
                                    let src = (((z + dz) * ph + x + dx) * pw + y + dy) * cin;
                                    let inp = &padded[src..src + cin];
                                    let wt = &self.weight[tap * cin * cout..(tap + 1) * cin * cout];
                                    for (ci, &a) in inp.iter().enumerate() {
                                        let row = &wt[ci * cout..(ci + 1) * cout];
                                        for (o, &wv) in acc.iter_mut().zip(row) {
                                            *o += a * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        FeatureVolume::new(input.dims(), cout, out)
    }

    /// Gradients of `sum(dout ⊙ forward(input))`. Per-slice partial sums are
    /// reduced in slice order, so the result does not depend on thread count.
    pub fn backward(&self, input: &FeatureVolume, dout: &FeatureVolume, need_input: bool) -> Result<ConvGrads> {
        self.check_input(input)?;
        if dout.dims() != input.dims() || dout.channels() != self.out_channels {
            return Err(Error::Shape("conv gradient does not match output shape".into()));
        }
        let [h, w, d] = input.dims();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let (ph, pw) = (h + 2, w + 2);
        let padded = pad(input);
        let dgrid = dout.data();

        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
            .into_par_iter()
            .map(|z| {
                let mut gw = vec![0.0; TAPS * cin * cout];
                let mut gb = vec![0.0; cout];
                for x in 0..h {
                    for y in 0..w {
                        let g = &dgrid[((z * h + x) * w + y) * cout..((z * h + x) * w + y + 1) * cout];
                        for (b, &gv) in gb.iter_mut().zip(g) {
                            *b += gv;
                        }
                        for dz in 0..3 {
                            for dx in 0..3 {
                                for dy in 0..3 {
                                    let tap = (dz * 3 + dx) * 3 + dy;
                                    let src = (((z + dz) * ph + x + dx) * pw + y + dy) * cin;
                                    let inp = &padded[src..src + cin];
                                    let gwt = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                                    for (ci, &a) in inp.iter().enumerate() {
                                        let row = &mut gwt[ci * cout..(ci + 1) * cout];
                                        for (r, &gv) in row.iter_mut().zip(g) {
                                            *r += a * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (gw, gb)
            })
            .collect();
        let mut weight = vec![0.0; TAPS * cin * cout];
        let mut bias = vec![0.0; cout];
        for (gw, gb) in &partials {
            for (a, b) in weight.iter_mut().zip(gw) {
                *a += b;
            }
            for (a, b) in bias.iter_mut().zip(gb) {
                *a += b;
            }
        }

        let input_grad = if need_input {
            // Correlate the padded output gradient with the flipped kernel.
            let dpad = pad(dout);
            let mut gin = vec![0.0; h * w * d * cin];
            gin.par_chunks_mut(h * w * cin)
                .enumerate()
                .for_each(|(z, plane)| {
                    for x in 0..h {
                        for y in 0..w {
                            let acc = &mut plane[(x * w + y) * cin..(x * w + y + 1) * cin];
                            for dz in 0..3 {
                                for dx in 0..3 {
                                    for dy in 0..3 {
                                        let tap = (dz * 3 + dx) * 3 + dy;
                                        let src = (((z + 2 - dz) * ph + x + 2 - dx) * pw + y + 2 - dy) * cout;
                                        let g = &dpad[src..src + cout];
                                        let wt = &self.weight[tap * cin * cout..(tap + 1) * cin * cout];
                                        for (ci, a) in acc.iter_mut().enumerate() {
                                            let row = &wt[ci * cout..(ci + 1) * cout];
                                            let mut s = 0.0;
                                            for (&gv, &wv) in g.iter().zip(row) {
                                                s += gv * wv;
                                            }
                                            *a += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            Some(FeatureVolume::new(input.dims(), cin, gin)?)
        } else {
            None
        };
        Ok(ConvGrads {
            input: input_grad,
            weight,
            bias,
        })
    }
}

/// Copies `f` into a zero border of width one on every spatial side.
fn pad(f: &FeatureVolume) -> Vec<f64> {
    let [h, w, d] = f.dims();
    let c = f.channels();
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; ph * pw * (d + 2) * c];
    for z in 0..d {
        for x in 0..h {
            let src = ((z * h + x) * w) * c;
            let dst = (((z + 1) * ph + x + 1) * pw + 1) * c;
            out[dst..dst + w * c].copy_from_slice(&f.data()[src..src + w * c]);
        }
    }
    out
}

fn relu(f: &FeatureVolume) -> FeatureVolume {
    let data = f.data().iter().map(|&v| v.max(0.0)).collect();
    FeatureVolume::new(f.dims(), f.channels(), data).expect("same shape")
}

/// `x + conv2(relu(conv1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
}

struct ResBlockCache {
    input: FeatureVolume,
    pre_act: FeatureVolume,
    act: FeatureVolume,
}

impl ResBlock {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv3d::init(channels, channels, rng),
            conv2: Conv3d::init(channels, channels, rng),
        }
    }

    pub fn forward(&self, x: &FeatureVolume) -> Result<FeatureVolume> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &FeatureVolume) -> Result<(FeatureVolume, ResBlockCache)> {
        if self.conv1.out_channels != self.conv2.in_channels || self.conv2.out_channels != x.channels() {
            return Err(Error::Shape("residual block must preserve channel count".into()));
        }
        let pre_act = self.conv1.forward(x)?;
        let act = relu(&pre_act);
        let mut out = self.conv2.forward(&act)?;
        out.add_assign(x);
        Ok((
            out,
            ResBlockCache {
                input: x.clone(),
                pre_act,
                act,
            },
        ))
    }

    fn backward(&self, cache: &ResBlockCache, dout: &FeatureVolume) -> Result<(FeatureVolume, ResBlock)> {
        let g2 = self.conv2.backward(&cache.act, dout, true)?;
        let mut dact = g2.input.expect("requested");
        for (g, &p) in dact.data_mut().iter_mut().zip(cache.pre_act.data()) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let g1 = self.conv1.backward(&cache.input, &dact, true)?;
        let mut dx = g1.input.expect("requested");
        dx.add_assign(dout);
        let grads = ResBlock {
            conv1: Conv3d {
                weight: g1.weight,
                bias: g1.bias,
                ..self.conv1.clone()
            },
            conv2: Conv3d {
                weight: g2.weight,
                bias: g2.bias,
                ..self.conv2.clone()
            },
        };
        Ok((dx, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub head: Conv3d,
    pub blocks: Vec<ResBlock>,
    pub tail: Conv3d,
}

pub struct EncoderCache {
    input: FeatureVolume,
    head_out: FeatureVolume,
    blocks: Vec<ResBlockCache>,
    body_out: FeatureVolume,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let head = Conv3d::init(1, c, rng);
        let blocks = (0..cfg.n_res_blocks).map(|_| ResBlock::init(c, rng)).collect();
        let tail = Conv3d::init(c, c, rng);
        Self { head, blocks, tail }
    }

    /// Same structure, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |c: &Conv3d| Conv3d::zeros(c.in_channels, c.out_channels);
        Self {
            head: z(&self.head),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: z(&b.conv1),
                    conv2: z(&b.conv2),
                })
                .collect(),
            tail: z(&self.tail),
        }
    }

    pub fn channels(&self) -> usize {
        self.tail.out_channels
    }

    pub fn encode(&self, vol: &Volume) -> Result<FeatureVolume> {
        Ok(self.encode_cached(vol)?.0)
    }

    pub fn encode_cached(&self, vol: &Volume) -> Result<(FeatureVolume, EncoderCache)> {
        let input = FeatureVolume::from_volume(vol);
        let head_out = self.head.forward(&input)?;
        let mut x = head_out.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_cached(&x)?;
            caches.push(cache);
            x = y;
        }
        let mut out = self.tail.forward(&x)?;
        out.add_assign(&head_out);
        Ok((
            out,
            EncoderCache {
                input,
                head_out,
                blocks: caches,
                body_out: x,
            },
        ))
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the feature volume.
    pub fn backward(&self, cache: &EncoderCache, dfeat: &FeatureVolume) -> Result<Encoder> {
        let gt = self.tail.backward(&cache.body_out, dfeat, true)?;
        let mut dx = gt.input.expect("requested");
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dprev, g) = block.backward(bc, &dx)?;
            block_grads.push(g);
            dx = dprev;
        }
        block_grads.reverse();
        dx.add_assign(dfeat);
        let gh = self.head.backward(&cache.input, &dx, false)?;
        debug_assert_eq!(cache.head_out.dims(), dx.dims());
        Ok(Encoder {
            head: Conv3d {
                weight: gh.weight,
                bias: gh.bias,
                ..self.head.clone()
            },
            blocks: block_grads,
            tail: Conv3d {
                weight: gt.weight,
                bias: gt.bias,
                ..self.tail.clone()
            },
        })
    }
}
