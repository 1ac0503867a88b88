//! MLP mapping a refined latent code to an intensity residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{mat_vec_acc, outer_acc, uniform, vec_mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 5,
            hidden_dim: 256,
        }
    }
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        Self {
            n_layers: 5,
            hidden_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "decoder needs n_layers >= 2 and hidden_dim >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim × out_dim`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let b = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: uniform(in_dim * out_dim, b, rng),
            bias: uniform(out_dim, b, rng),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        vec_mat(x, &self.weight, self.out_dim, &mut y);
        for (o, b) in y.iter_mut().zip(&self.bias) {
            *o += b;
        }
        y
    }
}

/// Affine layers with a rectifier after every layer but the last; scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs to every layer (post-activation), kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// With `zero_last`, the output layer starts at zero so the decoder
    /// initially predicts a zero residual.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, cfg: &DecoderConfig, zero_last: bool, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden_dim, cfg.n_layers - 1));
        dims.push(1);
        let mut layers: Vec<Linear> = dims.windows(2).map(|p| Linear::init(p[0], p[1], rng)).collect();
        if zero_last {
            let last = layers.last_mut().expect("n_layers >= 2");
            *last = Linear::zeros(last.in_dim, 1);
        }
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn decode(&self, z: &[f64]) -> Result<f64> {
        Ok(self.decode_cached(z)?.0)
    }

    pub fn decode_cached(&self, z: &[f64]) -> Result<(f64, MlpCache)> {
        if z.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "decoder expects {} inputs, got {}",
                self.input_dim(),
                z.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = z.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&x);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(x);
            x = y;
        }
        Ok((x[0], MlpCache { inputs }))
    }

    /// Returns `∂L/∂z` and adds parameter gradients into `grads`.
    pub fn backward(&self, cache: &MlpCache, dout: f64, grads: &mut Mlp) -> Vec<f64> {
        let mut g = vec![dout];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let gl = &mut grads.layers[i];
            outer_acc(x, &g, &mut gl.weight);
            for (b, &gv) in gl.bias.iter_mut().zip(&g) {
                *b += gv;
            }
            let mut dx = vec![0.0; layer.in_dim];
            mat_vec_acc(&layer.weight, &g, &mut dx);
            if i > 0 {
                // x is the rectified output of the previous layer
                for (d, &xv) in dx.iter_mut().zip(x) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            g = dx;
        }
        g
    }
}
