//! The full reconstruction pipeline: encode once, then per query sample the
//! latent code and input intensity, refine the code with local-aware
//! attention, decode a residual and add it to the sampled intensity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, Mlp};
use crate::encoder::{Encoder, EncoderConfig, TAPS};
use crate::error::{Error, Result};
use crate::feature::FeatureVolume;
use crate::lasa::{attend, attend_backward, attend_cached, gather_neighborhood, LasaWeights, DEFAULT_WINDOW};
use crate::ops::add_assign;
use crate::sampler::{sample_feature, sample_feature_into, sample_volume, scatter_feature_grad};
use crate::volume::{make_query_grid, QueryPoint, Volume};

const QUERY_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Attention window side `l`; each query attends over `2·l²` codes.
    pub window: usize,
    /// Start with a zero decoder output layer and zero `W_g`, so the untrained
    /// model reproduces trilinear interpolation.
    pub zero_residual_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            window: DEFAULT_WINDOW,
            zero_residual_init: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and quick runs.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            window: 3,
            zero_residual_init: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidWindow(self.window));
        }
        Ok(())
    }
}

/// `value = residual + s_q` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub residual: f64,
    pub s_q: f64,
}

/// Named view of one parameter tensor.
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub lasa: LasaWeights,
    pub decoder: Mlp,
}

/// One LR input and the supervision pairs it should reproduce.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub lr: &'a Volume,
    pub pairs: &'a [(QueryPoint, f64)],
}

pub fn predict_intensity(
    q: QueryPoint,
    features: &FeatureVolume,
    lr: &Volume,
    lasa: &LasaWeights,
    decoder: &Mlp,
    window: usize,
) -> Result<Prediction> {
    if features.dims() != lr.dims() {
        return Err(Error::Shape("feature and intensity grids differ".into()));
    }
    let z = sample_feature(features, q)?;
    let s_q = sample_volume(lr, q)?;
    let nb = gather_neighborhood(features, q, window)?;
    let refined = attend(&z, &nb, lasa)?;
    let residual = decoder.decode(&refined)?;
    Ok(Prediction {
        value: residual + s_q,
        residual,
        s_q,
    })
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&config.encoder, &mut rng);
        let c = config.encoder.channels;
        let lasa = LasaWeights::init(c, config.zero_residual_init, &mut rng);
        let decoder = Mlp::init(c, &config.decoder, config.zero_residual_init, &mut rng);
        Ok(Self {
            config,
            encoder,
            lasa,
            decoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.zeros_like(),
            lasa: LasaWeights::zeros(self.lasa.channels),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn channels(&self) -> usize {
        self.config.encoder.channels
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        let c = self.channels();
        let e = &self.encoder;
        let convs = std::iter::once(("encoder.head".to_string(), &e.head))
            .chain(e.blocks.iter().enumerate().flat_map(|(i, b)| {
                [
                    (format!("encoder.blocks.{i}.conv1"), &b.conv1),
                    (format!("encoder.blocks.{i}.conv2"), &b.conv2),
                ]
            }))
            .chain(std::iter::once(("encoder.tail".to_string(), &e.tail)));
        for (name, cv) in convs {
            out.push(Tensor {
                name: format!("{name}.weight"),
                shape: vec![TAPS, cv.in_channels, cv.out_channels],
                data: &cv.weight,
            });
            out.push(Tensor {
                name: format!("{name}.bias"),
                shape: vec![cv.out_channels],
                data: &cv.bias,
            });
        }
        for (name, data, rows) in [
            ("theta", &self.lasa.theta, c),
            ("phi", &self.lasa.phi, c),
            ("g", &self.lasa.g, c),
            ("omega", &self.lasa.omega, 3),
        ] {
            out.push(Tensor {
                name: format!("lasa.{name}"),
                shape: vec![rows, c],
                data,
            });
        }
        for (i, l) in self.decoder.layers.iter().enumerate() {
            out.push(Tensor {
                name: format!("decoder.layers.{i}.weight"),
                shape: vec![l.in_dim, l.out_dim],
                data: &l.weight,
            });
            out.push(Tensor {
                name: format!("decoder.layers.{i}.bias"),
                shape: vec![l.out_dim],
                data: &l.bias,
            });
        }
        out
    }

    /// Mutable counterpart of [`Model::tensors`], same order and names.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let meta: Vec<(String, Vec<usize>)> = self.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let mut slices: Vec<&mut [f64]> = Vec::with_capacity(meta.len());
        let e = &mut self.encoder;
        slices.push(&mut e.head.weight);
        slices.push(&mut e.head.bias);
        for b in e.blocks.iter_mut() {
            slices.push(&mut b.conv1.weight);
            slices.push(&mut b.conv1.bias);
            slices.push(&mut b.conv2.weight);
            slices.push(&mut b.conv2.bias);
        }
        slices.push(&mut e.tail.weight);
        slices.push(&mut e.tail.bias);
        let l = &mut self.lasa;
        slices.push(&mut l.theta);
        slices.push(&mut l.phi);
        slices.push(&mut l.g);
        slices.push(&mut l.omega);
        for layer in self.decoder.layers.iter_mut() {
            slices.push(&mut layer.weight);
            slices.push(&mut layer.bias);
        }
        meta.into_iter()
            .zip(slices)
            .map(|((name, shape), data)| TensorMut { name, shape, data })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn encode(&self, lr: &Volume) -> Result<FeatureVolume> {
        self.encoder.encode(lr)
    }

    pub fn predict_intensity(&self, q: QueryPoint, features: &FeatureVolume, lr: &Volume) -> Result<Prediction> {
        predict_intensity(q, features, lr, &self.lasa, &self.decoder, self.config.window)
    }

    /// The same pipeline with the attention block removed: the sampled code
    /// goes straight to the decoder.
    pub fn predict_intensity_without_lasa(&self, q: QueryPoint, features: &FeatureVolume, lr: &Volume) -> Result<Prediction> {
        let z = sample_feature(features, q)?;
        let s_q = sample_volume(lr, q)?;
        let residual = self.decoder.decode(&z)?;
        Ok(Prediction {
            value: residual + s_q,
            residual,
            s_q,
        })
    }

    /// Reconstructs `(H, W, (D-1)·k + 1)` slices from `lr`. Intensities are
    /// clamped to `[0, 1]` only here, at the output stage.
    pub fn super_resolve(&self, lr: &Volume, k: usize) -> Result<Volume> {
        self.reconstruct(lr, k, true)
    }

    pub fn super_resolve_without_lasa(&self, lr: &Volume, k: usize) -> Result<Volume> {
        self.reconstruct(lr, k, false)
    }

    fn reconstruct(&self, lr: &Volume, k: usize, with_lasa: bool) -> Result<Volume> {
        let grid = make_query_grid(lr.dims(), k)?;
        let features = self.encode(lr)?;
        let chunks: Vec<Vec<f64>> = grid
            .par_chunks(QUERY_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&q| {
                        let p = if with_lasa {
                            self.predict_intensity(q, &features, lr)?
                        } else {
                            self.predict_intensity_without_lasa(q, &features, lr)?
                        };
                        Ok(p.value.clamp(0.0, 1.0))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let [h, w, d] = lr.dims();
        let [sx, sy, sz] = lr.spacing();
        Volume::new([h, w, (d - 1) * k + 1], [sx, sy, sz / k as f64], chunks.concat())
    }

    /// Mean L1 loss over every pair in `batch` and its gradient w.r.t. all
    /// parameters. Chunk partials are reduced in chunk order, so the result
    /// is independent of the worker count.
    pub fn loss_and_grad(&self, batch: &[Sample<'_>]) -> Result<(f64, Model)> {
        let total: usize = batch.iter().map(|s| s.pairs.len()).sum();
        if total == 0 {
            return Err(Error::Empty("training pairs"));
        }
        let scale = 1.0 / total as f64;
        let mut grads = self.zeros_like();
        let mut abs_sum = 0.0;
        let wave = rayon::current_num_threads().max(1);

        for sample in batch {
            let (features, cache) = self.encoder.encode_cached(sample.lr)?;
            let mut dfeat = FeatureVolume::zeros(features.dims(), features.channels());
            let chunks: Vec<&[(QueryPoint, f64)]> = sample.pairs.chunks(QUERY_CHUNK).collect();
            for group in chunks.chunks(wave) {
                let partials: Vec<ChunkGrads> = group
                    .par_iter()
                    .map(|pairs| self.chunk_grad(&features, sample.lr, pairs, scale))
                    .collect::<Result<_>>()?;
                for p in partials {
                    abs_sum += p.abs_sum;
                    dfeat.add_assign(&p.features);
                    add_model_grads(&mut grads, &p.lasa, &p.decoder);
                }
            }
            let genc = self.encoder.backward(&cache, &dfeat)?;
            add_encoder_grads(&mut grads.encoder, &genc);
        }
        let loss = abs_sum * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((loss, grads))
    }

    fn chunk_grad(&self, features: &FeatureVolume, lr: &Volume, pairs: &[(QueryPoint, f64)], scale: f64) -> Result<ChunkGrads> {
        let c = self.channels();
        let mut out = ChunkGrads {
            abs_sum: 0.0,
            features: FeatureVolume::zeros(features.dims(), c),
            lasa: LasaWeights::zeros(c),
            decoder: self.decoder.zeros_like(),
        };
        let mut z = vec![0.0; c];
        for &(q, target) in pairs {
            let corners = sample_feature_into(features, q, &mut z)?;
            let s_q = sample_volume(lr, q)?;
            let nb = gather_neighborhood(features, q, self.config.window)?;
            let (refined, acache) = attend_cached(&z, &nb, &self.lasa, true)?;
            let (residual, mcache) = self.decoder.decode_cached(&refined)?;
            let diff = residual + s_q - target;
            out.abs_sum += diff.abs();
            let g = if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            };
            if g == 0.0 {
                continue;
            }
            let drefined = self.decoder.backward(&mcache, g, &mut out.decoder);
            let ag = attend_backward(&z, &nb, &self.lasa, &acache, &drefined, true);
            add_lasa(&mut out.lasa, &ag.weights);
            for (r, &v) in nb.source_indices.iter().enumerate() {
                add_assign(out.features.code_mut(v), &ag.codes[r * c..(r + 1) * c]);
            }
            scatter_feature_grad(&corners, &ag.z, &mut out.features);
        }
        Ok(out)
    }
}

struct ChunkGrads {
    abs_sum: f64,
    features: FeatureVolume,
    lasa: LasaWeights,
    decoder: Mlp,
}

fn add_lasa(dst: &mut LasaWeights, src: &LasaWeights) {
    add_assign(&mut dst.theta, &src.theta);
    add_assign(&mut dst.phi, &src.phi);
    add_assign(&mut dst.g, &src.g);
    add_assign(&mut dst.omega, &src.omega);
}

fn add_model_grads(dst: &mut Model, lasa: &LasaWeights, decoder: &Mlp) {
    add_lasa(&mut dst.lasa, lasa);
    for (d, s) in dst.decoder.layers.iter_mut().zip(&decoder.layers) {
        add_assign(&mut d.weight, &s.weight);
        add_assign(&mut d.bias, &s.bias);
    }
}

fn add_encoder_grads(dst: &mut Encoder, src: &Encoder) {
    let pairs = std::iter::once((&mut dst.head, &src.head))
        .chain(dst.blocks.iter_mut().zip(&src.blocks).flat_map(|(d, s)| [(&mut d.conv1, &s.conv1), (&mut d.conv2, &s.conv2)]))
        .chain(std::iter::once((&mut dst.tail, &src.tail)));
    for (d, s) in pairs {
        add_assign(&mut d.weight, &s.weight);
        add_assign(&mut d.bias, &s.bias);
    }
}
