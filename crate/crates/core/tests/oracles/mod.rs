//! Brute-force reference implementations, written with plain loops and no
//! calls into the library's numeric code.
#![allow(dead_code)]

use slicesr::decoder::Mlp;
use slicesr::encoder::Conv3d;
use slicesr::lasa::LasaWeights;
use slicesr::{FeatureVolume, QueryPoint, Volume};

fn tent(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Trilinear interpolation as a tent-weighted sum over every voxel.
pub fn trilinear(vol: &Volume, q: QueryPoint) -> f64 {
    let [h, w, d] = vol.dims();
    let data = vol.data();
    let mut s = 0.0;
    for z in 0..d {
        for x in 0..h {
            for y in 0..w {
                let wt = tent(q.x - x as f64) * tent(q.y - y as f64) * tent(q.z - z as f64);
                s += wt * data[(z * h + x) * w + y];
            }
        }
    }
    s
}

pub fn feature_at(f: &FeatureVolume, x: i64, y: i64, z: i64, c: usize) -> f64 {
    let [h, w, d] = f.dims();
    if x < 0 || y < 0 || z < 0 || x >= h as i64 || y >= w as i64 || z >= d as i64 {
        return 0.0;
    }
    let ch = f.channels();
    f.data()[(((z as usize * h + x as usize) * w) + y as usize) * ch + c]
}

/// Zero-padded 3×3×3 cross-correlation; weights indexed
/// `[(dz·3 + dx)·3 + dy][cin][cout]` with offsets `-1..=1`.
pub fn conv3d(conv: &Conv3d, input: &FeatureVolume) -> Vec<f64> {
    let [h, w, d] = input.dims();
    let (cin, cout) = (conv.in_channels, conv.out_channels);
    let mut out = vec![0.0; h * w * d * cout];
    for z in 0..d {
        for x in 0..h {
            for y in 0..w {
                for o in 0..cout {
                    let mut acc = conv.bias[o];
                    for dz in -1i64..=1 {
                        for dx in -1i64..=1 {
                            for dy in -1i64..=1 {
                                let tap = (((dz + 1) * 3 + dx + 1) * 3 + dy + 1) as usize;
                                for i in 0..cin {
                                    let v = feature_at(input, x as i64 + dx, y as i64 + dy, z as i64 + dz, i);
                                    acc += v * conv.weight[(tap * cin + i) * cout + o];
                                }
                            }
                        }
                    }
                    out[((z * h + x) * w + y) * cout + o] = acc;
                }
            }
        }
    }
    out
}

pub fn res_block(conv1: &Conv3d, conv2: &Conv3d, x: &FeatureVolume) -> Vec<f64> {
    let hidden: Vec<f64> = conv3d(conv1, x).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
    let hidden = FeatureVolume::new(x.dims(), conv1.out_channels, hidden).unwrap();
    let y = conv3d(conv2, &hidden);
    y.iter().zip(x.data()).map(|(a, b)| a + b).collect()
}

/// Attention over `rows` neighbour codes; `with_pos` adds the offset
/// embedding to keys and values.
pub fn attention(z: &[f64], codes: &[f64], offsets: &[[f64; 3]], w: &LasaWeights, with_pos: bool) -> Vec<f64> {
    let c = z.len();
    let rows = offsets.len();
    let mut v = vec![vec![0.0; c]; rows];
    for r in 0..rows {
        for j in 0..c {
            let mut e = codes[r * c + j];
            if with_pos {
                for a in 0..3 {
                    e += offsets[r][a] * w.omega[a * c + j];
                }
            }
            v[r][j] = e;
        }
    }
    let mut q = vec![0.0; c];
    for j in 0..c {
        for i in 0..c {
            q[j] += z[i] * w.theta[i * c + j];
        }
    }
    let mut scores = vec![0.0; rows];
    for r in 0..rows {
        for j in 0..c {
            let mut key = 0.0;
            for i in 0..c {
                key += v[r][i] * w.phi[i * c + j];
            }
            scores[r] += q[j] * key;
        }
    }
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut norm = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - top).exp();
        norm += *s;
    }
    let mut out = z.to_vec();
    for r in 0..rows {
        let a = scores[r] / norm;
        for j in 0..c {
            let mut val = 0.0;
            for i in 0..c {
                val += v[r][i] * w.g[i * c + j];
            }
            out[j] += a * val;
        }
    }
    out
}

pub fn mlp(m: &Mlp, z: &[f64]) -> f64 {
    let mut x = z.to_vec();
    let n = m.layers.len();
    for (li, layer) in m.layers.iter().enumerate() {
        let mut y = vec![0.0; layer.out_dim];
        for o in 0..layer.out_dim {
            let mut acc = layer.bias[o];
            for i in 0..layer.in_dim {
                acc += x[i] * layer.weight[i * layer.out_dim + o];
            }
            y[o] = if li + 1 < n && acc < 0.0 { 0.0 } else { acc };
        }
        x = y;
    }
    x[0]
}

pub fn l1(pred: &[f64], target: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        s += if d < 0.0 { -d } else { d };
    }
    s / pred.len() as f64
}

/// Scalar Adam with explicit bias correction, one parameter at a time.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        Self { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, p: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        p - lr * mh / (vh.sqrt() + eps)
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = s / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// SSIM with an explicit 11³ Gaussian window (σ = 1.5) at every valid
/// position, `K1 = 0.01`, `K2 = 0.03`, `L = 1`.
pub fn ssim(a: &Volume, b: &Volume) -> f64 {
    let [h, w, d] = a.dims();
    let n = 11usize;
    let mut g = [0.0; 11];
    let mut gs = 0.0;
    for (i, gi) in g.iter_mut().enumerate() {
        let t = i as f64 - 5.0;
        *gi = (-t * t / (2.0 * 1.5 * 1.5)).exp();
        gs += *gi;
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (da, db) = (a.data(), b.data());
    let at = |v: &[f64], x: usize, y: usize, z: usize| v[(z * h + x) * w + y];
    let mut total = 0.0;
    let mut count = 0usize;
    for z0 in 0..=d - n {
        for x0 in 0..=h - n {
            for y0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        for l in 0..n {
                            let wt = g[i] * g[j] * g[l] / (gs * gs * gs);
                            ma += wt * at(da, x0 + i, y0 + j, z0 + l);
                            mb += wt * at(db, x0 + i, y0 + j, z0 + l);
                        }
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        for l in 0..n {
                            let wt = g[i] * g[j] * g[l] / (gs * gs * gs);
                            let ea = at(da, x0 + i, y0 + j, z0 + l) - ma;
                            let eb = at(db, x0 + i, y0 + j, z0 + l) - mb;
                            va += wt * ea * ea;
                            vb += wt * eb * eb;
                            cov += wt * ea * eb;
                        }
                    }
                }
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// The `(offset, clamped source voxel)` list a neighbourhood must contain,
/// enumerated directly from the window definition.
pub fn neighborhood_rows(dims: [usize; 3], q: QueryPoint, l: usize) -> Vec<([f64; 3], [usize; 3])> {
    let r = (l / 2) as i64;
    let clamp = |v: i64, n: usize| v.max(0).min(n as i64 - 1) as usize;
    let mut out = Vec::new();
    let z0 = q.z.floor() as i64;
    for zs in [z0, z0 + 1] {
        for i in q.x.round() as i64 - r..=q.x.round() as i64 + r {
            for j in q.y.round() as i64 - r..=q.y.round() as i64 + r {
                out.push((
                    [i as f64 - q.x, j as f64 - q.y, zs as f64 - q.z],
                    [clamp(i, dims[0]), clamp(j, dims[1]), clamp(zs, dims[2])],
                ));
            }
        }
    }
    out
}
