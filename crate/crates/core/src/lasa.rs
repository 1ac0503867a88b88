//! Local-aware spatial attention.
//!
//! A query's latent code attends over the codes in two `l×l` windows, one on
//! the slice below the query and one on the slice above, with a linear
//! embedding of each neighbour's relative offset added to keys and values:
//!
//! ```text
//! V  = Z_n + X_n·W_ω
//! ẑ  = softmax((z·W_θ)(V·W_φ)ᵀ) · V·W_g + z
//! ```
//!
//! Scores are plain dot products without temperature scaling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::feature::FeatureVolume;
use crate::ops::{add_assign, dot, mat_vec_acc, outer_acc, uniform, vec_mat};
use crate::volume::QueryPoint;

pub const DEFAULT_WINDOW: usize = 7;

/// The `2l²` neighbour codes of a query and their offsets from it.
///
/// Rows list the preceding slice first, then the next, each in `(dx, dy)`
/// order. Window indices are clamped to the grid, but offsets keep the
/// nominal (unclamped) geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub channels: usize,
    /// `rows × C`
    pub codes: Vec<f64>,
    /// `rows × 3` as `(Δx, Δy, Δz)` in LR index units.
    pub offsets: Vec<[f64; 3]>,
    /// Flat voxel index each row was read from.
    pub source_indices: Vec<usize>,
}

impl Neighborhood {
    pub fn rows(&self) -> usize {
        self.offsets.len()
    }

    pub fn code(&self, r: usize) -> &[f64] {
        &self.codes[r * self.channels..(r + 1) * self.channels]
    }

    pub fn from_parts(channels: usize, codes: Vec<f64>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        if codes.len() != offsets.len() * channels || offsets.is_empty() {
            return Err(Error::Shape(format!(
                "{} codes do not form {} rows of {channels}",
                codes.len(),
                offsets.len()
            )));
        }
        let source_indices = vec![0; offsets.len()];
        Ok(Self {
            channels,
            codes,
            offsets,
            source_indices,
        })
    }
}

pub fn gather_neighborhood(features: &FeatureVolume, q: QueryPoint, l: usize) -> Result<Neighborhood> {
    if l == 0 || l.is_multiple_of(2) {
        return Err(Error::InvalidWindow(l));
    }
    let dims = features.dims();
    if !q.in_bounds(dims) {
        return Err(Error::OutOfBounds {
            x: q.x,
            y: q.y,
            z: q.z,
            dims,
        });
    }
    let [h, w, d] = dims;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let r = (l / 2) as i64;
    let below = q.z.floor() as i64;
    let cx = q.x.round() as i64;
    let cy = q.y.round() as i64;
    let c = features.channels();
    let rows = 2 * l * l;
    let mut nb = Neighborhood {
        channels: c,
        codes: Vec::with_capacity(rows * c),
        offsets: Vec::with_capacity(rows),
        source_indices: Vec::with_capacity(rows),
    };
    for sz in [below, below + 1] {
        let zi = clamp(sz, d);
        for dx in -r..=r {
            let nx = cx + dx;
            for dy in -r..=r {
                let ny = cy + dy;
                let v = features.voxel_index(clamp(nx, h), clamp(ny, w), zi);
                nb.codes.extend_from_slice(features.code(v));
                nb.offsets.push([nx as f64 - q.x, ny as f64 - q.y, sz as f64 - q.z]);
                nb.source_indices.push(v);
            }
        }
    }
    Ok(nb)
}

/// `W_θ, W_φ, W_g` are `C×C`, `W_ω` is `3×C`, all acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LasaWeights {
    pub channels: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    pub omega: Vec<f64>,
}

impl LasaWeights {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            theta: vec![0.0; channels * channels],
            phi: vec![0.0; channels * channels],
            g: vec![0.0; channels * channels],
            omega: vec![0.0; 3 * channels],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` init. With `zero_value_proj`, `W_g` starts at
    /// zero so the attention block is the identity map.
    pub fn init<R: Rng + ?Sized>(channels: usize, zero_value_proj: bool, rng: &mut R) -> Self {
        let b = 1.0 / (channels as f64).sqrt();
        let cc = channels * channels;
        let theta = uniform(cc, b, rng);
        let phi = uniform(cc, b, rng);
        let g = if zero_value_proj {
            vec![0.0; cc]
        } else {
            uniform(cc, b, rng)
        };
        let omega = uniform(3 * channels, 1.0 / 3f64.sqrt(), rng);
        Self {
            channels,
            theta,
            phi,
            g,
            omega,
        }
    }

    fn check(&self, z: &[f64], nb: &Neighborhood) -> Result<()> {
        let c = self.channels;
        if z.len() != c || nb.channels != c || nb.codes.len() != nb.rows() * c || nb.rows() == 0 {
            return Err(Error::Shape(format!(
                "attention over {c} channels got code of {} and neighbourhood of {}x{}",
                z.len(),
                nb.rows(),
                nb.channels
            )));
        }
        Ok(())
    }
}

/// Intermediates of one attention evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttendCache {
    /// `rows × C` keys/values before projection.
    values: Vec<f64>,
    /// `z·W_θ`
    query: Vec<f64>,
    /// `V·W_φ`, `rows × C`
    keys: Vec<f64>,
    /// `V·W_g`, `rows × C`
    projected: Vec<f64>,
    /// Softmax weights.
    pub attention: Vec<f64>,
}

/// Gradients of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttendGrads {
    pub z: Vec<f64>,
    pub codes: Vec<f64>,
    pub offsets: Vec<[f64; 3]>,
    pub weights: LasaWeights,
}

/// Refines `z` with position-aware attention.
pub fn attend(z: &[f64], nb: &Neighborhood, w: &LasaWeights) -> Result<Vec<f64>> {
    Ok(attend_cached(z, nb, w, true)?.0)
}

/// Attention without the position embedding (`V = Z_n`).
pub fn attend_no_pos(z: &[f64], nb: &Neighborhood, w: &LasaWeights) -> Result<Vec<f64>> {
    Ok(attend_cached(z, nb, w, false)?.0)
}

pub fn attend_cached(z: &[f64], nb: &Neighborhood, w: &LasaWeights, use_pos: bool) -> Result<(Vec<f64>, AttendCache)> {
    w.check(z, nb)?;
    let c = w.channels;
    let rows = nb.rows();

    let mut values = nb.codes.clone();
    if use_pos {
        let mut emb = vec![0.0; c];
        for (r, off) in nb.offsets.iter().enumerate() {
            vec_mat(off, &w.omega, c, &mut emb);
            add_assign(&mut values[r * c..(r + 1) * c], &emb);
        }
    }

    let mut query = vec![0.0; c];
    vec_mat(z, &w.theta, c, &mut query);
    let mut keys = vec![0.0; rows * c];
    let mut projected = vec![0.0; rows * c];
    let mut scores = vec![0.0; rows];
    for r in 0..rows {
        let v = &values[r * c..(r + 1) * c];
        vec_mat(v, &w.phi, c, &mut keys[r * c..(r + 1) * c]);
        vec_mat(v, &w.g, c, &mut projected[r * c..(r + 1) * c]);
        scores[r] = dot(&query, &keys[r * c..(r + 1) * c]);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attention scores".into()));
    }
    let attention = softmax(&scores);

    let mut out = vec![0.0; c];
    for (r, &a) in attention.iter().enumerate() {
        for (o, &p) in out.iter_mut().zip(&projected[r * c..(r + 1) * c]) {
            *o += a * p;
        }
    }
    add_assign(&mut out, z);
    Ok((
        out,
        AttendCache {
            values,
            query,
            keys,
            projected,
            attention,
        },
    ))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass of [`attend_cached`] given `dout = ∂L/∂ẑ`.
pub fn attend_backward(
    z: &[f64],
    nb: &Neighborhood,
    w: &LasaWeights,
    cache: &AttendCache,
    dout: &[f64],
    use_pos: bool,
) -> AttendGrads {
    let c = w.channels;
    let rows = nb.rows();
    let a = &cache.attention;
    let mut gw = LasaWeights::zeros(c);

    let mut dattn = vec![0.0; rows];
    for r in 0..rows {
        dattn[r] = dot(&cache.projected[r * c..(r + 1) * c], dout);
    }
    let mean: f64 = a.iter().zip(&dattn).map(|(p, d)| p * d).sum();
    let dscore: Vec<f64> = a.iter().zip(&dattn).map(|(p, d)| p * (d - mean)).collect();

    let mut dquery = vec![0.0; c];
    let mut dvalues = vec![0.0; rows * c];
    let mut dproj = vec![0.0; c];
    let mut dkey = vec![0.0; c];
    for r in 0..rows {
        let v = &cache.values[r * c..(r + 1) * c];
        let k = &cache.keys[r * c..(r + 1) * c];
        for (dp, &g) in dproj.iter_mut().zip(dout) {
            *dp = a[r] * g;
        }
        for (dk, &qv) in dkey.iter_mut().zip(&cache.query) {
            *dk = dscore[r] * qv;
        }
        for (dq, &kv) in dquery.iter_mut().zip(k) {
            *dq += dscore[r] * kv;
        }
        outer_acc(v, &dproj, &mut gw.g);
        outer_acc(v, &dkey, &mut gw.phi);
        let dv = &mut dvalues[r * c..(r + 1) * c];
        mat_vec_acc(&w.g, &dproj, dv);
        mat_vec_acc(&w.phi, &dkey, dv);
    }
    outer_acc(z, &dquery, &mut gw.theta);
    let mut dz = dout.to_vec();
    mat_vec_acc(&w.theta, &dquery, &mut dz);

    let mut doffsets = vec![[0.0; 3]; rows];
    if use_pos {
        for (r, off) in nb.offsets.iter().enumerate() {
            let dv = &dvalues[r * c..(r + 1) * c];
            outer_acc(off, dv, &mut gw.omega);
            mat_vec_acc(&w.omega, dv, &mut doffsets[r]);
        }
    }
    AttendGrads {
        z: dz,
        codes: dvalues,
        offsets: doffsets,
        weights: gw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_nb(c: usize, rows: usize, rng: &mut ChaCha8Rng) -> Neighborhood {
        let codes = uniform(rows * c, 1.0, rng);
        let offsets = (0..rows)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)])
            .collect();
        Neighborhood::from_parts(c, codes, offsets).unwrap()
    }

    /// The attention update term by term with explicit index loops.
    fn oracle(z: &[f64], nb: &Neighborhood, w: &LasaWeights, use_pos: bool) -> Vec<f64> {
        let c = w.channels;
        let n = nb.rows();
        let mut v = vec![vec![0.0; c]; n];
        for r in 0..n {
            for j in 0..c {
                let mut e = 0.0;
                if use_pos {
                    for t in 0..3 {
                        e += nb.offsets[r][t] * w.omega[t * c + j];
                    }
                }
                v[r][j] = nb.codes[r * c + j] + e;
            }
        }
        let mut q = vec![0.0; c];
        for j in 0..c {
            for i in 0..c {
                q[j] += z[i] * w.theta[i * c + j];
            }
        }
        let mut s = vec![0.0; n];
        for r in 0..n {
            for j in 0..c {
                let mut k = 0.0;
                for i in 0..c {
                    k += v[r][i] * w.phi[i * c + j];
                }
                s[r] += q[j] * k;
            }
        }
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let total: f64 = s.iter().map(|x| (x - m).exp()).sum();
        let mut out = z.to_vec();
        for r in 0..n {
            let a = (s[r] - m).exp() / total;
            for j in 0..c {
                let mut g = 0.0;
                for i in 0..c {
                    g += v[r][i] * w.g[i * c + j];
                }
                out[j] += a * g;
            }
        }
        out
    }

    fn features(dims: [usize; 3], c: usize) -> FeatureVolume {
        let n = dims.iter().product::<usize>() * c;
        FeatureVolume::new(dims, c, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn window_of_seven_has_98_rows() {
        let f = features([16, 16, 4], 2);
        let nb = gather_neighborhood(&f, QueryPoint::new(8.0, 8.0, 1.5), DEFAULT_WINDOW).unwrap();
        assert_eq!(nb.rows(), 98);
        assert_eq!(nb.codes.len(), 98 * 2);
    }

    #[test]
    fn single_cell_window() {
        let f = features([5, 5, 5], 1);
        let nb = gather_neighborhood(&f, QueryPoint::new(2.0, 3.0, 2.0), 1).unwrap();
        assert_eq!(nb.rows(), 2);
        assert_eq!(nb.offsets, vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(nb.source_indices, vec![f.voxel_index(2, 3, 2), f.voxel_index(2, 3, 3)]);
    }

    #[test]
    fn fractional_query_enumeration() {
        let f = features([6, 6, 5], 1);
        let q = QueryPoint::new(3.0, 2.0, 2.25);
        let nb = gather_neighborhood(&f, q, 3).unwrap();
        let mut want = Vec::new();
        for (sz, dz) in [(2usize, -0.25), (3, 0.75)] {
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    want.push((
                        [dx as f64, dy as f64, dz],
                        f.voxel_index((3 + dx) as usize, (2 + dy) as usize, sz),
                    ));
                }
            }
        }
        assert_eq!(nb.rows(), 18);
        for (r, (off, src)) in want.iter().enumerate() {
            assert_eq!(&nb.offsets[r], off);
            assert_eq!(nb.source_indices[r], *src);
            assert_eq!(nb.code(r), f.code(*src));
        }
    }

    #[test]
    fn clamping_keeps_nominal_offsets() {
        let f = features([4, 4, 3], 1);
        let nb = gather_neighborhood(&f, QueryPoint::new(0.0, 3.0, 2.0), 3).unwrap();
        // top edge: both windows on the last slice, nominal dz = 0 and 1
        assert!(nb.source_indices.iter().all(|&v| v / 16 == 2));
        assert_eq!(nb.offsets[0], [-1.0, -1.0, 0.0]);
        assert_eq!(nb.source_indices[0], f.voxel_index(0, 2, 2));
        assert_eq!(nb.offsets[17], [1.0, 1.0, 1.0]);
        assert_eq!(nb.source_indices[17], f.voxel_index(1, 3, 2));
    }

    #[test]
    fn gather_errors() {
        let f = features([4, 4, 3], 1);
        assert!(matches!(
            gather_neighborhood(&f, QueryPoint::new(1.0, 1.0, 1.0), 4),
            Err(Error::InvalidWindow(4))
        ));
        assert!(gather_neighborhood(&f, QueryPoint::new(1.0, 1.0, 2.5), 3).is_err());
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut w = LasaWeights::init(4, false, &mut rng);
        w.g = vec![0.0; 16];
        let nb = random_nb(4, 8, &mut rng);
        let z = uniform(4, 1.0, &mut rng);
        assert_eq!(attend(&z, &nb, &w).unwrap(), z);
        assert_eq!(attend_no_pos(&z, &nb, &w).unwrap(), z);
    }

    #[test]
    fn singleton_neighbourhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = LasaWeights::init(3, false, &mut rng);
        let nb = random_nb(3, 1, &mut rng);
        let z = uniform(3, 1.0, &mut rng);
        let mut v = nb.codes.clone();
        let mut e = vec![0.0; 3];
        vec_mat(&nb.offsets[0], &w.omega, 3, &mut e);
        add_assign(&mut v, &e);
        let mut want = vec![0.0; 3];
        vec_mat(&v, &w.g, 3, &mut want);
        add_assign(&mut want, &z);
        let got = attend(&z, &nb, &w).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn position_free_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut w = LasaWeights::init(3, false, &mut rng);
        let nb = random_nb(3, 8, &mut rng);
        let z = uniform(3, 1.0, &mut rng);
        let no_pos = attend_no_pos(&z, &nb, &w).unwrap();
        w.omega = vec![0.0; 9];
        assert_eq!(attend(&z, &nb, &w).unwrap(), no_pos);

        // identical rows: output is r·W_g + z whatever the scores
        let r = uniform(3, 1.0, &mut rng);
        let same = Neighborhood::from_parts(3, r.repeat(8), vec![[0.0; 3]; 8]).unwrap();
        let mut want = vec![0.0; 3];
        vec_mat(&r, &w.g, 3, &mut want);
        add_assign(&mut want, &z);
        for (a, b) in attend_no_pos(&z, &same, &w).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let w = LasaWeights::init(3, false, &mut rng);
            let nb = random_nb(3, 8, &mut rng);
            let z = uniform(3, 1.0, &mut rng);
            for use_pos in [true, false] {
                let got = attend_cached(&z, &nb, &w, use_pos).unwrap().0;
                let want = oracle(&z, &nb, &w, use_pos);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let w = LasaWeights::init(4, false, &mut rng);
            let nb = random_nb(4, 18, &mut rng);
            let z = uniform(4, 2.0, &mut rng);
            let (_, cache) = attend_cached(&z, &nb, &w, true).unwrap();
            let s: f64 = cache.attention.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(cache.attention.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn overflowing_scores_are_rejected() {
        let mut w = LasaWeights::zeros(1);
        w.theta = vec![1e200];
        w.phi = vec![1e200];
        let nb = Neighborhood::from_parts(1, vec![1.0, 2.0], vec![[0.0; 3]; 2]).unwrap();
        assert!(matches!(attend(&[1.0], &nb, &w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let w = LasaWeights::init(4, false, &mut rng);
        let nb = random_nb(4, 8, &mut rng);
        let z = uniform(4, 1.0, &mut rng);
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let codes: Vec<f64> = perm.iter().flat_map(|&p| nb.code(p).to_vec()).collect();
        let offsets = perm.iter().map(|&p| nb.offsets[p]).collect();
        let shuffled = Neighborhood::from_parts(4, codes, offsets).unwrap();
        let a = attend(&z, &nb, &w).unwrap();
        let b = attend(&z, &shuffled, &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn position_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut sensitive = 0;
        for _ in 0..20 {
            let w = LasaWeights::init(4, false, &mut rng);
            let nb = random_nb(4, 8, &mut rng);
            let z = uniform(4, 1.0, &mut rng);
            let mut moved = nb.clone();
            moved.offsets[3][2] += 0.5;
            if attend(&z, &nb, &w).unwrap() != attend(&z, &moved, &w).unwrap() {
                sensitive += 1;
            }
        }
        assert_eq!(sensitive, 20);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let c = 4;
        let w = LasaWeights::init(c, false, &mut rng);
        let nb = random_nb(c, 8, &mut rng);
        let z = uniform(c, 1.0, &mut rng);
        let probe = uniform(c, 1.0, &mut rng);
        let loss = |z: &[f64], nb: &Neighborhood, w: &LasaWeights| dot(&attend(z, nb, w).unwrap(), &probe);
        let (_, cache) = attend_cached(&z, &nb, &w, true).unwrap();
        let g = attend_backward(&z, &nb, &w, &cache, &probe, true);
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

        for i in 0..c {
            let (mut p, mut m) = (z.clone(), z.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &nb, &w) - loss(&m, &nb, &w)) / (2.0 * h);
            assert!(rel(fd, g.z[i]) < 1e-4);
        }
        for i in 0..nb.codes.len() {
            let (mut p, mut m) = (nb.clone(), nb.clone());
            p.codes[i] += h;
            m.codes[i] -= h;
            let fd = (loss(&z, &p, &w) - loss(&z, &m, &w)) / (2.0 * h);
            assert!(rel(fd, g.codes[i]) < 1e-4);
        }
        for r in 0..nb.rows() {
            for t in 0..3 {
                let (mut p, mut m) = (nb.clone(), nb.clone());
                p.offsets[r][t] += h;
                m.offsets[r][t] -= h;
                let fd = (loss(&z, &p, &w) - loss(&z, &m, &w)) / (2.0 * h);
                assert!(rel(fd, g.offsets[r][t]) < 1e-4);
            }
        }
        type Field = fn(&mut LasaWeights) -> &mut Vec<f64>;
        let fields: [(Field, &Vec<f64>); 4] = [
            (|w| &mut w.theta, &g.weights.theta),
            (|w| &mut w.phi, &g.weights.phi),
            (|w| &mut w.g, &g.weights.g),
            (|w| &mut w.omega, &g.weights.omega),
        ];
        for (field, grad) in fields {
            for i in 0..grad.len() {
                let (mut p, mut m) = (w.clone(), w.clone());
                field(&mut p)[i] += h;
                field(&mut m)[i] -= h;
                let fd = (loss(&z, &nb, &p) - loss(&z, &nb, &m)) / (2.0 * h);
                assert!(rel(fd, grad[i]) < 1e-4, "fd {fd} vs {}", grad[i]);
            }
        }
    }
}
