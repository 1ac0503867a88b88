//! Image-quality metrics, the trilinear interpolation baseline, error maps
//! and per-method / per-ratio reports.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampler::sample_volume;
use crate::volume::{make_query_grid, normalize, simulate_lr, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("volumes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(peak² / MSE)` in dB; `f64::INFINITY` when the volumes are identical.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering along all three axes. Input and output use
/// the slice-major layout with dims `[h, w, d]`.
fn filter_valid(data: &[f64], dims: [usize; 3], taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let n = taps.len();
    let [h, w, d] = dims;
    // along y
    let w1 = w - n + 1;
    let mut a = vec![0.0; h * w1 * d];
    for z in 0..d {
        for x in 0..h {
            let row = &data[(z * h + x) * w..(z * h + x + 1) * w];
            for y in 0..w1 {
                a[(z * h + x) * w1 + y] = taps.iter().zip(&row[y..y + n]).map(|(t, v)| t * v).sum();
            }
        }
    }
    // along x
    let h1 = h - n + 1;
    let mut b = vec![0.0; h1 * w1 * d];
    for z in 0..d {
        for x in 0..h1 {
            for y in 0..w1 {
                b[(z * h1 + x) * w1 + y] = (0..n).map(|t| taps[t] * a[(z * h + x + t) * w1 + y]).sum();
            }
        }
    }
    // along z
    let d1 = d - n + 1;
    let plane = h1 * w1;
    let mut c = vec![0.0; plane * d1];
    for z in 0..d1 {
        for i in 0..plane {
            c[z * plane + i] = (0..n).map(|t| taps[t] * b[(z + t) * plane + i]).sum();
        }
    }
    (c, [h1, w1, d1])
}

/// Mean SSIM over every voxel whose 11³ Gaussian window (σ = 1.5) lies
/// inside the volume, with `L = 1`, `K1 = 0.01`, `K2 = 0.03`.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    same_dims(a, b)?;
    let dims = a.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::TooSmall {
            dims,
            reason: format!("SSIM needs at least {SSIM_WINDOW} voxels per axis"),
        });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..x.len()).map(f).collect() };
    let (mu_a, _) = filter_valid(x, dims, &taps);
    let (mu_b, _) = filter_valid(y, dims, &taps);
    let (e_aa, _) = filter_valid(&prod(&|i| x[i] * x[i]), dims, &taps);
    let (e_bb, _) = filter_valid(&prod(&|i| y[i] * y[i]), dims, &taps);
    let (e_ab, _) = filter_valid(&prod(&|i| x[i] * y[i]), dims, &taps);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Trilinear interpolation of `lr` on the same query grid the model uses.
pub fn interpolation_baseline(lr: &Volume, k: usize) -> Result<Volume> {
    let grid = make_query_grid(lr.dims(), k)?;
    let data = grid
        .iter()
        .map(|&q| sample_volume(lr, q).map(|v| v.clamp(0.0, 1.0)))
        .collect::<Result<Vec<f64>>>()?;
    let [h, w, d] = lr.dims();
    let [sx, sy, sz] = lr.spacing();
    Volume::new([h, w, (d - 1) * k + 1], [sx, sy, sz / k as f64], data)
}

/// Voxel-wise absolute difference.
pub fn error_map(pred: &Volume, gt: &Volume) -> Result<Volume> {
    same_dims(pred, gt)?;
    let data = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).collect();
    Volume::new(gt.dims(), gt.spacing(), data)
}

/// Anything that turns an LR volume into `(D-1)·k + 1` slices.
pub trait Reconstructor: Sync {
    fn name(&self) -> &str;
    fn reconstruct(&self, lr: &Volume, k: usize) -> Result<Volume>;
}

pub struct Interpolation;

impl Reconstructor for Interpolation {
    fn name(&self) -> &str {
        "interpolation"
    }

    fn reconstruct(&self, lr: &Volume, k: usize) -> Result<Volume> {
        interpolation_baseline(lr, k)
    }
}

/// A trained model under a display name.
pub struct ModelMethod<'a> {
    pub name: String,
    pub model: &'a Model,
}

impl Reconstructor for ModelMethod<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn reconstruct(&self, lr: &Volume, k: usize) -> Result<Volume> {
        self.model.super_resolve(lr, k)
    }
}

fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_none()
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsEntry {
    pub method: String,
    pub volume: String,
    pub k: usize,
    #[serde(serialize_with = "ser_metric")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub k: usize,
    pub n: usize,
    #[serde(serialize_with = "ser_metric")]
    pub psnr_mean: f64,
    #[serde(serialize_with = "ser_metric")]
    pub psnr_std: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ssim_mean: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ssim_std: f64,
}

/// Mean and sample standard deviation. An infinite mean (some perfect
/// reconstruction) has an undefined spread, reported as NaN unless every
/// value is the same infinity.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if !mean.is_finite() {
        let all_same = values.iter().all(|&v| v == values[0]);
        return (mean, if all_same { 0.0 } else { f64::NAN });
    }
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricsEntry>,
}

impl MetricsReport {
    /// One row per `(method, k)` in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            if !keys.iter().any(|(m, k)| *m == e.method && *k == e.k) {
                keys.push((e.method.clone(), e.k));
            }
        }
        keys.into_iter()
            .map(|(method, k)| {
                let rows: Vec<&MetricsEntry> = self.entries.iter().filter(|e| e.method == method && e.k == k).collect();
                let (psnr_mean, psnr_std) = mean_std(&rows.iter().map(|e| e.psnr).collect::<Vec<_>>());
                let (ssim_mean, ssim_std) = mean_std(&rows.iter().map(|e| e.ssim).collect::<Vec<_>>());
                Aggregate {
                    method,
                    k,
                    n: rows.len(),
                    psnr_mean,
                    psnr_std,
                    ssim_mean,
                    ssim_std,
                }
            })
            .collect()
    }

    pub fn find(&self, method: &str, k: usize) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.method == method && a.k == k)
    }

    pub fn to_table(&self) -> String {
        let fmt = |m: f64, s: f64, prec: usize| -> String {
            let v = |x: f64| {
                if x.is_nan() {
                    "-".to_string()
                } else if x.is_infinite() {
                    if x > 0.0 { "inf" } else { "-inf" }.to_string()
                } else {
                    format!("{x:.prec$}")
                }
            };
            format!("{} ± {}", v(m), v(s))
        };
        let rows: Vec<[String; 5]> = self
            .aggregates()
            .into_iter()
            .map(|a| {
                [
                    a.method.clone(),
                    format!("x{}", a.k),
                    a.n.to_string(),
                    fmt(a.psnr_mean, a.psnr_std, 2),
                    fmt(a.ssim_mean, a.ssim_std, 4),
                ]
            })
            .collect();
        let header = ["method", "k", "n", "PSNR (dB)", "SSIM"].map(String::from);
        let mut widths = header.clone().map(|h| h.chars().count());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        for r in std::iter::once(&header).chain(&rows) {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    /// Line-delimited JSON: one record per entry, then one per aggregate.
    pub fn to_records(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "snake_case")]
        enum Record<'a> {
            Entry(&'a MetricsEntry),
            Aggregate(&'a Aggregate),
        }
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&Record::Entry(e)).expect("serializable"));
            out.push('\n');
        }
        for a in &self.aggregates() {
            out.push_str(&serde_json::to_string(&Record::Aggregate(a)).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// One evaluated reconstruction, handed to the observer of [`evaluate_with`].
pub struct Reconstruction<'a> {
    pub method: &'a str,
    pub volume: &'a str,
    pub k: usize,
    pub prediction: &'a Volume,
    pub ground_truth: &'a Volume,
}

/// For every volume and `k`: normalize, drop slices, reconstruct with each
/// method and score against the ground truth on the reconstructed grid.
pub fn evaluate(methods: &[&dyn Reconstructor], volumes: &[(String, Volume)], k_list: &[usize]) -> Result<MetricsReport> {
    evaluate_with(methods, volumes, k_list, |_| Ok(()))
}

pub fn evaluate_with(
    methods: &[&dyn Reconstructor],
    volumes: &[(String, Volume)],
    k_list: &[usize],
    mut observe: impl FnMut(&Reconstruction<'_>) -> Result<()>,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for (name, raw) in volumes {
        let gt = normalize(raw)?;
        for &k in k_list {
            let lr = simulate_lr(&gt, k)?;
            let depth = (lr.dims()[2] - 1) * k + 1;
            let truth = gt.truncate_slices(depth)?;
            for m in methods {
                let pred = m.reconstruct(&lr, k)?;
                observe(&Reconstruction {
                    method: m.name(),
                    volume: name,
                    k,
                    prediction: &pred,
                    ground_truth: &truth,
                })?;
                report.entries.push(MetricsEntry {
                    method: m.name().to_string(),
                    volume: name.clone(),
                    k,
                    psnr: psnr(&pred, &truth, 1.0)?,
                    ssim: ssim(&pred, &truth)?,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
    }

    /// Direct 11³ window sums per valid voxel.
    fn ssim_oracle(a: &Volume, b: &Volume) -> f64 {
        let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let [h, w, d] = a.dims();
        let n = SSIM_WINDOW;
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..=d - n {
            for x in 0..=h - n {
                for y in 0..=w - n {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            for l in 0..n {
                                let wt = g[i] * g[j] * g[l];
                                let va = a.get(x + i, y + j, z + l);
                                let vb = b.get(x + i, y + j, z + l);
                                ma += wt * va;
                                mb += wt * vb;
                                aa += wt * va * va;
                                bb += wt * vb * vb;
                                ab += wt * va * vb;
                            }
                        }
                    }
                    let (sa, sb, sab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += (2.0 * ma * mb + c1) * (2.0 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let a = Volume::from_fn([4, 4, 4], [1.0; 3], |_, _, _| rng.gen_range(0.0..0.9)).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-10);
        let c = random([4, 4, 5], &mut rng);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let a = random([3, 5, 4], &mut rng);
            let b = random([3, 5, 4], &mut rng);
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a.data()[i] - b.data()[i]).powi(2);
            }
            let want = 10.0 * (1.0 / (s / a.len() as f64)).log10();
            assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-10);
            assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let a = random([11, 12, 13], &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);

        let (ca, cb) = (0.3, 0.7);
        let va = Volume::new([11, 11, 11], [1.0; 3], vec![ca; 1331]).unwrap();
        let vb = Volume::new([11, 11, 11], [1.0; 3], vec![cb; 1331]).unwrap();
        let c1 = 1e-4;
        let want = (2.0 * ca * cb + c1) / (ca * ca + cb * cb + c1);
        assert!((ssim(&va, &vb).unwrap() - want).abs() < 1e-12);

        let small = random([10, 12, 12], &mut rng);
        assert!(matches!(ssim(&small, &small), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn ssim_matches_direct_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let a = random([12, 11, 13], &mut rng);
        let b = a.map(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-8);
        assert_eq!(s, ssim(&b, &a).unwrap());
    }

    #[test]
    fn baseline_identity_and_linear_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let v = random([3, 4, 5], &mut rng);
        assert_eq!(interpolation_baseline(&v, 1).unwrap(), v);

        // HR slice j holds j/16, so every interpolated value is dyadic.
        let hr = Volume::from_fn([2, 3, 17], [1.0; 3], |_, _, z| z as f64 / 16.0).unwrap();
        for k in [1, 2, 4] {
            let lr = simulate_lr(&hr, k).unwrap();
            let out = interpolation_baseline(&lr, k).unwrap();
            assert_eq!(psnr(&out, &hr, 1.0).unwrap(), f64::INFINITY, "k={k}");
        }
    }

    #[test]
    fn error_map_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let a = random([3, 3, 3], &mut rng);
        assert!(error_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let g = Volume::new([2, 2, 1], [1.0; 3], vec![0.0, 0.25, 0.5, 0.75]).unwrap();
        let p = g.map(|v| v + 0.125).unwrap();
        assert!(error_map(&p, &g).unwrap().data().iter().all(|&v| v == 0.125));

        let b = random([3, 3, 3], &mut rng);
        let linf = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(error_map(&a, &b).unwrap().min_max().1, linf);
    }

    #[test]
    fn aggregates_recompute_from_entries() {
        let mk = |m: &str, v: &str, k, p, s| MetricsEntry {
            method: m.into(),
            volume: v.into(),
            k,
            psnr: p,
            ssim: s,
        };
        let report = MetricsReport {
            entries: vec![
                mk("a", "v1", 2, 30.0, 0.9),
                mk("a", "v2", 2, 34.0, 0.95),
                mk("a", "v1", 4, f64::INFINITY, 1.0),
            ],
        };
        let agg = report.find("a", 2).unwrap();
        assert_eq!(agg.n, 2);
        assert_eq!(agg.psnr_mean, 32.0);
        assert!((agg.psnr_std - 8f64.sqrt()).abs() < 1e-12);
        assert!((agg.ssim_mean - 0.925).abs() < 1e-12);
        let inf = report.find("a", 4).unwrap();
        assert_eq!((inf.psnr_mean, inf.psnr_std), (f64::INFINITY, 0.0));
        let records = report.to_records();
        assert_eq!(records.lines().count(), 5);
        assert!(records.contains("\"psnr\":\"inf\""));
        assert!(report.to_table().contains("inf ± 0.00"));
    }
}
