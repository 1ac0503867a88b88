//! Trilinear sampling of volumes and feature volumes at continuous coordinates.

use crate::error::{Error, Result};
use crate::feature::FeatureVolume;
use crate::volume::{QueryPoint, Volume};

/// The eight grid points surrounding a query and their trilinear weights.
///
/// Corners are ordered `(cz, cx, cy)` with `cy` fastest. Weights are products
/// of per-axis `(1 - f)` / `f` factors, so at a grid node exactly one weight
/// is `1.0` and the rest are `0.0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

/// Lower cell index and fractional offset along one axis. A query on the last
/// node uses the last cell with `f = 1`.
fn axis_cell(c: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

pub fn corners(dims: [usize; 3], q: QueryPoint) -> Result<Corners> {
    if !q.in_bounds(dims) {
        return Err(Error::OutOfBounds {
            x: q.x,
            y: q.y,
            z: q.z,
            dims,
        });
    }
    let [h, w, _] = dims;
    let (x0, x1, fx) = axis_cell(q.x, dims[0]);
    let (y0, y1, fy) = axis_cell(q.y, dims[1]);
    let (z0, z1, fz) = axis_cell(q.z, dims[2]);
    let xs = [(x0, 1.0 - fx), (x1, fx)];
    let ys = [(y0, 1.0 - fy), (y1, fy)];
    let zs = [(z0, 1.0 - fz), (z1, fz)];
    let mut index = [0; 8];
    let mut weight = [0.0; 8];
    let mut i = 0;
    for &(z, wz) in &zs {
        for &(x, wx) in &xs {
            for &(y, wy) in &ys {
                index[i] = (z * h + x) * w + y;
                weight[i] = wz * wx * wy;
                i += 1;
            }
        }
    }
    Ok(Corners { index, weight })
}

pub fn sample_volume(vol: &Volume, q: QueryPoint) -> Result<f64> {
    let c = corners(vol.dims(), q)?;
    let data = vol.data();
    Ok(c.index
        .iter()
        .zip(&c.weight)
        .fold(0.0, |acc, (&i, &w)| acc + w * data[i]))
}

/// Writes the interpolated code into `out` (length `C`).
pub fn sample_feature_into(field: &FeatureVolume, q: QueryPoint, out: &mut [f64]) -> Result<Corners> {
    if out.len() != field.channels() {
        return Err(Error::Shape(format!(
            "output buffer has {} channels, field has {}",
            out.len(),
            field.channels()
        )));
    }
    let c = corners(field.dims(), q)?;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&i, &w) in c.index.iter().zip(&c.weight) {
        for (o, &v) in out.iter_mut().zip(field.code(i)) {
            *o += w * v;
        }
    }
    Ok(c)
}

pub fn sample_feature(field: &FeatureVolume, q: QueryPoint) -> Result<Vec<f64>> {
    let mut out = vec![0.0; field.channels()];
    sample_feature_into(field, q, &mut out)?;
    Ok(out)
}

/// Scatters `grad` (w.r.t. the sampled code) back onto the corner codes.
pub fn scatter_feature_grad(corners: &Corners, grad: &[f64], dfield: &mut FeatureVolume) {
    for (&i, &w) in corners.index.iter().zip(&corners.weight) {
        for (d, &g) in dfield.code_mut(i).iter_mut().zip(grad) {
            *d += w * g;
        }
    }
}

/// Latent code and intensity sampled at one query.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z_q: Vec<f64>,
    pub s_q: f64,
    pub coord: QueryPoint,
}

pub fn sample_query(features: &FeatureVolume, lr: &Volume, q: QueryPoint) -> Result<LatentSample> {
    if features.dims() != lr.dims() {
        return Err(Error::Shape(format!(
            "feature dims {:?} differ from volume dims {:?}",
            features.dims(),
            lr.dims()
        )));
    }
    Ok(LatentSample {
        z_q: sample_feature(features, q)?,
        s_q: sample_volume(lr, q)?,
        coord: q,
    })
}
