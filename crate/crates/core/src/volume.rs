//! Volumes, slice-dropping LR simulation, training patches and query grids.
//!
//! Coordinates are continuous positions in LR index units: LR slice `i` sits
//! at `z = i` and HR slice `j` at ratio `k` sits at `z = j / k`. In-plane
//! coordinates are voxel indices along H (`x`) and W (`y`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A 3D grayscale grid. Storage is slice-major: `data[(z * H + x) * W + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims {dims:?} must be positive")));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::DimsOverflow(dims.map(|d| d as u64)))?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Shape(format!("spacing {spacing:?} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Builds a volume by evaluating `f(x, y, z)` on every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let [h, w, d] = dims;
        let mut data = Vec::with_capacity(h * w * d);
        for z in 0..d {
            for x in 0..h {
                for y in 0..w {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[0] + x) * self.dims[1] + y
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// One contiguous H×W plane.
    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.dims[0] * self.dims[1];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Keeps only the first `depth` slices.
    pub fn truncate_slices(&self, depth: usize) -> Result<Volume> {
        if depth == 0 || depth > self.dims[2] {
            return Err(Error::Shape(format!(
                "cannot keep {depth} of {} slices",
                self.dims[2]
            )));
        }
        let plane = self.dims[0] * self.dims[1];
        Volume::new(
            [self.dims[0], self.dims[1], depth],
            self.spacing,
            self.data[..plane * depth].to_vec(),
        )
    }

    /// Copies an axis-aligned sub-block.
    pub fn region(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Volume> {
        let fits = (0..3).all(|a| {
            extent[a] > 0
                && origin[a]
                    .checked_add(extent[a])
                    .is_some_and(|end| end <= self.dims[a])
        });
        if !fits {
            return Err(Error::RegionOutOfBounds {
                origin,
                extent,
                dims: self.dims,
            });
        }
        Volume::from_fn(extent, self.spacing, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z)
        })
    }

    /// Same geometry, new values. Used by element-wise maps that cannot break
    /// the shape invariant.
    fn with_data(&self, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Volume> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mapped volume".into()));
        }
        Ok(self.with_data(data))
    }
}

/// A continuous query position in LR index units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl QueryPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn in_bounds(&self, dims: [usize; 3]) -> bool {
        let ok = |c: f64, n: usize| c.is_finite() && c >= 0.0 && c <= (n - 1) as f64;
        ok(self.x, dims[0]) && ok(self.y, dims[1]) && ok(self.z, dims[2])
    }
}

/// Training patch geometry: `in_plane × in_plane × lr_depth` LR voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub in_plane: usize,
    pub lr_depth: usize,
}

impl Default for PatchShape {
    fn default() -> Self {
        Self {
            in_plane: 64,
            lr_depth: 17,
        }
    }
}

impl PatchShape {
    /// HR slices spanned by `lr_depth` LR slices at ratio `k`: `(lr_depth - 1)·k + 1`.
    pub fn hr_depth(&self, k: usize) -> usize {
        (self.lr_depth - 1) * k + 1
    }

    pub fn hr_extent(&self, k: usize) -> [usize; 3] {
        [self.in_plane, self.in_plane, self.hr_depth(k)]
    }
}

/// An LR input patch and the HR voxels it should reconstruct, as coordinate pairs.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub lr_patch: Volume,
    pub hr_pairs: Vec<(QueryPoint, f64)>,
    pub ratio: usize,
}

fn check_ratio(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidRatio(0));
    }
    Ok(())
}

/// Min-max rescale to `[0, 1]`.
pub fn normalize(vol: &Volume) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if hi <= lo {
        return Err(Error::DegenerateRange);
    }
    let range = hi - lo;
    Ok(vol.with_data(vol.data.iter().map(|&v| (v - lo) / range).collect()))
}

/// Keeps slices `0, k, 2k, …` and scales the slice spacing by `k`.
pub fn simulate_lr(vol: &Volume, k: usize) -> Result<Volume> {
    check_ratio(k)?;
    let [h, w, d] = vol.dims;
    if d < k {
        return Err(Error::TooSmall {
            dims: vol.dims,
            reason: format!("depth {d} is less than ratio {k}"),
        });
    }
    let out_d = (d - 1) / k + 1;
    let mut data = Vec::with_capacity(h * w * out_d);
    for i in 0..out_d {
        data.extend_from_slice(vol.slice(i * k));
    }
    let [sx, sy, sz] = vol.spacing;
    Volume::new([h, w, out_d], [sx, sy, sz * k as f64], data)
}

/// Crops the HR region at `origin`, simulates its LR patch and lists every HR
/// voxel as a `(coordinate, target)` pair.
pub fn crop_patch(vol: &Volume, origin: [usize; 3], k: usize, shape: PatchShape) -> Result<PatchPair> {
    check_ratio(k)?;
    let region = vol.region(origin, shape.hr_extent(k))?;
    let lr_patch = simulate_lr(&region, k)?;
    let [h, w, d] = region.dims;
    let kf = k as f64;
    let mut hr_pairs = Vec::with_capacity(region.len());
    for j in 0..d {
        let z = j as f64 / kf;
        for x in 0..h {
            for y in 0..w {
                hr_pairs.push((QueryPoint::new(x as f64, y as f64, z), region.get(x, y, j)));
            }
        }
    }
    Ok(PatchPair {
        lr_patch,
        hr_pairs,
        ratio: k,
    })
}

/// Every output position for slice-axis up-sampling by `k`, in slice-major
/// order matching the reconstructed volume's layout.
pub fn make_query_grid(lr_dims: [usize; 3], k: usize) -> Result<Vec<QueryPoint>> {
    check_ratio(k)?;
    let [h, w, d] = lr_dims;
    if d < 2 {
        return Err(Error::TooSmall {
            dims: lr_dims,
            reason: "need at least 2 slices".into(),
        });
    }
    let out_d = (d - 1) * k + 1;
    let kf = k as f64;
    let mut points = Vec::with_capacity(h * w * out_d);
    for j in 0..out_d {
        let z = j as f64 / kf;
        for x in 0..h {
            for y in 0..w {
                points.push(QueryPoint::new(x as f64, y as f64, z));
            }
        }
    }
    Ok(points)
}

pub const SRV1_MAGIC: &[u8; 4] = b"SRV1";
const SRV1_HEADER_LEN: usize = 4 + 12 + 12;

/// Encodes a volume as SRV1: magic, `u32` dims, `f32` spacing, `f32` payload,
/// all little-endian.
pub fn encode_srv1(vol: &Volume) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(SRV1_HEADER_LEN + 4 * vol.len());
    buf.extend_from_slice(SRV1_MAGIC);
    for &d in &vol.dims {
        let d = u32::try_from(d).map_err(|_| Error::DimsOverflow(vol.dims.map(|d| d as u64)))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &s in &vol.spacing {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &v in &vol.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_srv1(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != SRV1_MAGIC {
        return Err(Error::NotSrv1);
    }
    if bytes.len() < SRV1_HEADER_LEN {
        return Err(Error::Truncated {
            what: "SRV1 header",
            expected: SRV1_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let raw_dims = [0, 1, 2].map(|a| u32::from_le_bytes(word(4 + 4 * a)) as u64);
    let spacing = [0, 1, 2].map(|a| f32::from_le_bytes(word(16 + 4 * a)) as f64);
    let count = raw_dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(SRV1_HEADER_LEN as u64))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(Error::DimsOverflow(raw_dims))?;
    if (bytes.len() as u64) < count {
        return Err(Error::Truncated {
            what: "SRV1 payload",
            expected: count,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > count {
        return Err(Error::Shape(format!(
            "SRV1 payload has {} trailing bytes",
            bytes.len() as u64 - count
        )));
    }
    let data = bytes[SRV1_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(raw_dims.map(|d| d as usize), spacing, data)
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_srv1(vol)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_srv1(&bytes)
}
