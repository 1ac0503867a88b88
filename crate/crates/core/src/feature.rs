use crate::error::{Error, Result};
use crate::volume::Volume;

/// Per-voxel `C`-channel codes on an `H×W×D` grid, slice-major with channels
/// innermost: `data[((z * H + x) * W + y) * C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        let expect = dims.iter().product::<usize>() * channels;
        if channels == 0 || dims.contains(&0) || expect != data.len() {
            return Err(Error::Shape(format!(
                "feature volume {dims:?}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![0.0; dims.iter().product::<usize>() * channels],
        }
    }

    /// Single-channel view of a volume; the layouts coincide.
    pub fn from_volume(vol: &Volume) -> Self {
        Self {
            dims: vol.dims(),
            channels: 1,
            data: vol.data().to_vec(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[0] + x) * self.dims[1] + y
    }

    /// Code of the voxel with flat index `v`.
    #[inline]
    pub fn code(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    #[inline]
    pub fn code_mut(&mut self, v: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[v * c..(v + 1) * c]
    }

    pub fn add_assign(&mut self, other: &FeatureVolume) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
