//! Band-limited synthetic volumes for tests, smoke runs and demos.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::Result;
use crate::volume::{normalize, Volume};

/// A sum of `waves` random plane cosines whose per-axis frequencies (cycles
/// per voxel) stay below `max_freq`, min-max normalized to `[0, 1]`.
pub fn smooth_random_field<R: Rng + ?Sized>(
    dims: [usize; 3],
    waves: usize,
    max_freq: [f64; 3],
    rng: &mut R,
) -> Result<Volume> {
    let comps: Vec<([f64; 3], f64, f64)> = (0..waves.max(1))
        .map(|_| {
            let freq = max_freq.map(|f| if f > 0.0 { rng.gen_range(-f..f) } else { 0.0 });
            let amp = rng.gen_range(0.5..1.0);
            let phase = rng.gen_range(0.0..TAU);
            (freq, amp, phase)
        })
        .collect();
    let raw = Volume::from_fn(dims, [1.0; 3], |x, y, z| {
        comps
            .iter()
            .map(|(f, a, p)| a * (TAU * (f[0] * x as f64 + f[1] * y as f64 + f[2] * z as f64) + p).cos())
            .sum()
    })?;
    normalize(&raw)
}
