//! Shared helpers for unit tests: deterministic random volumes and smooth
//! low-frequency velocity fields.

use crate::field::VelocityField;
use crate::volume::{Dims, Volume};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub(crate) fn random_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(dims, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Smooth periodic velocity field with per-component amplitude about `amplitude`.
pub(crate) fn smooth_field(dims: Dims, seed: u64, amplitude: f64) -> VelocityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..9)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    VelocityField::from_fn(dims, |x, y, z| {
        let fx = x as f64 / dims.nx as f64 * std::f64::consts::TAU;
        let fy = y as f64 / dims.ny as f64 * std::f64::consts::TAU;
        let fz = z as f64 / dims.nz as f64 * std::f64::consts::TAU;
        [
            amplitude * (fx + phases[0]).sin() * (fy + phases[1]).cos() * (fz + phases[2]).cos(),
            amplitude * (fy + phases[3]).sin() * (fz + phases[4]).cos() * (fx + phases[5]).cos(),
            amplitude * (fz + phases[6]).sin() * (fx + phases[7]).cos() * (fy + phases[8]).cos(),
        ]
    })
}

/// Smooth blob image whose feature scale stays above a voxel even on tiny
/// grids; finite-difference probes need bounded interpolation curvature.
pub(crate) fn smooth_blob_image(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let bumps: Vec<([f64; 3], [f64; 3], f64)> = (0..24)
        .map(|_| {
            let center = [
                rng.gen_range(0.1..0.9) * (extent[0] - 1.0),
                rng.gen_range(0.1..0.9) * (extent[1] - 1.0),
                rng.gen_range(0.1..0.9) * (extent[2] - 1.0),
            ];
            let radius = [
                (rng.gen_range(0.15..0.35) * extent[0]).max(1.2),
                (rng.gen_range(0.15..0.35) * extent[1]).max(1.2),
                (rng.gen_range(0.15..0.35) * extent[2]).max(1.2),
            ];
            let amp = rng.gen_range(0.3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (center, radius, amp)
        })
        .collect();
    Volume::from_fn(dims, |x, y, z| {
        bumps
            .iter()
            .map(|(c, r, a)| {
                let dx = (x as f64 - c[0]) / r[0];
                let dy = (y as f64 - c[1]) / r[1];
                let dz = (z as f64 - c[2]) / r[2];
                a * (-(dx * dx + dy * dy + dz * dz)).exp()
            })
            .sum()
    })
}

/// A smooth synthetic gradient-check instance: blob image pair plus smooth
/// raw parameter fields whose normalized velocities stay below ~3 voxels.
pub(crate) fn fd_instance(
    dims: Dims,
    seed: u64,
) -> (Volume, Volume, VelocityField, VelocityField) {
    let x = smooth_blob_image(dims, seed);
    let y = smooth_blob_image(dims, seed ^ 0x9e37);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ff);
    let raw_xy = crate::synth::smooth_noise_velocity(&mut rng, dims, 1.5, 0.03);
    let raw_yx = crate::synth::smooth_noise_velocity(&mut rng, dims, 1.5, 0.03);
    (x, y, raw_xy, raw_yx)
}
