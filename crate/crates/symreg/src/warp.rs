//! Applying deformation fields to intensity volumes and label maps.
//!
//! Backward mapping: each output voxel pulls from the input at x + u(x),
//! trilinearly for intensities and nearest-neighbor for labels.

use crate::field::DeformationField;
use crate::volume::{sample_nearest, trilin_support, LabelMap, Volume};
use crate::Result;

/// Warps an intensity volume: out(x) = vol(x + u(x)) with trilinear sampling.
pub fn warp_image(vol: &Volume, d: &DeformationField) -> Result<Volume> {
    vol.dims.check_match(d.dims)?;
    let dims = vol.dims;
    let n = dims.len();
    let (ux, uy, uz) = (d.component(0), d.component(1), d.component(2));
    let src = vol.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let sup = trilin_support(
                    dims,
                    x as f64 + ux[idx],
                    y as f64 + uy[idx],
                    z as f64 + uz[idx],
                );
                out.push(sup.value(src));
                idx += 1;
            }
        }
    }
    Ok(Volume::from_parts_unchecked(dims, vol.spacing, out))
}

/// Warps a label map with nearest-neighbor sampling; never invents labels.
pub fn warp_labels(lm: &LabelMap, d: &DeformationField) -> Result<LabelMap> {
    lm.dims.check_match(d.dims)?;
    let dims = lm.dims;
    let (ux, uy, uz) = (d.component(0), d.component(1), d.component(2));
    let mut out = Vec::with_capacity(dims.len());
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                out.push(sample_nearest(
                    lm,
                    [
                        x as f64 + ux[idx],
                        y as f64 + uy[idx],
                        z as f64 + uz[idx],
                    ],
                ));
                idx += 1;
            }
        }
    }
    LabelMap::from_vec(dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::identity_field;
    use crate::volume::Dims;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identity_warp_is_bitwise_identity() {
        let dims = Dims::new(6, 5, 4);
        let vol = random_volume(dims, 1);
        let out = warp_image(&vol, &identity_field(dims)).unwrap();
        assert_eq!(out.data(), vol.data());
        let lm = LabelMap::from_fn(dims, |x, _, _| (x % 3) as u16);
        let lout = warp_labels(&lm, &identity_field(dims)).unwrap();
        assert_eq!(lout.data(), lm.data());
    }

    #[test]
    fn constant_shift_moves_content() {
        let dims = Dims::new(8, 4, 4);
        let vol = random_volume(dims, 2);
        let d = DeformationField::from_fn(dims, |_, _, _| [1.0, 0.0, 0.0]);
        let out = warp_image(&vol, &d).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..7 {
                    assert_eq!(out.at(x, y, z), vol.at(x + 1, y, z));
                }
            }
        }
        let lm = LabelMap::from_fn(dims, |x, y, z| (x + 10 * y + 100 * z) as u16);
        let lout = warp_labels(&lm, &d).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                assert_eq!(lout.at(7, y, z), lm.at(7, y, z)); // border replication
                for x in 0..7 {
                    assert_eq!(lout.at(x, y, z), lm.at(x + 1, y, z));
                }
            }
        }
    }

    #[test]
    fn warp_matches_pointwise_oracle() {
        let dims = Dims::new(8, 8, 8);
        let vol = random_volume(dims, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DeformationField::from_fn(dims, |_, _, _| {
            [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ]
        });
        let out = warp_image(&vol, &d).unwrap();
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let u = d.vector_at(x, y, z);
                    let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                    // Oracle: direct 8-corner blend with manual clamping.
                    let cl = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
                    let (px, py, pz) = (cl(p[0], 8), cl(p[1], 8), cl(p[2], 8));
                    let (x0, y0, z0) = (
                        (px.floor() as usize).min(6),
                        (py.floor() as usize).min(6),
                        (pz.floor() as usize).min(6),
                    );
                    let (fx, fy, fz) = (px - x0 as f64, py - y0 as f64, pz - z0 as f64);
                    let mut acc = 0.0;
                    for (dz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
                        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                                acc += wx * wy * wz * vol.at(x0 + dx, y0 + dy, z0 + dz);
                            }
                        }
                    }
                    assert_relative_eq!(out.at(x, y, z), acc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn warped_labels_match_nearest_oracle() {
        let dims = Dims::new(6, 6, 6);
        let lm = LabelMap::from_fn(dims, |x, y, z| ((x / 2) + 3 * (y / 2) + 9 * (z / 2)) as u16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = DeformationField::from_fn(dims, |_, _, _| {
            [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ]
        });
        let out = warp_labels(&lm, &d).unwrap();
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let u = d.vector_at(x, y, z);
                    let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                    assert_eq!(out.at(x, y, z), sample_nearest(&lm, p));
                }
            }
        }
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let vol = random_volume(Dims::new(4, 4, 4), 6);
        let d = identity_field(Dims::new(4, 4, 5));
        assert!(warp_image(&vol, &d).is_err());
    }

    proptest! {
        #[test]
        fn warp_respects_volume_range(seed in 0u64..500) {
            let dims = Dims::new(5, 5, 5);
            let vol = random_volume(dims, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let d = DeformationField::from_fn(dims, |_, _, _| {
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]
            });
            let out = warp_image(&vol, &d).unwrap();
            let (lo, hi) = vol.min_max();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn warp_never_invents_labels(seed in 0u64..500) {
            let dims = Dims::new(5, 5, 5);
            let lm = LabelMap::from_fn(dims, |x, y, _| ((x + y) % 4) as u16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DeformationField::from_fn(dims, |_, _, _| {
                [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]
            });
            let out = warp_labels(&lm, &d).unwrap();
            let allowed = lm.labels();
            for l in out.labels() {
                prop_assert!(allowed.contains(&l));
            }
        }
    }
}
