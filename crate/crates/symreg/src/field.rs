//! Deformation-field algebra: identity, composition, softsign velocity
//! normalization, and scaling-and-squaring exponentiation of stationary
//! velocity fields.
//!
//! Fields store per-voxel displacements u with φ(x) = x + u(x), in voxel units,
//! planar component layout (all x components, then y, then z). Displacement
//! storage makes the identity exactly representable as zeros and lets
//! composition and warping interpolate u directly.
//!
//! Exponentiation initializes u = sign·v/2^T and squares the field T−1 times
//! for the half-way (time 0.5) transform and T times for the full (time 1)
//! transform. The inverse transform integrates −v with the same recurrence.

use crate::volume::{trilin_support, Dims};
use crate::{Error, Result};

macro_rules! vec3_field {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            pub dims: Dims,
            data: Vec<f64>,
        }

        impl $name {
            /// Builds from planar data (x plane, y plane, z plane), validating
            /// length and finiteness.
            pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
                if data.len() != 3 * dims.len() {
                    return Err(Error::InvalidParameter(format!(
                        "field data length {} does not match 3x{:?}",
                        data.len(),
                        dims
                    )));
                }
                if !data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("field data".into()));
                }
                Ok(Self { dims, data })
            }

            pub(crate) fn from_parts_unchecked(dims: Dims, data: Vec<f64>) -> Self {
                debug_assert_eq!(data.len(), 3 * dims.len());
                Self { dims, data }
            }

            pub fn zeros(dims: Dims) -> Self {
                Self {
                    dims,
                    data: vec![0.0; 3 * dims.len()],
                }
            }

            pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
                let n = dims.len();
                let mut data = vec![0.0; 3 * n];
                let mut idx = 0;
                for z in 0..dims.nz {
                    for y in 0..dims.ny {
                        for x in 0..dims.nx {
                            let v = f(x, y, z);
                            data[idx] = v[0];
                            data[n + idx] = v[1];
                            data[2 * n + idx] = v[2];
                            idx += 1;
                        }
                    }
                }
                Self { dims, data }
            }

            /// Full planar slice: x plane, then y plane, then z plane.
            pub fn data(&self) -> &[f64] {
                &self.data
            }

            #[allow(dead_code)]
            pub(crate) fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            /// One component plane (0 = x, 1 = y, 2 = z).
            pub fn component(&self, c: usize) -> &[f64] {
                let n = self.dims.len();
                &self.data[c * n..(c + 1) * n]
            }

            /// Per-voxel 3-vector at (x, y, z).
            #[inline(always)]
            pub fn vector_at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
                let n = self.dims.len();
                let idx = self.dims.index(x, y, z);
                [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
            }

            /// Largest per-voxel Euclidean magnitude.
            pub fn max_magnitude(&self) -> f64 {
                let n = self.dims.len();
                let mut best: f64 = 0.0;
                for i in 0..n {
                    let m = self.data[i] * self.data[i]
                        + self.data[n + i] * self.data[n + i]
                        + self.data[2 * n + i] * self.data[2 * n + i];
                    best = best.max(m);
                }
                best.sqrt()
            }

            /// Mean per-voxel Euclidean magnitude.
            pub fn mean_magnitude(&self) -> f64 {
                let n = self.dims.len();
                let mut acc = 0.0;
                for i in 0..n {
                    let m = self.data[i] * self.data[i]
                        + self.data[n + i] * self.data[n + i]
                        + self.data[2 * n + i] * self.data[2 * n + i];
                    acc += m.sqrt();
                }
                acc / n as f64
            }
        }
    };
}

vec3_field!(
    VelocityField,
    "A stationary per-voxel velocity 3-vector field, in voxels."
);
vec3_field!(
    DeformationField,
    "A per-voxel displacement field u with φ(x) = x + u(x), in voxels."
);

/// Integration span of the scaling-and-squaring exponential.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeTarget {
    /// Time-0.5 transform (the half-way map toward the implicit mean shape).
    Half,
    /// Time-1 transform.
    Full,
}

/// Orientation of the flow: `Inverse` integrates the negated velocity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowSign {
    Forward,
    Inverse,
}

impl FlowSign {
    pub fn factor(self) -> f64 {
        match self {
            FlowSign::Forward => 1.0,
            FlowSign::Inverse => -1.0,
        }
    }
}

/// The four transforms produced from one velocity-field pair.
#[derive(Clone, Debug)]
pub struct FullTransforms {
    pub xy_half: DeformationField,
    pub yx_half: DeformationField,
    pub xy_full: DeformationField,
    pub yx_full: DeformationField,
}

/// The identity transformation: zero displacement everywhere.
pub fn identity_field(dims: Dims) -> DeformationField {
    DeformationField::zeros(dims)
}

/// Componentwise `c·x/(1+|x|)`, bounding every component strictly inside (−c, c).
pub fn softsign_normalize(raw: &VelocityField, c: f64) -> VelocityField {
    let data = raw.data().iter().map(|&x| c * x / (1.0 + x.abs())).collect();
    VelocityField::from_parts_unchecked(raw.dims, data)
}

/// Core composition kernel on planar slices: out(x) = u_b(x) + u_a(x + u_b(x)),
/// each component of u_a sampled trilinearly with border clamp.
pub(crate) fn compose_planar(dims: Dims, a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = dims.len();
    let (ax, ay, az) = (&a[..n], &a[n..2 * n], &a[2 * n..]);
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let bx = b[idx];
                let by = b[n + idx];
                let bz = b[2 * n + idx];
                let sup = trilin_support(dims, x as f64 + bx, y as f64 + by, z as f64 + bz);
                out[idx] = bx + sup.value(ax);
                out[n + idx] = by + sup.value(ay);
                out[2 * n + idx] = bz + sup.value(az);
                idx += 1;
            }
        }
    }
}

/// Composition a∘b with result(x) = a(b(x)).
pub fn compose(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    a.dims.check_match(b.dims)?;
    let mut out = vec![0.0; 3 * a.dims.len()];
    compose_planar(a.dims, a.data(), b.data(), &mut out);
    Ok(DeformationField::from_parts_unchecked(a.dims, out))
}

pub(crate) fn squaring_count(target: TimeTarget, t_steps: u32) -> u32 {
    match target {
        TimeTarget::Half => t_steps - 1,
        TimeTarget::Full => t_steps,
    }
}

/// Scaling-and-squaring exponentiation of a stationary velocity field.
///
/// Starts from u = sign·v/2^T and applies the squaring recurrence
/// φ^(1/2^(t−1)) = φ^(1/2^t) ∘ φ^(1/2^t): T−1 times for [`TimeTarget::Half`],
/// T times for [`TimeTarget::Full`].
pub fn exp_svf(
    v: &VelocityField,
    target: TimeTarget,
    sign: FlowSign,
    t_steps: u32,
) -> DeformationField {
    assert!(t_steps >= 1, "t_steps must be at least 1");
    let trace = exp_svf_trace(v, target, sign, t_steps);
    let last = trace.steps.len() - 1;
    DeformationField::from_parts_unchecked(v.dims, trace.steps.into_iter().nth(last).unwrap())
}

/// All intermediate fields of the squaring recurrence, kept for the adjoint sweep.
pub(crate) struct ExpTrace {
    pub scale: f64,
    /// u_0 .. u_K in planar layout; u_K is the integrated field.
    pub steps: Vec<Vec<f64>>,
}

pub(crate) fn exp_svf_trace(
    v: &VelocityField,
    target: TimeTarget,
    sign: FlowSign,
    t_steps: u32,
) -> ExpTrace {
    let scale = sign.factor() / (1u64 << t_steps) as f64;
    let squarings = squaring_count(target, t_steps);
    let mut steps = Vec::with_capacity(squarings as usize + 1);
    steps.push(v.data().iter().map(|&x| x * scale).collect::<Vec<f64>>());
    for _ in 0..squarings {
        let prev = steps.last().unwrap();
        let mut next = vec![0.0; prev.len()];
        compose_planar(v.dims, prev, prev, &mut next);
        steps.push(next);
    }
    ExpTrace { scale, steps }
}

/// Builds the two half-way transforms and the two composed full transforms:
/// the full X→Y map is the inverse Y half applied after the forward X half.
pub fn full_transforms(
    v_xy: &VelocityField,
    v_yx: &VelocityField,
    t_steps: u32,
) -> Result<FullTransforms> {
    v_xy.dims.check_match(v_yx.dims)?;
    let xy_half = exp_svf(v_xy, TimeTarget::Half, FlowSign::Forward, t_steps);
    let yx_half = exp_svf(v_yx, TimeTarget::Half, FlowSign::Forward, t_steps);
    let xy_inv_half = exp_svf(v_xy, TimeTarget::Half, FlowSign::Inverse, t_steps);
    let yx_inv_half = exp_svf(v_yx, TimeTarget::Half, FlowSign::Inverse, t_steps);
    let xy_full = compose(&yx_inv_half, &xy_half)?;
    let yx_full = compose(&xy_inv_half, &yx_half)?;
    Ok(FullTransforms {
        xy_half,
        yx_half,
        xy_full,
        yx_full,
    })
}
