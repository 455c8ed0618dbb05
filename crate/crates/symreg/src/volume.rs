//! Scalar and label volume containers plus the interpolation primitives used by
//! every downstream module.
//!
//! Data layout is a flat array with x varying fastest, then y, then z. All
//! arithmetic is carried out in f64; file payloads are narrower (see [`crate::io`]).
//! Out-of-grid sampling clamps to the border (replicate edge) so boundary
//! statistics are never polluted with synthetic zeros.

use crate::{Error, Result};

/// Grid extents of a volume or field, in voxels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of voxel (x, y, z); x varies fastest.
    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn min_axis(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    pub(crate) fn check_match(&self, other: Dims) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                expected: *self,
                got: other,
            })
        }
    }
}

/// A scalar 3D intensity grid with spacing metadata (mm per voxel).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume, validating length and finiteness.
    pub fn from_vec(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if dims.min_axis() == 0 {
            return Err(Error::InvalidParameter(format!("empty dims {dims:?}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Internal constructor for data already known to be finite.
    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self {
            dims,
            spacing,
            data,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::from_parts_unchecked(dims, [1.0; 3], vec![0.0; dims.len()])
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_parts_unchecked(dims, [1.0; 3], data)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// An integer 3D grid of anatomical labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub dims: Dims,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn from_vec(dims: Dims, data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "label data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u16) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline(always)]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Distinct labels present, ascending.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen = vec![false; usize::from(u16::MAX) + 1];
        for &l in &self.data {
            seen[usize::from(l)] = true;
        }
        (0..=u16::MAX).filter(|&l| seen[usize::from(l)]).collect()
    }
}

/// Per-axis bookkeeping of one trilinear sample: base corner, strides to the
/// far corners (0 when degenerate), fractional weights, and whether the
/// un-clamped coordinate supports a nonzero derivative along each axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TrilinSupport {
    pub base: usize,
    pub dx: usize,
    pub dy: usize,
    pub dz: usize,
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
    pub in_x: bool,
    pub in_y: bool,
    pub in_z: bool,
}

#[inline(always)]
fn axis_support(p: f64, n: usize) -> (usize, usize, f64, bool) {
    // Returns (i0, step, fraction, derivative-valid). Border clamp: anything
    // outside [0, n-1] maps onto the edge with zero coordinate derivative.
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&p);
    let c = p.clamp(0.0, max);
    let mut i0 = c.floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    (i0, 1, c - i0 as f64, inside)
}

#[inline(always)]
pub(crate) fn trilin_support(dims: Dims, px: f64, py: f64, pz: f64) -> TrilinSupport {
    let (x0, sx, fx, in_x) = axis_support(px, dims.nx);
    let (y0, sy, fy, in_y) = axis_support(py, dims.ny);
    let (z0, sz, fz, in_z) = axis_support(pz, dims.nz);
    TrilinSupport {
        base: dims.index(x0, y0, z0),
        dx: sx,
        dy: sy * dims.nx,
        dz: sz * dims.nx * dims.ny,
        fx,
        fy,
        fz,
        in_x,
        in_y,
        in_z,
    }
}

impl TrilinSupport {
    /// Interpolated value of one scalar channel.
    #[inline(always)]
    pub fn value(&self, data: &[f64]) -> f64 {
        let b = self.base;
        let (dx, dy, dz) = (self.dx, self.dy, self.dz);
        let c00 = data[b] + self.fx * (data[b + dx] - data[b]);
        let c10 = data[b + dy] + self.fx * (data[b + dy + dx] - data[b + dy]);
        let c01 = data[b + dz] + self.fx * (data[b + dz + dx] - data[b + dz]);
        let c11 = data[b + dz + dy] + self.fx * (data[b + dz + dy + dx] - data[b + dz + dy]);
        let c0 = c00 + self.fy * (c10 - c00);
        let c1 = c01 + self.fy * (c11 - c01);
        c0 + self.fz * (c1 - c0)
    }

    /// Spatial gradient of the interpolant with respect to the sample point.
    /// Axes whose coordinate was clamped get a zero component (the clamp is flat).
    #[inline(always)]
    pub fn gradient(&self, data: &[f64]) -> [f64; 3] {
        let b = self.base;
        let (dx, dy, dz) = (self.dx, self.dy, self.dz);
        let v000 = data[b];
        let v100 = data[b + dx];
        let v010 = data[b + dy];
        let v110 = data[b + dy + dx];
        let v001 = data[b + dz];
        let v101 = data[b + dz + dx];
        let v011 = data[b + dz + dy];
        let v111 = data[b + dz + dy + dx];
        let (fx, fy, fz) = (self.fx, self.fy, self.fz);
        let gx = if self.in_x {
            let d00 = v100 - v000;
            let d10 = v110 - v010;
            let d01 = v101 - v001;
            let d11 = v111 - v011;
            (d00 + fy * (d10 - d00)) * (1.0 - fz) + (d01 + fy * (d11 - d01)) * fz
        } else {
            0.0
        };
        let gy = if self.in_y {
            let d0 = (v010 + fx * (v110 - v010)) - (v000 + fx * (v100 - v000));
            let d1 = (v011 + fx * (v111 - v011)) - (v001 + fx * (v101 - v001));
            d0 + fz * (d1 - d0)
        } else {
            0.0
        };
        let gz = if self.in_z {
            let c0 = {
                let a = v000 + fx * (v100 - v000);
                let b2 = v010 + fx * (v110 - v010);
                a + fy * (b2 - a)
            };
            let c1 = {
                let a = v001 + fx * (v101 - v001);
                let b2 = v011 + fx * (v111 - v011);
                a + fy * (b2 - a)
            };
            c1 - c0
        } else {
            0.0
        };
        [gx, gy, gz]
    }

    /// The 8 (corner index, weight) pairs, for scatter-style adjoints.
    #[inline(always)]
    pub fn corners(&self) -> [(usize, f64); 8] {
        let (fx, fy, fz) = (self.fx, self.fy, self.fz);
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let b = self.base;
        [
            (b, gx * gy * gz),
            (b + self.dx, fx * gy * gz),
            (b + self.dy, gx * fy * gz),
            (b + self.dy + self.dx, fx * fy * gz),
            (b + self.dz, gx * gy * fz),
            (b + self.dz + self.dx, fx * gy * fz),
            (b + self.dz + self.dy, gx * fy * fz),
            (b + self.dz + self.dy + self.dx, fx * fy * fz),
        ]
    }
}

/// Trilinear sample of a volume at a continuous point in voxel coordinates.
/// Total on finite volumes: out-of-grid points clamp to the border.
pub fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> f64 {
    trilin_support(vol.dims, p[0], p[1], p[2]).value(vol.data())
}

/// Label of the nearest voxel after border clamping. Exact half-way
/// coordinates round half-up per axis.
pub fn sample_nearest(lm: &LabelMap, p: [f64; 3]) -> u16 {
    let nearest = |p: f64, n: usize| -> usize {
        let max = (n - 1) as f64;
        let c = p.clamp(0.0, max);
        ((c + 0.5).floor().min(max)) as usize
    };
    lm.at(
        nearest(p[0], lm.dims.nx),
        nearest(p[1], lm.dims.ny),
        nearest(p[2], lm.dims.nz),
    )
}

/// Sliding box sum along one axis with window truncated at the grid border.
fn box_pass_axis(dims: Dims, src: &[f64], dst: &mut [f64], axis: usize, r: usize) {
    let (len, stride) = match axis {
        0 => (dims.nx, 1),
        1 => (dims.ny, dims.nx),
        _ => (dims.nz, dims.nx * dims.ny),
    };
    let mut line = |start: usize| {
        // Running sum over [i-r, i+r] ∩ [0, len-1].
        let mut acc = 0.0;
        for k in 0..=r.min(len - 1) {
            acc += src[start + k * stride];
        }
        dst[start] = acc;
        for i in 1..len {
            let add = i + r;
            if add < len {
                acc += src[start + add * stride];
            }
            if i > r {
                acc -= src[start + (i - r - 1) * stride];
            }
            dst[start + i * stride] = acc;
        }
    };
    match axis {
        0 => {
            for row in 0..dims.ny * dims.nz {
                line(row * dims.nx);
            }
        }
        1 => {
            for z in 0..dims.nz {
                for x in 0..dims.nx {
                    line(x + dims.nx * dims.ny * z);
                }
            }
        }
        _ => {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    line(x + dims.nx * y);
                }
            }
        }
    }
}

/// Sum of `src` over the w³ window centered at each voxel, truncated at the
/// borders. Separable; the operator is self-adjoint, which the gradient code
/// relies on.
pub(crate) fn box_sum(dims: Dims, src: &[f64], w: usize) -> Vec<f64> {
    debug_assert!(w % 2 == 1 && w >= 1);
    let r = (w - 1) / 2;
    if r == 0 {
        return src.to_vec();
    }
    let mut a = vec![0.0; src.len()];
    let mut b = vec![0.0; src.len()];
    box_pass_axis(dims, src, &mut a, 0, r);
    box_pass_axis(dims, &a, &mut b, 1, r);
    box_pass_axis(dims, &b, &mut a, 2, r);
    a
}

/// In-bounds voxel count of the truncated w³ window at each voxel.
pub(crate) fn window_counts(dims: Dims, w: usize) -> Vec<f64> {
    let r = (w - 1) / 2;
    let axis_count = |i: usize, n: usize| -> f64 {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        (hi - lo + 1) as f64
    };
    let cx: Vec<f64> = (0..dims.nx).map(|i| axis_count(i, dims.nx)).collect();
    let cy: Vec<f64> = (0..dims.ny).map(|i| axis_count(i, dims.ny)).collect();
    let cz: Vec<f64> = (0..dims.nz).map(|i| axis_count(i, dims.nz)).collect();
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            let cyz = cy[y] * cz[z];
            for x in 0..dims.nx {
                out.push(cx[x] * cyz);
            }
        }
    }
    out
}

pub(crate) fn check_window(w: usize) -> Result<()> {
    if w == 0 || w % 2 == 0 {
        Err(Error::InvalidWindow(w))
    } else {
        Ok(())
    }
}

/// Mean of `vol` over the w³ window centered at each voxel; windows truncate
/// at the border so only in-bounds voxels enter each mean.
pub fn local_mean(vol: &Volume, w: usize) -> Result<Volume> {
    check_window(w)?;
    let sums = box_sum(vol.dims, vol.data(), w);
    let counts = window_counts(vol.dims, w);
    let data = sums
        .iter()
        .zip(counts.iter())
        .map(|(s, c)| s / c)
        .collect();
    Ok(Volume::from_parts_unchecked(vol.dims, vol.spacing, data))
}
