//! The scalar loss terms and their assembly into the registration objective.
//!
//! Similarity is windowed normalized cross-correlation with local means over a
//! w³ box, truncated at the volume border. The local window sums are computed
//! with separable sliding box filters, so a full NCC evaluation is O(N) in the
//! voxel count. The correlation at each voxel is
//!
//!   r(x) = cross(x) / sqrt(var_I(x)·var_J(x) + ε)
//!
//! and the reported NCC is the mean of r over all voxels, which keeps the
//! default term weights meaningful across grid sizes.
//!
//! The orientation penalty takes the Jacobian of φ(x) = x + u(x) by central
//! differences (one-sided on the faces), and averages ReLU(−det) over all
//! supplied fields. Smoothness is the voxel-mean of squared forward
//! differences of both velocity fields; the magnitude term is the absolute
//! difference of the two fields' mean squared magnitudes, so minimizing it
//! balances the two directions instead of shrinking one of them.

use crate::field::{full_transforms, DeformationField, VelocityField};
use crate::volume::{box_sum, check_window, window_counts, Dims, Volume};
use crate::warp::warp_image;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Weights and similarity parameters of the total objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the negative-Jacobian orientation penalty (λ₁).
    pub lambda_jdet: f64,
    /// Weight of the velocity smoothness term (λ₂).
    pub lambda_smooth: f64,
    /// Weight of the magnitude-balance term (λ₃).
    pub lambda_mag: f64,
    /// NCC window edge length; odd.
    pub window: usize,
    /// Variance floor inside the NCC denominator square root.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_jdet: 1000.0,
            lambda_smooth: 3.0,
            lambda_mag: 0.1,
            window: 7,
            epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window)?;
        if self.lambda_jdet < 0.0 || self.lambda_smooth < 0.0 || self.lambda_mag < 0.0 {
            return Err(Error::InvalidParameter(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(
                "ncc epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Every term of one objective evaluation plus the weighted total.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_mean: f64,
    pub l_pair: f64,
    pub l_jdet: f64,
    pub l_reg: f64,
    pub l_mag: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn assemble(
        l_mean: f64,
        l_pair: f64,
        l_jdet: f64,
        l_reg: f64,
        l_mag: f64,
        w: &LossWeights,
    ) -> Self {
        let total = (l_mean + l_pair)
            + w.lambda_jdet * l_jdet
            + w.lambda_smooth * l_reg
            + w.lambda_mag * l_mag;
        Self {
            l_mean,
            l_pair,
            l_jdet,
            l_reg,
            l_mag,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_mean.is_finite()
            && self.l_pair.is_finite()
            && self.l_jdet.is_finite()
            && self.l_reg.is_finite()
            && self.l_mag.is_finite()
    }
}

/// Window statistics shared by the NCC value and its adjoint.
pub(crate) struct NccParts {
    pub s_i: Vec<f64>,
    pub s_j: Vec<f64>,
    pub s_ii: Vec<f64>,
    pub s_jj: Vec<f64>,
    pub s_ij: Vec<f64>,
    pub counts: Vec<f64>,
}

pub(crate) fn ncc_parts(dims: Dims, i: &[f64], j: &[f64], w: usize) -> NccParts {
    let n = dims.len();
    let mut ii = vec![0.0; n];
    let mut jj = vec![0.0; n];
    let mut ij = vec![0.0; n];
    for k in 0..n {
        ii[k] = i[k] * i[k];
        jj[k] = j[k] * j[k];
        ij[k] = i[k] * j[k];
    }
    NccParts {
        s_i: box_sum(dims, i, w),
        s_j: box_sum(dims, j, w),
        s_ii: box_sum(dims, &ii, w),
        s_jj: box_sum(dims, &jj, w),
        s_ij: box_sum(dims, &ij, w),
        counts: window_counts(dims, w),
    }
}

/// Per-voxel correlation intermediates.
#[derive(Clone, Copy)]
pub(crate) struct NccVoxel {
    pub var_i: f64,
    pub var_j: f64,
    pub denom2: f64,
    pub r: f64,
}

#[inline(always)]
pub(crate) fn ncc_voxel(parts: &NccParts, k: usize, eps: f64) -> NccVoxel {
    let n = parts.counts[k];
    let s_i = parts.s_i[k];
    let s_j = parts.s_j[k];
    let cross = parts.s_ij[k] - s_i * s_j / n;
    let var_i = parts.s_ii[k] - s_i * s_i / n;
    let var_j = parts.s_jj[k] - s_j * s_j / n;
    let denom2 = var_i * var_j + eps;
    let r = cross / denom2.sqrt();
    NccVoxel {
        var_i,
        var_j,
        denom2,
        r,
    }
}

/// Mean local normalized cross-correlation of two volumes over w³ windows.
pub fn ncc(i: &Volume, j: &Volume, w: usize, eps: f64) -> Result<f64> {
    i.dims.check_match(j.dims)?;
    check_window(w)?;
    let parts = ncc_parts(i.dims, i.data(), j.data(), w);
    let n = i.dims.len();
    let mut acc = 0.0;
    for k in 0..n {
        acc += ncc_voxel(&parts, k, eps).r;
    }
    Ok(acc / n as f64)
}

/// Dissimilarity of the two half-warped images: −NCC(Xw, Yw).
pub fn loss_mean_shape(xw: &Volume, yw: &Volume, w: usize, eps: f64) -> Result<f64> {
    Ok(-ncc(xw, yw, w, eps)?)
}

/// Pairwise dissimilarity of each fully warped image against its counterpart:
/// −NCC(X₁, Y) − NCC(Y₁, X).
pub fn loss_pair(x1: &Volume, y: &Volume, y1: &Volume, x: &Volume, w: usize, eps: f64) -> Result<f64> {
    let a = ncc(x1, y, w, eps)?;
    let b = ncc(y1, x, w, eps)?;
    Ok(-a - b)
}

/// Difference stencil along one axis: central in the interior, one-sided on
/// the faces. Returns flat offsets of the plus/minus taps and the scale.
#[inline(always)]
pub(crate) fn axis_stencil(i: usize, n: usize, stride: usize, idx: usize) -> (usize, usize, f64) {
    if i == 0 {
        (idx + stride, idx, 1.0)
    } else if i == n - 1 {
        (idx, idx - stride, 1.0)
    } else {
        (idx + stride, idx - stride, 0.5)
    }
}

/// Jacobian of φ(x) = x + u(x) at one voxel; rows are components, columns axes.
#[inline(always)]
pub(crate) fn jacobian_at(
    dims: Dims,
    comps: [&[f64]; 3],
    x: usize,
    y: usize,
    z: usize,
    idx: usize,
) -> [[f64; 3]; 3] {
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let coords = [x, y, z];
    let lens = [dims.nx, dims.ny, dims.nz];
    let mut jac = [[0.0; 3]; 3];
    for axis in 0..3 {
        let (p, m, s) = axis_stencil(coords[axis], lens[axis], strides[axis], idx);
        for comp in 0..3 {
            jac[comp][axis] = s * (comps[comp][p] - comps[comp][m]);
        }
        jac[axis][axis] += 1.0;
    }
    jac
}

#[inline(always)]
pub(crate) fn det3(j: &[[f64; 3]; 3]) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

/// Cofactor matrix of a 3×3 matrix: ∂det/∂j_ij.
#[inline(always)]
pub(crate) fn cofactor3(j: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            j[1][1] * j[2][2] - j[1][2] * j[2][1],
            -(j[1][0] * j[2][2] - j[1][2] * j[2][0]),
            j[1][0] * j[2][1] - j[1][1] * j[2][0],
        ],
        [
            -(j[0][1] * j[2][2] - j[0][2] * j[2][1]),
            j[0][0] * j[2][2] - j[0][2] * j[2][0],
            -(j[0][0] * j[2][1] - j[0][1] * j[2][0]),
        ],
        [
            j[0][1] * j[1][2] - j[0][2] * j[1][1],
            -(j[0][0] * j[1][2] - j[0][2] * j[1][0]),
            j[0][0] * j[1][1] - j[0][1] * j[1][0],
        ],
    ]
}

fn check_jacobian_dims(dims: Dims) -> Result<()> {
    if dims.min_axis() < 3 {
        Err(Error::GridTooSmall(dims))
    } else {
        Ok(())
    }
}

/// Per-voxel determinant of the Jacobian of φ(x) = x + u(x).
pub fn jacobian_det_field(d: &DeformationField) -> Result<Volume> {
    check_jacobian_dims(d.dims)?;
    let dims = d.dims;
    let comps = [d.component(0), d.component(1), d.component(2)];
    let mut out = Vec::with_capacity(dims.len());
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let jac = jacobian_at(dims, comps, x, y, z, idx);
                out.push(det3(&jac));
                idx += 1;
            }
        }
    }
    Ok(Volume::from_parts_unchecked(dims, [1.0; 3], out))
}

pub(crate) fn jdet_penalty_sum(d: &DeformationField) -> Result<f64> {
    let dets = jacobian_det_field(d)?;
    Ok(dets.data().iter().map(|&v| (-v).max(0.0)).sum())
}

/// Mean ReLU(−det) over all supplied fields' determinant volumes.
pub fn loss_jdet(fields: &[&DeformationField]) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for f in fields {
        acc += jdet_penalty_sum(f)?;
        count += f.dims.len();
    }
    Ok(acc / count as f64)
}

pub(crate) fn smooth_sum(v: &VelocityField) -> f64 {
    let dims = v.dims;
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let lens = [dims.nx, dims.ny, dims.nz];
    let mut acc = 0.0;
    for comp in 0..3 {
        let data = v.component(comp);
        for axis in 0..3 {
            let stride = strides[axis];
            let mut idx = 0;
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        let i = [x, y, z][axis];
                        if i + 1 < lens[axis] {
                            let d = data[idx + stride] - data[idx];
                            acc += d * d;
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    acc
}

/// Squared forward differences of every component of both velocity fields,
/// averaged over the voxel count.
pub fn loss_smooth(v_xy: &VelocityField, v_yx: &VelocityField) -> Result<f64> {
    v_xy.dims.check_match(v_yx.dims)?;
    Ok((smooth_sum(v_xy) + smooth_sum(v_yx)) / v_xy.dims.len() as f64)
}

pub(crate) fn squared_norm(v: &VelocityField) -> f64 {
    v.data().iter().map(|&x| x * x).sum()
}

/// Absolute difference of the two fields' squared norms per component count,
/// so minimizing it balances the velocity magnitudes across directions.
pub fn loss_mag(v_xy: &VelocityField, v_yx: &VelocityField) -> Result<f64> {
    v_xy.dims.check_match(v_yx.dims)?;
    let n = 3.0 * v_xy.dims.len() as f64;
    Ok((squared_norm(v_xy) - squared_norm(v_yx)).abs() / n)
}

/// Evaluates the complete objective for one image pair and velocity pair:
/// half/full transforms, all warps, every term, and the weighted total.
/// The orientation penalty is applied to the two half fields; a composition
/// of orientation-preserving maps preserves orientation.
pub fn total_loss(
    x: &Volume,
    y: &Volume,
    v_xy: &VelocityField,
    v_yx: &VelocityField,
    weights: &LossWeights,
    t_steps: u32,
) -> Result<LossBreakdown> {
    x.dims.check_match(y.dims)?;
    x.dims.check_match(v_xy.dims)?;
    weights.validate()?;
    let ft = full_transforms(v_xy, v_yx, t_steps)?;
    let xw = warp_image(x, &ft.xy_half)?;
    let yw = warp_image(y, &ft.yx_half)?;
    let x1 = warp_image(x, &ft.xy_full)?;
    let y1 = warp_image(y, &ft.yx_full)?;
    let l_mean = loss_mean_shape(&xw, &yw, weights.window, weights.epsilon)?;
    let l_pair = loss_pair(&x1, y, &y1, x, weights.window, weights.epsilon)?;
    let l_jdet = loss_jdet(&[&ft.xy_half, &ft.yx_half])?;
    let l_reg = loss_smooth(v_xy, v_yx)?;
    let l_mag = loss_mag(v_xy, v_yx)?;
    Ok(LossBreakdown::assemble(
        l_mean, l_pair, l_jdet, l_reg, l_mag, weights,
    ))
}
