//! Exact gradients of the registration objective with respect to the raw
//! (pre-softsign) velocity parameters, by hand-written reverse-mode adjoints,
//! plus a central finite-difference harness for verifying them.
//!
//! The forward pass reuses the same kernels as [`crate::loss::total_loss`]
//! (so both report bitwise-identical loss values) while keeping every
//! intermediate squaring field. The backward sweep then walks the pipeline in
//! reverse:
//!
//! - NCC: closed form through the window statistics. The box-sum operator is
//!   self-adjoint, so each sum's adjoint is one more box sum.
//! - warping: the adjoint lands on the displacement through the trilinear
//!   intensity gradient of the sampled volume.
//! - composition out(x) = b(x) + a(x + b(x)): the adjoint flows into a through
//!   scatter on the 8 sampled corners, and into b both directly and through
//!   the sample-coordinate gradient of a.
//! - squaring: one composition with both arguments the same field; adjoints of
//!   the two roles add. The recurrence is unrolled over the stored fields.
//! - Jacobian penalty: cofactor expansion of the determinant scattered through
//!   the difference stencils, active only where the determinant is negative.
//! - softsign: componentwise factor c/(1+|raw|)².
//!
//! Coordinates clamped at the border carry zero coordinate gradient (the
//! clamp is flat), which is also what the finite-difference oracle sees for
//! interior-supported components.

use crate::field::{compose_planar, exp_svf_trace, ExpTrace, FlowSign, TimeTarget, VelocityField};
use crate::loss::{
    axis_stencil, cofactor3, det3, jacobian_at, ncc_parts, ncc_voxel, LossBreakdown, LossWeights,
};
use crate::volume::{box_sum, trilin_support, Dims, Volume};
use crate::warp::warp_image;
use crate::{Error, Result};

/// Gradient of the objective with respect to both raw parameter fields,
/// planar layout matching [`VelocityField`].
#[derive(Clone, Debug)]
pub struct GradientPair {
    pub dims: Dims,
    pub xy: Vec<f64>,
    pub yx: Vec<f64>,
}

impl GradientPair {
    pub fn max_abs(&self) -> f64 {
        self.xy
            .iter()
            .chain(self.yx.iter())
            .fold(0.0f64, |m, &g| m.max(g.abs()))
    }

    pub fn component(&self, p: ParamIndex) -> f64 {
        match p.side {
            FieldSide::Xy => self.xy[p.offset],
            FieldSide::Yx => self.yx[p.offset],
        }
    }
}

/// Which parameter field a flat component offset refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldSide {
    Xy,
    Yx,
}

/// One scalar component of the raw parameters: a planar offset in [0, 3N).
#[derive(Clone, Copy, Debug)]
pub struct ParamIndex {
    pub side: FieldSide,
    pub offset: usize,
}

/// Enables objective terms individually, for diagnostics and gradient checks.
/// Disabled terms are reported as zero and excluded from the total.
#[derive(Clone, Copy, Debug)]
pub struct TermSelect {
    pub mean: bool,
    pub pair: bool,
    pub jdet: bool,
    pub reg: bool,
    pub mag: bool,
}

impl TermSelect {
    pub const ALL: TermSelect = TermSelect {
        mean: true,
        pair: true,
        jdet: true,
        reg: true,
        mag: true,
    };
    pub const MEAN: TermSelect = TermSelect { mean: true, ..Self::NONE };
    pub const PAIR: TermSelect = TermSelect { pair: true, ..Self::NONE };
    pub const JDET: TermSelect = TermSelect { jdet: true, ..Self::NONE };
    pub const REG: TermSelect = TermSelect { reg: true, ..Self::NONE };
    pub const MAG: TermSelect = TermSelect { mag: true, ..Self::NONE };
    const NONE: TermSelect = TermSelect {
        mean: false,
        pair: false,
        jdet: false,
        reg: false,
        mag: false,
    };
}

impl Default for TermSelect {
    fn default() -> Self {
        Self::ALL
    }
}

struct Pipeline {
    v_xy: VelocityField,
    v_yx: VelocityField,
    e_xy_fwd: ExpTrace,
    e_yx_fwd: ExpTrace,
    e_xy_inv: ExpTrace,
    e_yx_inv: ExpTrace,
    xy_full: Vec<f64>,
    yx_full: Vec<f64>,
    xw: Volume,
    yw: Volume,
    x1: Volume,
    y1: Volume,
    breakdown: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
fn forward(
    x: &Volume,
    y: &Volume,
    raw_xy: &VelocityField,
    raw_yx: &VelocityField,
    weights: &LossWeights,
    t_steps: u32,
    c: f64,
    select: TermSelect,
) -> Result<Pipeline> {
    x.dims.check_match(y.dims)?;
    x.dims.check_match(raw_xy.dims)?;
    raw_xy.dims.check_match(raw_yx.dims)?;
    weights.validate()?;
    if c <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "velocity bound c must be positive, got {c}"
        )));
    }
    let dims = x.dims;
    let v_xy = crate::field::softsign_normalize(raw_xy, c);
    let v_yx = crate::field::softsign_normalize(raw_yx, c);

    let e_xy_fwd = exp_svf_trace(&v_xy, TimeTarget::Half, FlowSign::Forward, t_steps);
    let e_yx_fwd = exp_svf_trace(&v_yx, TimeTarget::Half, FlowSign::Forward, t_steps);
    let e_xy_inv = exp_svf_trace(&v_xy, TimeTarget::Half, FlowSign::Inverse, t_steps);
    let e_yx_inv = exp_svf_trace(&v_yx, TimeTarget::Half, FlowSign::Inverse, t_steps);

    let xy_half = field_view(dims, e_xy_fwd.steps.last().unwrap());
    let yx_half = field_view(dims, e_yx_fwd.steps.last().unwrap());

    let mut xy_full = vec![0.0; 3 * dims.len()];
    let mut yx_full = vec![0.0; 3 * dims.len()];
    compose_planar(
        dims,
        e_yx_inv.steps.last().unwrap(),
        e_xy_fwd.steps.last().unwrap(),
        &mut xy_full,
    );
    compose_planar(
        dims,
        e_xy_inv.steps.last().unwrap(),
        e_yx_fwd.steps.last().unwrap(),
        &mut yx_full,
    );

    let xw = warp_image(x, &xy_half)?;
    let yw = warp_image(y, &yx_half)?;
    let x1 = warp_image(x, &field_view(dims, &xy_full))?;
    let y1 = warp_image(y, &field_view(dims, &yx_full))?;

    let l_mean = if select.mean {
        crate::loss::loss_mean_shape(&xw, &yw, weights.window, weights.epsilon)?
    } else {
        0.0
    };
    let l_pair = if select.pair {
        crate::loss::loss_pair(&x1, y, &y1, x, weights.window, weights.epsilon)?
    } else {
        0.0
    };
    let l_jdet = if select.jdet {
        crate::loss::loss_jdet(&[&xy_half, &yx_half])?
    } else {
        0.0
    };
    let l_reg = if select.reg {
        crate::loss::loss_smooth(&v_xy, &v_yx)?
    } else {
        0.0
    };
    let l_mag = if select.mag {
        crate::loss::loss_mag(&v_xy, &v_yx)?
    } else {
        0.0
    };
    let breakdown = LossBreakdown::assemble(l_mean, l_pair, l_jdet, l_reg, l_mag, weights);

    Ok(Pipeline {
        v_xy,
        v_yx,
        e_xy_fwd,
        e_yx_fwd,
        e_xy_inv,
        e_yx_inv,
        xy_full,
        yx_full,
        xw,
        yw,
        x1,
        y1,
        breakdown,
    })
}

/// Borrow a planar buffer as a deformation field (for the shared loss kernels).
fn field_view(dims: Dims, data: &[f64]) -> crate::field::DeformationField {
    crate::field::DeformationField::from_parts_unchecked(dims, data.to_vec())
}

/// Forward-only evaluation of the selected terms; the function the
/// finite-difference harness probes when isolating one term.
#[allow(clippy::too_many_arguments)]
pub fn selected_loss(
    x: &Volume,
    y: &Volume,
    raw_xy: &VelocityField,
    raw_yx: &VelocityField,
    weights: &LossWeights,
    t_steps: u32,
    c: f64,
    select: TermSelect,
) -> Result<LossBreakdown> {
    Ok(forward(x, y, raw_xy, raw_yx, weights, t_steps, c, select)?.breakdown)
}

/// Mean local NCC of two raw slices and its gradients with respect to both.
fn ncc_grads(
    dims: Dims,
    i: &[f64],
    j: &[f64],
    w: usize,
    eps: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = dims.len();
    let parts = ncc_parts(dims, i, j, w);
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut a_si = vec![0.0; n];
    let mut a_sj = vec![0.0; n];
    let mut a_sii = vec![0.0; n];
    let mut a_sjj = vec![0.0; n];
    let mut a_sij = vec![0.0; n];
    for k in 0..n {
        let v = ncc_voxel(&parts, k, eps);
        value += v.r;
        let cnt = parts.counts[k];
        let a_cross = inv_n / v.denom2.sqrt();
        let a_vi = -0.5 * inv_n * v.r * v.var_j / v.denom2;
        let a_vj = -0.5 * inv_n * v.r * v.var_i / v.denom2;
        a_sij[k] = a_cross;
        a_si[k] = -(a_cross * parts.s_j[k] + 2.0 * a_vi * parts.s_i[k]) / cnt;
        a_sj[k] = -(a_cross * parts.s_i[k] + 2.0 * a_vj * parts.s_j[k]) / cnt;
        a_sii[k] = a_vi;
        a_sjj[k] = a_vj;
    }
    value *= inv_n;

    let b_si = box_sum(dims, &a_si, w);
    let b_sj = box_sum(dims, &a_sj, w);
    let b_sii = box_sum(dims, &a_sii, w);
    let b_sjj = box_sum(dims, &a_sjj, w);
    let b_sij = box_sum(dims, &a_sij, w);

    let mut d_i = vec![0.0; n];
    let mut d_j = vec![0.0; n];
    for k in 0..n {
        d_i[k] = b_si[k] + 2.0 * i[k] * b_sii[k] + j[k] * b_sij[k];
        d_j[k] = b_sj[k] + 2.0 * j[k] * b_sjj[k] + i[k] * b_sij[k];
    }
    (value, d_i, d_j)
}

/// Adjoint of `out(x) = vol(x + u(x))`: routes `d_out` into the displacement
/// via the trilinear gradient of the sampled volume.
fn warp_backward(vol: &Volume, u: &[f64], d_out: &[f64], g_u: &mut [f64]) {
    let dims = vol.dims;
    let n = dims.len();
    let src = vol.data();
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let g = d_out[idx];
                if g != 0.0 {
                    let sup = trilin_support(
                        dims,
                        x as f64 + u[idx],
                        y as f64 + u[n + idx],
                        z as f64 + u[2 * n + idx],
                    );
                    let grad = sup.gradient(src);
                    g_u[idx] += g * grad[0];
                    g_u[n + idx] += g * grad[1];
                    g_u[2 * n + idx] += g * grad[2];
                }
                idx += 1;
            }
        }
    }
}

/// Adjoint of `out(x) = b(x) + a(x + b(x))` with respect to both fields.
fn compose_backward(
    dims: Dims,
    a: &[f64],
    b: &[f64],
    d_out: &[f64],
    g_a: &mut [f64],
    g_b: &mut [f64],
) {
    let n = dims.len();
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let sup = trilin_support(
                    dims,
                    x as f64 + b[idx],
                    y as f64 + b[n + idx],
                    z as f64 + b[2 * n + idx],
                );
                let corners = sup.corners();
                let mut coord = [0.0f64; 3];
                for comp in 0..3 {
                    let g = d_out[comp * n + idx];
                    g_b[comp * n + idx] += g;
                    if g != 0.0 {
                        let plane = &a[comp * n..(comp + 1) * n];
                        for (ci, wgt) in corners {
                            g_a[comp * n + ci] += g * wgt;
                        }
                        let grad = sup.gradient(plane);
                        coord[0] += g * grad[0];
                        coord[1] += g * grad[1];
                        coord[2] += g * grad[2];
                    }
                }
                g_b[idx] += coord[0];
                g_b[n + idx] += coord[1];
                g_b[2 * n + idx] += coord[2];
                idx += 1;
            }
        }
    }
}

/// Backward through one squaring step u' = u ∘ u: both roles add.
fn square_backward(dims: Dims, u: &[f64], d_out: &[f64]) -> Vec<f64> {
    let mut g_a = vec![0.0; d_out.len()];
    let mut g_b = vec![0.0; d_out.len()];
    compose_backward(dims, u, u, d_out, &mut g_a, &mut g_b);
    for (ga, gb) in g_a.iter_mut().zip(g_b.iter()) {
        *ga += gb;
    }
    g_a
}

/// Backward through the unrolled squaring recurrence; returns d/dv.
fn exp_backward(dims: Dims, trace: &ExpTrace, g_final: Vec<f64>) -> Vec<f64> {
    let mut g = g_final;
    for step in trace.steps[..trace.steps.len() - 1].iter().rev() {
        g = square_backward(dims, step, &g);
    }
    for gi in g.iter_mut() {
        *gi *= trace.scale;
    }
    g
}

/// Gradient of Σ ReLU(−det J_φ) with respect to the displacement, by cofactor
/// expansion scattered through the difference stencils.
fn jdet_backward(dims: Dims, u: &[f64], g_u: &mut [f64], scale: f64) {
    let n = dims.len();
    let comps = [&u[..n], &u[n..2 * n], &u[2 * n..]];
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let lens = [dims.nx, dims.ny, dims.nz];
    let mut idx = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let jac = jacobian_at(dims, comps, x, y, z, idx);
                if det3(&jac) < 0.0 {
                    // d ReLU(−det)/d det = −1 where det < 0.
                    let cof = cofactor3(&jac);
                    let coords = [x, y, z];
                    for axis in 0..3 {
                        let (p, m, s) =
                            axis_stencil(coords[axis], lens[axis], strides[axis], idx);
                        for comp in 0..3 {
                            let w = -scale * cof[comp][axis] * s;
                            g_u[comp * n + p] += w;
                            g_u[comp * n + m] -= w;
                        }
                    }
                }
                idx += 1;
            }
        }
    }
}

/// Gradient of the squared-forward-difference sum of one field.
fn smooth_backward(v: &VelocityField, scale: f64, g: &mut [f64]) {
    let dims = v.dims;
    let n = dims.len();
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let lens = [dims.nx, dims.ny, dims.nz];
    let data = v.data();
    for comp in 0..3 {
        let base = comp * n;
        for axis in 0..3 {
            let stride = strides[axis];
            let mut idx = 0;
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        let i = [x, y, z][axis];
                        if i + 1 < lens[axis] {
                            let d = data[base + idx + stride] - data[base + idx];
                            g[base + idx + stride] += 2.0 * scale * d;
                            g[base + idx] -= 2.0 * scale * d;
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn check_finite(buf: &[f64], term: &'static str) -> Result<()> {
    if buf.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(term))
    }
}

/// Loss and its exact gradient with respect to the raw parameter fields.
pub fn grad_total_loss(
    x: &Volume,
    y: &Volume,
    raw_xy: &VelocityField,
    raw_yx: &VelocityField,
    weights: &LossWeights,
    t_steps: u32,
    c: f64,
) -> Result<(LossBreakdown, GradientPair)> {
    grad_total_loss_selected(x, y, raw_xy, raw_yx, weights, t_steps, c, TermSelect::ALL)
}

/// Like [`grad_total_loss`] but with individual terms enabled or disabled;
/// the gradient corresponds to the selected total.
#[allow(clippy::too_many_arguments)]
pub fn grad_total_loss_selected(
    x: &Volume,
    y: &Volume,
    raw_xy: &VelocityField,
    raw_yx: &VelocityField,
    weights: &LossWeights,
    t_steps: u32,
    c: f64,
    select: TermSelect,
) -> Result<(LossBreakdown, GradientPair)> {
    let pipe = forward(x, y, raw_xy, raw_yx, weights, t_steps, c, select)?;
    if !pipe.breakdown.is_finite() {
        return Err(Error::NonFiniteGradient("forward"));
    }
    let dims = x.dims;
    let n = dims.len();
    let (w, eps) = (weights.window, weights.epsilon);

    let mut g_xy_half = vec![0.0; 3 * n];
    let mut g_yx_half = vec![0.0; 3 * n];
    let mut g_xy_inv = vec![0.0; 3 * n];
    let mut g_yx_inv = vec![0.0; 3 * n];

    if select.mean {
        // l_mean = −ncc(xw, yw)
        let (_, d_xw, d_yw) = ncc_grads(dims, pipe.xw.data(), pipe.yw.data(), w, eps);
        let neg_xw: Vec<f64> = d_xw.iter().map(|g| -g).collect();
        let neg_yw: Vec<f64> = d_yw.iter().map(|g| -g).collect();
        check_finite(&neg_xw, "mean")?;
        check_finite(&neg_yw, "mean")?;
        warp_backward(x, pipe.e_xy_fwd.steps.last().unwrap(), &neg_xw, &mut g_xy_half);
        warp_backward(y, pipe.e_yx_fwd.steps.last().unwrap(), &neg_yw, &mut g_yx_half);
    }

    if select.pair {
        // l_pair = −ncc(x1, Y) − ncc(y1, X); Y and X are constants here.
        let (_, d_x1, _) = ncc_grads(dims, pipe.x1.data(), y.data(), w, eps);
        let (_, d_y1, _) = ncc_grads(dims, pipe.y1.data(), x.data(), w, eps);
        let neg_x1: Vec<f64> = d_x1.iter().map(|g| -g).collect();
        let neg_y1: Vec<f64> = d_y1.iter().map(|g| -g).collect();
        check_finite(&neg_x1, "pair")?;
        check_finite(&neg_y1, "pair")?;
        let mut g_xy_full = vec![0.0; 3 * n];
        let mut g_yx_full = vec![0.0; 3 * n];
        warp_backward(x, &pipe.xy_full, &neg_x1, &mut g_xy_full);
        warp_backward(y, &pipe.yx_full, &neg_y1, &mut g_yx_full);
        compose_backward(
            dims,
            pipe.e_yx_inv.steps.last().unwrap(),
            pipe.e_xy_fwd.steps.last().unwrap(),
            &g_xy_full,
            &mut g_yx_inv,
            &mut g_xy_half,
        );
        compose_backward(
            dims,
            pipe.e_xy_inv.steps.last().unwrap(),
            pipe.e_yx_fwd.steps.last().unwrap(),
            &g_yx_full,
            &mut g_xy_inv,
            &mut g_yx_half,
        );
    }

    if select.jdet && weights.lambda_jdet != 0.0 {
        // l_jdet averages over both half fields' voxels.
        let scale = weights.lambda_jdet / (2.0 * n as f64);
        jdet_backward(dims, pipe.e_xy_fwd.steps.last().unwrap(), &mut g_xy_half, scale);
        jdet_backward(dims, pipe.e_yx_fwd.steps.last().unwrap(), &mut g_yx_half, scale);
        check_finite(&g_xy_half, "jdet")?;
        check_finite(&g_yx_half, "jdet")?;
    }

    // Through the four squaring recurrences into the normalized velocities.
    let mut g_v_xy = exp_backward(dims, &pipe.e_xy_fwd, g_xy_half);
    let g_xy_inv_v = exp_backward(dims, &pipe.e_xy_inv, g_xy_inv);
    for (a, b) in g_v_xy.iter_mut().zip(g_xy_inv_v.iter()) {
        *a += b;
    }
    let mut g_v_yx = exp_backward(dims, &pipe.e_yx_fwd, g_yx_half);
    let g_yx_inv_v = exp_backward(dims, &pipe.e_yx_inv, g_yx_inv);
    for (a, b) in g_v_yx.iter_mut().zip(g_yx_inv_v.iter()) {
        *a += b;
    }

    if select.reg && weights.lambda_smooth != 0.0 {
        let scale = weights.lambda_smooth / n as f64;
        smooth_backward(&pipe.v_xy, scale, &mut g_v_xy);
        smooth_backward(&pipe.v_yx, scale, &mut g_v_yx);
        check_finite(&g_v_xy, "reg")?;
        check_finite(&g_v_yx, "reg")?;
    }

    if select.mag && weights.lambda_mag != 0.0 {
        let m_xy = crate::loss::squared_norm(&pipe.v_xy);
        let m_yx = crate::loss::squared_norm(&pipe.v_yx);
        let sign = if m_xy > m_yx {
            1.0
        } else if m_xy < m_yx {
            -1.0
        } else {
            0.0
        };
        let scale = weights.lambda_mag * sign / (3.0 * n as f64);
        for (g, v) in g_v_xy.iter_mut().zip(pipe.v_xy.data()) {
            *g += 2.0 * scale * v;
        }
        for (g, v) in g_v_yx.iter_mut().zip(pipe.v_yx.data()) {
            *g -= 2.0 * scale * v;
        }
        check_finite(&g_v_xy, "mag")?;
        check_finite(&g_v_yx, "mag")?;
    }

    // Softsign chain rule: dv/draw = c/(1+|raw|)².
    let chain = |raw: &VelocityField, g_v: Vec<f64>| -> Vec<f64> {
        raw.data()
            .iter()
            .zip(g_v)
            .map(|(&r, g)| {
                let d = 1.0 + r.abs();
                g * c / (d * d)
            })
            .collect()
    };
    let g_xy = chain(raw_xy, g_v_xy);
    let g_yx = chain(raw_yx, g_v_yx);
    check_finite(&g_xy, "pipeline")?;
    check_finite(&g_yx, "pipeline")?;

    Ok((
        pipe.breakdown,
        GradientPair {
            dims,
            xy: g_xy,
            yx: g_yx,
        },
    ))
}

/// Central difference of an arbitrary scalar functional of the raw fields.
pub fn central_difference(
    mut f: impl FnMut(&VelocityField, &VelocityField) -> f64,
    raw_xy: &VelocityField,
    raw_yx: &VelocityField,
    param: ParamIndex,
    step: f64,
) -> f64 {
    let mut lo_xy = raw_xy.clone();
    let mut lo_yx = raw_yx.clone();
    let mut hi_xy = raw_xy.clone();
    let mut hi_yx = raw_yx.clone();
    match param.side {
        FieldSide::Xy => {
            lo_xy.data_mut()[param.offset] -= step;
            hi_xy.data_mut()[param.offset] += step;
        }
        FieldSide::Yx => {
            lo_yx.data_mut()[param.offset] -= step;
            hi_yx.data_mut()[param.offset] += step;
        }
    }
    (f(&hi_xy, &hi_yx) - f(&lo_xy, &lo_yx)) / (2.0 * step)
}

/// Central finite difference of the total objective at one raw component.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient(
    x: &Volume,
    y: &Volume,
    raw_xy: &VelocityField,
    raw_yx: &VelocityField,
    weights: &LossWeights,
    t_steps: u32,
    c: f64,
    param: ParamIndex,
    step: f64,
) -> Result<f64> {
    let mut failure = None;
    let fd = central_difference(
        |rxy, ryx| {
            let v_xy = crate::field::softsign_normalize(rxy, c);
            let v_yx = crate::field::softsign_normalize(ryx, c);
            match crate::loss::total_loss(x, y, &v_xy, &v_yx, weights, t_steps) {
                Ok(bd) => bd.total,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        raw_xy,
        raw_yx,
        param,
        step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(fd),
    }
}
