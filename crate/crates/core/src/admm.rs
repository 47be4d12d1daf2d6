//! Model-based ADMM reconstruction with a total-variation sparsifier.
//!
//! The splitting is `v = Hx`, `u = Ψx`, `w = x`, minimizing
//! `½‖b − Cv‖² + τ‖u‖₁` subject to `w ≥ 0`. Every subproblem is closed form:
//! the `v` solve is pixelwise because `CᵀC` is a binary mask, and the `x` solve
//! is a pointwise division in the Fourier domain because `HᵀH` and `ΨᵀΨ` are
//! both circulant on the padded grid.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, Measurement, Psf, Scene, PLANES};
use crate::grid::{center_offset, ensure_dims, pad_center, Dims, RealGrid};

/// How the `u` proximal step groups the two gradient channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shrinkage {
    /// Per-pixel shrinkage of the gradient vector magnitude (isotropic TV).
    #[default]
    Isotropic,
    /// Elementwise shrinkage of each channel (anisotropic TV).
    Anisotropic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmParams {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub tau: f64,
    pub iters: usize,
    /// Relative primal residual threshold for early stopping; 0 disables it.
    pub tol: f64,
    pub autotune: bool,
    pub shrinkage: Shrinkage,
}

impl Default for AdmmParams {
    fn default() -> Self {
        AdmmParams {
            mu1: 1e-4,
            mu2: 1e-4,
            mu3: 1e-4,
            tau: 2e-3,
            iters: 100,
            tol: 1e-5,
            autotune: false,
            shrinkage: Shrinkage::Isotropic,
        }
    }
}

impl AdmmParams {
    /// The same penalties run for a fixed number of iterations with early stopping off.
    pub fn bounded(iters: usize) -> Self {
        AdmmParams { iters, tol: 0.0, ..AdmmParams::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidArgument(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn step_params(&self) -> StepParams {
        StepParams { mu1: self.mu1, mu2: self.mu2, mu3: self.mu3, tau: self.tau, shrinkage: self.shrinkage }
    }
}

/// Penalties and threshold used by one iteration (or one unrolled layer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub tau: f64,
    pub shrinkage: Shrinkage,
}

/// The two circular forward-difference channels of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct GradField {
    pub gx: RealGrid,
    pub gy: RealGrid,
}

impl GradField {
    pub fn zeros(dims: Dims) -> Self {
        GradField { gx: RealGrid::zeros(dims), gy: RealGrid::zeros(dims) }
    }

    pub fn new(gx: RealGrid, gy: RealGrid) -> Result<Self> {
        ensure_dims(gx.dims(), gy.dims())?;
        Ok(GradField { gx, gy })
    }

    pub fn dims(&self) -> Dims {
        self.gx.dims()
    }

    pub fn sum_squares(&self) -> f64 {
        self.gx.sum_squares() + self.gy.sum_squares()
    }
}

/// `Ψx`: `gx[i,j] = x[i,j+1] − x[i,j]`, `gy[i,j] = x[i+1,j] − x[i,j]`, indices wrapping.
pub fn psi_forward(x: &RealGrid) -> GradField {
    let (gx, gy) = psi_forward_raw(x.values(), x.dims());
    GradField { gx: RealGrid::from_vec(x.dims(), gx), gy: RealGrid::from_vec(x.dims(), gy) }
}

/// `Ψᵀ(gx, gy)`, the negative circular divergence.
pub fn psi_adjoint(g: &GradField) -> Result<RealGrid> {
    ensure_dims(g.gx.dims(), g.gy.dims())?;
    Ok(RealGrid::from_vec(g.dims(), psi_adjoint_raw(g.gx.values(), g.gy.values(), g.dims())))
}

pub(crate) fn psi_forward_raw(x: &[f64], d: Dims) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (d.rows, d.cols);
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; x.len()];
    for r in 0..rows {
        let row = r * cols;
        let next_row = ((r + 1) % rows) * cols;
        for c in 0..cols {
            let here = x[row + c];
            gx[row + c] = x[row + (c + 1) % cols] - here;
            gy[row + c] = x[next_row + c] - here;
        }
    }
    (gx, gy)
}

pub(crate) fn psi_adjoint_raw(gx: &[f64], gy: &[f64], d: Dims) -> Vec<f64> {
    let (rows, cols) = (d.rows, d.cols);
    let mut out = vec![0.0; gx.len()];
    for r in 0..rows {
        let row = r * cols;
        let prev_row = ((r + rows - 1) % rows) * cols;
        for c in 0..cols {
            let prev_c = (c + cols - 1) % cols;
            out[row + c] = gx[row + prev_c] - gx[row + c] + gy[prev_row + c] - gy[row + c];
        }
    }
    out
}

/// Isotropic vector shrinkage `z·max(|z| − κ, 0)/|z|` per pixel, with `z = (gx, gy)`.
pub fn soft_threshold_vec(g: &GradField, kappa: f64) -> Result<GradField> {
    shrink_checked(g, kappa, Shrinkage::Isotropic)
}

/// Elementwise shrinkage of each gradient channel.
pub fn soft_threshold_aniso(g: &GradField, kappa: f64) -> Result<GradField> {
    shrink_checked(g, kappa, Shrinkage::Anisotropic)
}

fn shrink_checked(g: &GradField, kappa: f64, mode: Shrinkage) -> Result<GradField> {
    if kappa.is_nan() || kappa < 0.0 {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {kappa}")));
    }
    ensure_dims(g.gx.dims(), g.gy.dims())?;
    let (ux, uy) = shrink_raw(g.gx.values(), g.gy.values(), kappa, mode);
    Ok(GradField { gx: RealGrid::from_vec(g.dims(), ux), gy: RealGrid::from_vec(g.dims(), uy) })
}

pub(crate) fn shrink_raw(zx: &[f64], zy: &[f64], kappa: f64, mode: Shrinkage) -> (Vec<f64>, Vec<f64>) {
    match mode {
        Shrinkage::Isotropic => zx
            .iter()
            .zip(zy)
            .map(|(&a, &b)| {
                let m = (a * a + b * b).sqrt();
                if m > kappa {
                    let f = (m - kappa) / m;
                    (a * f, b * f)
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip(),
        Shrinkage::Anisotropic => {
            let s = |v: f64| v.signum() * (v.abs() - kappa).max(0.0);
            (zx.iter().map(|&v| s(v)).collect(), zy.iter().map(|&v| s(v)).collect())
        }
    }
}

/// Fourier-diagonal pieces of the normal equations, fixed for one PSF.
#[derive(Clone, Debug)]
pub struct PrecomputedOperators {
    forward: ForwardOperator,
    hth: Vec<f64>,
    psitpsi: Vec<f64>,
    ctc: Vec<f64>,
}

impl PrecomputedOperators {
    pub fn new(psf: &Psf) -> Result<Self> {
        Ok(Self::from_forward(ForwardOperator::new(psf)?))
    }

    pub fn from_forward(forward: ForwardOperator) -> Self {
        let padded = forward.padded_dims();
        let sensor = forward.sensor_dims();
        let hth = forward.spectrum().iter().map(Complex64::norm_sqr).collect();
        let mut psitpsi = Vec::with_capacity(padded.len());
        for r in 0..padded.rows {
            let sy = (std::f64::consts::PI * r as f64 / padded.rows as f64).sin();
            for c in 0..padded.cols {
                let sx = (std::f64::consts::PI * c as f64 / padded.cols as f64).sin();
                psitpsi.push(4.0 * (sx * sx + sy * sy));
            }
        }
        let (r0, c0) = center_offset(sensor, padded);
        let mut ctc = vec![0.0; padded.len()];
        for r in r0..r0 + sensor.rows {
            ctc[r * padded.cols + c0..r * padded.cols + c0 + sensor.cols].fill(1.0);
        }
        PrecomputedOperators { forward, hth, psitpsi, ctc }
    }

    pub fn forward(&self) -> &ForwardOperator {
        &self.forward
    }

    pub fn padded_dims(&self) -> Dims {
        self.forward.padded_dims()
    }

    pub fn sensor_dims(&self) -> Dims {
        self.forward.sensor_dims()
    }

    /// `|Ĥ|²`.
    pub fn hth_diag(&self) -> RealGrid {
        RealGrid::from_vec(self.padded_dims(), self.hth.clone())
    }

    /// `|D̂x|² + |D̂y|²`.
    pub fn psitpsi_diag(&self) -> RealGrid {
        RealGrid::from_vec(self.padded_dims(), self.psitpsi.clone())
    }

    /// 1 on the sensor block, 0 elsewhere.
    pub fn ctc_diag(&self) -> RealGrid {
        RealGrid::from_vec(self.padded_dims(), self.ctc.clone())
    }

    pub(crate) fn hth(&self) -> &[f64] {
        &self.hth
    }


    pub(crate) fn ctc(&self) -> &[f64] {
        &self.ctc
    }

    /// Fourier denominator of the `x` solve: `μ₁|Ĥ|² + μ₂|D̂|² + μ₃`.
    pub fn x_denominator(&self, mu1: f64, mu2: f64, mu3: f64) -> Vec<f64> {
        self.hth.iter().zip(&self.psitpsi).map(|(h, p)| mu1 * h + mu2 * p + mu3).collect()
    }

    /// `Cᵀb` for each plane of a measurement.
    pub(crate) fn ctb(&self, b: &Measurement) -> Result<[Vec<f64>; PLANES]> {
        ensure_dims(self.sensor_dims(), b.dims())?;
        let pad = |i: usize| pad_center(&b.planes[i], self.padded_dims()).map(RealGrid::into_values);
        Ok([pad(0)?, pad(1)?, pad(2)?])
    }
}

/// All primal and dual variables for one color plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneState {
    pub x: RealGrid,
    pub u: GradField,
    pub v: RealGrid,
    pub w: RealGrid,
    pub alpha1: RealGrid,
    pub alpha2: GradField,
    pub alpha3: RealGrid,
    /// `H x`, carried so each iteration reuses the previous iteration's product.
    pub hx: RealGrid,
}

impl PlaneState {
    pub fn zeros(dims: Dims) -> Self {
        PlaneState {
            x: RealGrid::zeros(dims),
            u: GradField::zeros(dims),
            v: RealGrid::zeros(dims),
            w: RealGrid::zeros(dims),
            alpha1: RealGrid::zeros(dims),
            alpha2: GradField::zeros(dims),
            alpha3: RealGrid::zeros(dims),
            hx: RealGrid::zeros(dims),
        }
    }

    /// Start from an initial image: `x = x0`, `w = max(x0, 0)`, everything else zero.
    pub fn from_initial(ops: &PrecomputedOperators, x0: &RealGrid) -> Result<Self> {
        let dims = ops.padded_dims();
        ensure_dims(dims, x0.dims())?;
        Ok(PlaneState {
            hx: ops.forward().apply_h(x0)?,
            w: RealGrid::from_vec(dims, x0.values().iter().map(|v| v.max(0.0)).collect()),
            x: x0.clone(),
            ..PlaneState::zeros(dims)
        })
    }

    pub fn dims(&self) -> Dims {
        self.x.dims()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub planes: [PlaneState; PLANES],
}

impl AdmmState {
    pub fn zeros(dims: Dims) -> Self {
        AdmmState { planes: std::array::from_fn(|_| PlaneState::zeros(dims)) }
    }

    /// The nonnegative estimate `w` of each plane.
    pub fn estimate(&self) -> Result<Scene> {
        Scene::new(std::array::from_fn(|i| self.planes[i].w.clone()))
    }
}

/// Squared norms gathered during one plane update, summed across planes by the solver.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct PlaneStats {
    /// `‖Hx−v‖²`, `‖Ψx−u‖²`, `‖x−w‖²`.
    primal_sq: [f64; 3],
    /// `max(‖Hx‖², ‖v‖²)` and the analogous scales for the other two constraints.
    scale_sq: [f64; 3],
    /// `‖v⁺−v‖²`, `‖u⁺−u‖²`, `‖w⁺−w‖²` before multiplying by `μ²`.
    change_sq: [f64; 3],
    data_fidelity: f64,
    tv: f64,
    /// `½‖b − CHx‖² + τ‖Ψx‖₁` at the new `x`.
    x_objective: f64,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn sub_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// One ADMM iteration on one plane. `den` must be `ops.x_denominator(μ₁, μ₂, μ₃)`.
pub(crate) fn step_plane(
    ops: &PrecomputedOperators,
    p: &StepParams,
    ctb: &[f64],
    s: &PlaneState,
    den: &[f64],
    with_stats: bool,
) -> Result<(PlaneState, Option<PlaneStats>)> {
    let dims = ops.padded_dims();
    let (mu1, mu2, mu3) = (p.mu1, p.mu2, p.mu3);
    let x = s.x.values();
    let a1 = s.alpha1.values();
    let (a2x, a2y) = (s.alpha2.gx.values(), s.alpha2.gy.values());
    let a3 = s.alpha3.values();

    // u: shrink Ψx + α₂/μ₂ at τ/μ₂
    let (px, py) = psi_forward_raw(x, dims);
    let zx: Vec<f64> = px.iter().zip(a2x).map(|(g, a)| g + a / mu2).collect();
    let zy: Vec<f64> = py.iter().zip(a2y).map(|(g, a)| g + a / mu2).collect();
    let (ux, uy) = shrink_raw(&zx, &zy, p.tau / mu2, p.shrinkage);
    check_finite(&ux, "u-update")?;
    check_finite(&uy, "u-update")?;

    // v: (CᵀC + μ₁)⁻¹(α₁ + μ₁Hx + Cᵀb)
    let v: Vec<f64> = (0..x.len())
        .map(|i| (a1[i] + mu1 * s.hx.values()[i] + ctb[i]) / (ops.ctc()[i] + mu1))
        .collect();
    check_finite(&v, "v-update")?;

    // w: max(α₃/μ₃ + x, 0)
    let w: Vec<f64> = x.iter().zip(a3).map(|(xi, ai)| (ai / mu3 + xi).max(0.0)).collect();
    check_finite(&w, "w-update")?;

    // x: (μ₁HᵀH + μ₂ΨᵀΨ + μ₃)⁻¹ r
    let tx: Vec<f64> = ux.iter().zip(a2x).map(|(u, a)| mu2 * u - a).collect();
    let ty: Vec<f64> = uy.iter().zip(a2y).map(|(u, a)| mu2 * u - a).collect();
    let psi_t = psi_adjoint_raw(&tx, &ty, dims);
    let spatial: Vec<f64> = (0..x.len()).map(|i| mu3 * w[i] - a3[i] + psi_t[i]).collect();
    let through_h: Vec<f64> = v.iter().zip(a1).map(|(vi, ai)| mu1 * vi - ai).collect();
    let (fs, fh) = ops.forward().fft().forward_pair(&spatial, &through_h);
    let h = ops.forward().spectrum();
    let xhat: Vec<Complex64> = (0..x.len()).map(|k| (fs[k] + h[k].conj() * fh[k]) / den[k]).collect();
    let hxhat: Vec<Complex64> = xhat.iter().zip(h).map(|(a, b)| a * b).collect();
    let (x_new, hx_new) = ops.forward().fft().inverse_pair(&xhat, &hxhat);
    check_finite(&x_new, "x-update")?;

    // dual ascent
    let a1_new: Vec<f64> = (0..x.len()).map(|i| a1[i] + mu1 * (hx_new[i] - v[i])).collect();
    let (qx, qy) = psi_forward_raw(&x_new, dims);
    let a2x_new: Vec<f64> = (0..x.len()).map(|i| a2x[i] + mu2 * (qx[i] - ux[i])).collect();
    let a2y_new: Vec<f64> = (0..x.len()).map(|i| a2y[i] + mu2 * (qy[i] - uy[i])).collect();
    let a3_new: Vec<f64> = (0..x.len()).map(|i| a3[i] + mu3 * (x_new[i] - w[i])).collect();
    check_finite(&a1_new, "alpha1 dual update")?;
    check_finite(&a2x_new, "alpha2 dual update")?;
    check_finite(&a2y_new, "alpha2 dual update")?;
    check_finite(&a3_new, "alpha3 dual update")?;

    let stats = with_stats.then(|| {
        let data_fidelity = 0.5
            * (0..x.len())
                .filter(|&i| ops.ctc()[i] > 0.0)
                .map(|i| (ctb[i] - v[i]).powi(2))
                .sum::<f64>();
        let l1 = |gx: &[f64], gy: &[f64]| match p.shrinkage {
            Shrinkage::Isotropic => gx.iter().zip(gy).map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>(),
            Shrinkage::Anisotropic => gx.iter().chain(gy).map(|a| a.abs()).sum::<f64>(),
        };
        let tv = l1(&ux, &uy);
        let x_fidelity = 0.5
            * (0..x.len())
                .filter(|&i| ops.ctc()[i] > 0.0)
                .map(|i| (ctb[i] - hx_new[i]).powi(2))
                .sum::<f64>();
        PlaneStats {
            primal_sq: [
                sub_sq(&hx_new, &v),
                sub_sq(&qx, &ux) + sub_sq(&qy, &uy),
                sub_sq(&x_new, &w),
            ],
            scale_sq: [
                sq(&hx_new).max(sq(&v)),
                (sq(&qx) + sq(&qy)).max(sq(&ux) + sq(&uy)),
                sq(&x_new).max(sq(&w)),
            ],
            change_sq: [
                sub_sq(&v, s.v.values()),
                sub_sq(&ux, s.u.gx.values()) + sub_sq(&uy, s.u.gy.values()),
                sub_sq(&w, s.w.values()),
            ],
            data_fidelity,
            tv: p.tau * tv,
            x_objective: x_fidelity + p.tau * l1(&qx, &qy),
        }
    });

    let g = |data: Vec<f64>| RealGrid::from_vec(dims, data);
    let next = PlaneState {
        x: g(x_new),
        u: GradField { gx: g(ux), gy: g(uy) },
        v: g(v),
        w: g(w),
        alpha1: g(a1_new),
        alpha2: GradField { gx: g(a2x_new), gy: g(a2y_new) },
        alpha3: g(a3_new),
        hx: g(hx_new),
    };
    Ok((next, stats))
}

/// One full iteration on one color plane; `b` is that plane of the measurement.
pub fn admm_step(
    state: &PlaneState,
    params: &AdmmParams,
    ops: &PrecomputedOperators,
    b: &RealGrid,
) -> Result<PlaneState> {
    params.validate()?;
    ensure_dims(ops.padded_dims(), state.dims())?;
    ensure_dims(ops.sensor_dims(), b.dims())?;
    let ctb = pad_center(b, ops.padded_dims())?;
    let den = ops.x_denominator(params.mu1, params.mu2, params.mu3);
    Ok(step_plane(ops, &params.step_params(), ctb.values(), state, &den, false)?.0)
}

/// Residuals and objective terms after one iteration, summed over color planes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    /// `‖Hx−v‖`, `‖Ψx−u‖`, `‖x−w‖`.
    pub primal: [f64; 3],
    /// Primal residuals divided by the larger norm of the two sides of each constraint.
    pub relative: [f64; 3],
    /// `μ₁‖Δv‖`, `μ₂‖Δu‖`, `μ₃‖Δw‖`.
    pub dual: [f64; 3],
    /// `½‖b − Cv‖²`.
    pub data_fidelity: f64,
    /// `τ‖u‖₁`.
    pub tv: f64,
    /// `½‖b − CHx‖² + τ‖Ψx‖₁` evaluated at the primal iterate.
    pub x_objective: f64,
    /// Penalties in effect during this iteration.
    pub mu: [f64; 3],
}

impl IterationRecord {
    /// Objective on the split variables, `½‖b − Cv‖² + τ‖u‖₁`.
    pub fn objective(&self) -> f64 {
        self.data_fidelity + self.tv
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResidualTrace {
    pub records: Vec<IterationRecord>,
}

impl ResidualTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Outcome of residual balancing: the new parameters and the factor applied to each `μ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyUpdate {
    pub params: AdmmParams,
    pub factors: [f64; 3],
}

impl PenaltyUpdate {
    pub fn changed(&self) -> bool {
        self.factors.iter().any(|&f| f != 1.0)
    }
}

/// Residual balancing with ratio 10 and factor 2, applied independently per constraint.
///
/// The multipliers `α` are kept in unscaled form, so they carry over unchanged;
/// the scaled multipliers `α/μ` move by the inverse of each factor.
pub fn autotune_penalties(primal: [f64; 3], dual: [f64; 3], params: &AdmmParams) -> PenaltyUpdate {
    let mut factors = [1.0; 3];
    for i in 0..3 {
        if primal[i] > 10.0 * dual[i] {
            factors[i] = 2.0;
        } else if dual[i] > 10.0 * primal[i] {
            factors[i] = 0.5;
        }
    }
    let params = AdmmParams {
        mu1: params.mu1 * factors[0],
        mu2: params.mu2 * factors[1],
        mu3: params.mu3 * factors[2],
        ..*params
    };
    PenaltyUpdate { params, factors }
}

/// Run ADMM on all three planes. Returns the nonnegative estimate `w` and the residual trace.
pub fn admm_solve(
    psf: &Psf,
    b: &Measurement,
    params: &AdmmParams,
    x0: Option<&Scene>,
) -> Result<(Scene, ResidualTrace)> {
    let ops = PrecomputedOperators::new(psf)?;
    admm_solve_with(&ops, b, params, x0)
}

pub fn admm_solve_with(
    ops: &PrecomputedOperators,
    b: &Measurement,
    params: &AdmmParams,
    x0: Option<&Scene>,
) -> Result<(Scene, ResidualTrace)> {
    params.validate()?;
    let ctb = ops.ctb(b)?;
    let mut state = match x0 {
        Some(scene) => {
            ensure_dims(ops.padded_dims(), scene.dims())?;
            let init = |i: usize| PlaneState::from_initial(ops, &scene.planes[i]);
            AdmmState { planes: [init(0)?, init(1)?, init(2)?] }
        }
        None => AdmmState::zeros(ops.padded_dims()),
    };
    let mut current = *params;
    let mut den = ops.x_denominator(current.mu1, current.mu2, current.mu3);
    let mut trace = ResidualTrace::default();

    for _ in 0..params.iters {
        let step = current.step_params();
        let results: Vec<Result<(PlaneState, Option<PlaneStats>)>> = state
            .planes
            .par_iter()
            .zip(ctb.par_iter())
            .map(|(s, c)| step_plane(ops, &step, c, s, &den, true))
            .collect();
        let mut totals = PlaneStats::default();
        for (slot, result) in state.planes.iter_mut().zip(results) {
            let (next, stats) = result?;
            let stats = stats.expect("stats requested");
            *slot = next;
            for i in 0..3 {
                totals.primal_sq[i] += stats.primal_sq[i];
                totals.scale_sq[i] += stats.scale_sq[i];
                totals.change_sq[i] += stats.change_sq[i];
            }
            totals.data_fidelity += stats.data_fidelity;
            totals.tv += stats.tv;
            totals.x_objective += stats.x_objective;
        }
        let mu = [current.mu1, current.mu2, current.mu3];
        let primal = totals.primal_sq.map(f64::sqrt);
        let relative = std::array::from_fn(|i| {
            let scale = totals.scale_sq[i].sqrt();
            if scale > 0.0 { primal[i] / scale } else { 0.0 }
        });
        let dual = std::array::from_fn(|i| mu[i] * totals.change_sq[i].sqrt());
        trace.records.push(IterationRecord {
            primal,
            relative,
            dual,
            data_fidelity: totals.data_fidelity,
            tv: totals.tv,
            x_objective: totals.x_objective,
            mu,
        });

        if params.tol > 0.0 && relative.iter().all(|&r| r < params.tol) {
            break;
        }
        if params.autotune {
            let update = autotune_penalties(primal, dual, &current);
            if update.changed() {
                current = update.params;
                den = ops.x_denominator(current.mu1, current.mu2, current.mu3);
            }
        }
    }
    Ok((state.estimate()?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{caustic_psf, delta_psf, normalize_psf, NoiseModel};
    use crate::grid::inner_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: Dims, seed: u64, lo: f64) -> RealGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealGrid::from_fn(dims, |_, _| rng.random_range(lo..1.0)).unwrap()
    }

    fn grad(gx: &[f64], gy: &[f64], d: Dims) -> GradField {
        GradField::new(RealGrid::new(d, gx.to_vec()).unwrap(), RealGrid::new(d, gy.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn psi_on_constants_and_ramps() {
        let d = Dims::square(5).unwrap();
        let g = psi_forward(&RealGrid::filled(d, 3.0));
        assert!(g.gx.values().iter().chain(g.gy.values()).all(|&v| v == 0.0));

        let row = RealGrid::new(Dims::new(1, 4).unwrap(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = psi_forward(&row);
        assert_eq!(g.gx.values(), &[1.0, 1.0, 1.0, -3.0]);
        assert_eq!(g.gy.values(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn psi_adjoint_by_explicit_summation() {
        let d = Dims::square(8).unwrap();
        let x = random_grid(d, 1, -1.0);
        let y = GradField::new(random_grid(d, 2, -1.0), random_grid(d, 3, -1.0)).unwrap();
        let px = psi_forward(&x);
        let mut lhs = 0.0;
        for i in 0..64 {
            lhs += px.gx.values()[i] * y.gx.values()[i] + px.gy.values()[i] * y.gy.values()[i];
        }
        let rhs = inner_product(&x, &psi_adjoint(&y).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn vector_shrinkage_examples() {
        let d = Dims::square(1).unwrap();
        let out = soft_threshold_vec(&grad(&[3.0], &[4.0], d), 2.5).unwrap();
        assert!((out.gx.values()[0] - 1.5).abs() < 1e-15);
        assert!((out.gy.values()[0] - 2.0).abs() < 1e-15);

        let out = soft_threshold_vec(&grad(&[3.0], &[4.0], d), 5.0).unwrap();
        assert_eq!((out.gx.values()[0], out.gy.values()[0]), (0.0, 0.0));

        let d = Dims::square(6).unwrap();
        let g = GradField::new(random_grid(d, 4, -1.0), random_grid(d, 5, -1.0)).unwrap();
        assert_eq!(soft_threshold_vec(&g, 0.0).unwrap(), g);
        assert!(soft_threshold_vec(&g, -1.0).is_err());
    }

    #[test]
    fn anisotropic_shrinkage_is_elementwise() {
        let d = Dims::square(1).unwrap();
        let out = soft_threshold_aniso(&grad(&[3.0], &[-4.0], d), 2.5).unwrap();
        assert_eq!((out.gx.values()[0], out.gy.values()[0]), (0.5, -1.5));
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let sensor = Dims::square(4).unwrap();
        let psf = normalize_psf(&caustic_psf(sensor, 3)).unwrap();
        let ops = PrecomputedOperators::new(&psf).unwrap();
        let s = PlaneState::zeros(sensor.doubled());
        let next = admm_step(&s, &AdmmParams::default(), &ops, &RealGrid::zeros(sensor)).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn dc_denominator_has_no_tv_term() {
        let sensor = Dims::square(4).unwrap();
        let psf = normalize_psf(&caustic_psf(sensor, 4)).unwrap();
        let ops = PrecomputedOperators::new(&psf).unwrap();
        let (mu1, mu2, mu3) = (0.3, 0.7, 0.11);
        let den = ops.x_denominator(mu1, mu2, mu3);
        let h0 = ops.forward().psf_spectrum().get(0, 0).norm_sqr();
        assert!((den[0] - (mu1 * h0 + mu3)).abs() < 1e-15);
        assert_eq!(ops.psitpsi_diag().get(0, 0), 0.0);
        let ctc = ops.ctc_diag();
        assert_eq!(ctc.values().iter().sum::<f64>(), sensor.len() as f64);
        assert!(ctc.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn consistent_state_is_stationary() {
        let sensor = Dims::square(6).unwrap();
        let psf = normalize_psf(&caustic_psf(sensor, 5)).unwrap();
        let ops = PrecomputedOperators::new(&psf).unwrap();
        let x = random_grid(sensor.doubled(), 6, 0.1);
        let hx = ops.forward().apply_h(&x).unwrap();
        let b = crate::grid::crop_center(&hx, sensor).unwrap();
        let state = PlaneState {
            u: psi_forward(&x),
            v: hx.clone(),
            w: x.clone(),
            hx,
            x: x.clone(),
            ..PlaneState::zeros(sensor.doubled())
        };
        let params = AdmmParams { tau: 1e-300, mu1: 0.5, mu2: 0.2, mu3: 0.3, ..AdmmParams::default() };
        let next = admm_step(&state, &params, &ops, &b).unwrap();
        let diff = next.x.zip_map(&x, |a, b| a - b).unwrap().norm();
        assert!(diff < 1e-8 * x.norm(), "moved by {diff}");
    }

    fn random_scene(sensor: Dims, seed: u64) -> Scene {
        let img = crate::forward::ColorImage::new(std::array::from_fn(|i| random_grid(sensor, seed + i as u64, 0.0)))
            .unwrap();
        Scene::embed(&img).unwrap()
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let sensor = Dims::square(4).unwrap();
        let psf = normalize_psf(&caustic_psf(sensor, 7)).unwrap();
        let x0 = random_scene(sensor, 8);
        let b = crate::forward::forward_measure(&psf, &x0, &NoiseModel::none()).unwrap();
        let params = AdmmParams { iters: 0, ..AdmmParams::default() };
        let (out, trace) = admm_solve(&psf, &b, &params, Some(&x0)).unwrap();
        assert_eq!(out, x0);
        assert!(trace.is_empty());
        let (out, _) = admm_solve(&psf, &b, &params, None).unwrap();
        assert_eq!(out, Scene::zeros(sensor.doubled()));
    }

    #[test]
    fn solve_equals_chained_steps() {
        let sensor = Dims::square(5).unwrap();
        let psf = normalize_psf(&caustic_psf(sensor, 9)).unwrap();
        let ops = PrecomputedOperators::new(&psf).unwrap();
        let b = crate::forward::forward_measure(&psf, &random_scene(sensor, 10), &NoiseModel::gaussian(0.05, 1))
            .unwrap();
        let params = AdmmParams { iters: 5, tol: 0.0, mu1: 0.01, mu2: 0.02, mu3: 0.03, ..Default::default() };
        let (solved, trace) = admm_solve_with(&ops, &b, &params, None).unwrap();
        assert_eq!(trace.len(), 5);
        for c in 0..PLANES {
            let mut s = PlaneState::zeros(sensor.doubled());
            for _ in 0..5 {
                s = admm_step(&s, &params, &ops, &b.planes[c]).unwrap();
            }
            assert_eq!(s.w, solved.planes[c]);
        }
    }

    #[test]
    fn delta_psf_recovers_scene() {
        let sensor = Dims::square(8).unwrap();
        let psf = normalize_psf(&delta_psf(sensor, (0, 0)).unwrap()).unwrap();
        let scene = random_scene(sensor, 11);
        let b = crate::forward::forward_measure(&psf, &scene, &NoiseModel::none()).unwrap();
        let params = AdmmParams { tau: 1e-6, iters: 100, tol: 0.0, ..AdmmParams::default() };
        let (out, _) = admm_solve(&psf, &b, &params, None).unwrap();
        assert!(out.min() >= 0.0);
        let rec = out.crop_to(sensor).unwrap();
        let truth = scene.crop_to(sensor).unwrap();
        let mut mse = 0.0;
        for c in 0..PLANES {
            mse += rec.planes[c].zip_map(&truth.planes[c], |a, b| a - b).unwrap().sum_squares();
        }
        mse /= (3 * sensor.len()) as f64;
        assert!(mse < 1e-4, "mse {mse}");
    }

    #[test]
    fn residual_balancing_rule() {
        let p = AdmmParams::default();
        let same = autotune_penalties([1.0; 3], [1.0; 3], &p);
        assert!(!same.changed());
        assert_eq!(same.params, p);

        let up = autotune_penalties([100.0, 1.0, 1.0], [1.0, 1.0, 100.0], &p);
        assert_eq!(up.factors, [2.0, 1.0, 0.5]);
        assert_eq!(up.params.mu1, 2.0 * p.mu1);
        assert_eq!(up.params.mu3, 0.5 * p.mu3);
        // Unscaled α carries over, so the scaled multiplier α/μ₁ halves.
        let alpha = 0.37;
        assert_eq!(alpha / up.params.mu1, 0.5 * (alpha / p.mu1));
    }

    #[test]
    fn scaling_covariance() {
        let sensor = Dims::square(5).unwrap();
        let psf = normalize_psf(&caustic_psf(sensor, 12)).unwrap();
        let b = crate::forward::forward_measure(&psf, &random_scene(sensor, 13), &NoiseModel::gaussian(0.02, 3))
            .unwrap();
        let c = 3.7;
        let params = AdmmParams { iters: 20, tol: 0.0, ..AdmmParams::default() };
        let (a, _) = admm_solve(&psf, &b, &params, None).unwrap();
        let scaled_params = AdmmParams { tau: params.tau * c, ..params };
        let (s, _) = admm_solve(&psf, &b.scaled(c), &scaled_params, None).unwrap();
        for p in 0..PLANES {
            let diff = s.planes[p].zip_map(&a.planes[p], |x, y| x - c * y).unwrap().norm();
            assert!(diff <= 1e-8 * c * a.planes[p].norm().max(1e-300));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = AdmmParams { mu2: 0.0, ..AdmmParams::default() };
        assert!(p.validate().is_err());
        let p = AdmmParams { tau: f64::NAN, ..AdmmParams::default() };
        assert!(p.validate().is_err());
    }
}
