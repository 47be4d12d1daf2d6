//! Unrolled ADMM networks and their exact reverse-mode gradients.
//!
//! Le-ADMM runs a fixed number of ADMM iterations as layers, each with its own
//! `(μ₁, μ₂, μ₃, τ)`. Le-ADMM* replaces the TV proximal step with a small
//! learned residual transform and drops the multiplier for `u`. Parameters are
//! stored as logarithms so every finite value gives a valid solver.
//!
//! The forward pass records every layer's state on a [`Tape`]; the backward
//! pass walks the tape in reverse and applies the transpose of each update.
//! Kinks use the zero subgradient: a shrinkage output in its dead zone and a
//! clamped `w` pixel pass no gradient.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{
    psi_adjoint_raw, psi_forward_raw, shrink_raw, step_plane, AdmmParams, PlaneState, PrecomputedOperators,
    Shrinkage, StepParams,
};
use crate::error::{Error, Result};
use crate::forward::{ColorImage, Measurement, Psf, Scene, PLANES};
use crate::grid::{crop_center, dot, ensure_dims, pad_center, Dims, RealGrid};

/// Default unrolled depth.
pub const DEFAULT_LAYERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[serde(rename = "leadmm")]
    LeAdmm,
    #[serde(rename = "leadmm-star")]
    LeAdmmStar,
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::LeAdmm => "leadmm",
            Variant::LeAdmmStar => "leadmm-star",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "leadmm" => Ok(Variant::LeAdmm),
            "leadmm-star" | "leadmm_star" => Ok(Variant::LeAdmmStar),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// One layer's parameters in log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTheta {
    pub log_mu1: f64,
    pub log_mu2: f64,
    pub log_mu3: f64,
    pub log_tau: f64,
}

impl LayerTheta {
    pub fn from_params(p: &AdmmParams) -> Self {
        LayerTheta { log_mu1: p.mu1.ln(), log_mu2: p.mu2.ln(), log_mu3: p.mu3.ln(), log_tau: p.tau.ln() }
    }

    pub fn zeros() -> Self {
        LayerTheta { log_mu1: 0.0, log_mu2: 0.0, log_mu3: 0.0, log_tau: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.log_mu1, self.log_mu2, self.log_mu3, self.log_tau]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        LayerTheta { log_mu1: a[0], log_mu2: a[1], log_mu3: a[2], log_tau: a[3] }
    }

    fn step_params(&self, shrinkage: Shrinkage) -> StepParams {
        StepParams {
            mu1: self.log_mu1.exp(),
            mu2: self.log_mu2.exp(),
            mu3: self.log_mu3.exp(),
            tau: self.log_tau.exp(),
            shrinkage,
        }
    }
}

/// Per-layer learnable penalties and thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeAdmmTheta {
    pub layers: Vec<LayerTheta>,
}

impl LeAdmmTheta {
    /// Every layer set to the same classic parameters.
    pub fn constant(params: &AdmmParams, layers: usize) -> Self {
        LeAdmmTheta { layers: vec![LayerTheta::from_params(params); layers] }
    }

    /// `layers` copies of the default solver parameters: the untrained network is bounded ADMM.
    pub fn initial(layers: usize) -> Self {
        Self::constant(&AdmmParams::default(), layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("unrolled network needs at least one layer".into()));
        }
        if self.layers.iter().flat_map(|l| l.as_array()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layer parameter".into()));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.as_array()).collect()
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!("{} values do not form whole layers", values.len())));
        }
        Ok(LeAdmmTheta {
            layers: values.chunks(4).map(|c| LayerTheta::from_array([c[0], c[1], c[2], c[3]])).collect(),
        })
    }
}

/// Hidden channels of the learned transform.
pub const HIDDEN: usize = 8;
const TAPS: usize = 9;
const INIT_SEED: u64 = 0x5eed;
const INIT_SCALE: f64 = 0.3;

/// Weights of the two 3×3 convolution banks (1→8 and 8→1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformWeights {
    /// `HIDDEN × 9` taps, row-major within each 3×3 kernel.
    pub conv_in: Vec<f64>,
    pub bias_in: Vec<f64>,
    /// `HIDDEN × 9` taps.
    pub conv_out: Vec<f64>,
    pub bias_out: f64,
}

impl TransformWeights {
    pub const LEN: usize = 2 * HIDDEN * TAPS + HIDDEN + 1;

    pub fn zeros() -> Self {
        TransformWeights {
            conv_in: vec![0.0; HIDDEN * TAPS],
            bias_in: vec![0.0; HIDDEN],
            conv_out: vec![0.0; HIDDEN * TAPS],
            bias_out: 0.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.conv_in);
        v.extend_from_slice(&self.bias_in);
        v.extend_from_slice(&self.conv_out);
        v.push(self.bias_out);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::InvalidArgument(format!("transform needs {} weights, got {}", Self::LEN, v.len())));
        }
        let (conv_in, rest) = v.split_at(HIDDEN * TAPS);
        let (bias_in, rest) = rest.split_at(HIDDEN);
        let (conv_out, rest) = rest.split_at(HIDDEN * TAPS);
        Ok(TransformWeights {
            conv_in: conv_in.to_vec(),
            bias_in: bias_in.to_vec(),
            conv_out: conv_out.to_vec(),
            bias_out: rest[0],
        })
    }
}

/// Small residual regularizer `N(x) = x + conv_out(softplus(conv_in(x)))`, applied per color
/// plane with circular boundaries and shared weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedTransform {
    pub weights: TransformWeights,
    pub residual: bool,
}

fn softplus(h: f64) -> f64 {
    h.max(0.0) + (-h.abs()).exp().ln_1p()
}

fn sigmoid(h: f64) -> f64 {
    if h >= 0.0 {
        1.0 / (1.0 + (-h).exp())
    } else {
        let e = h.exp();
        e / (1.0 + e)
    }
}

/// `dst[c] += k·src[(c + shift) mod n]` for a shift of -1, 0 or 1.
fn add_shifted(dst: &mut [f64], src: &[f64], shift: isize, k: f64) {
    let n = dst.len();
    match shift {
        0 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s),
        1 => {
            dst[..n - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += k * s);
            dst[n - 1] += k * src[0];
        }
        _ => {
            dst[1..].iter_mut().zip(&src[..n - 1]).for_each(|(d, s)| *d += k * s);
            dst[0] += k * src[n - 1];
        }
    }
}

/// `Σ_c a[c]·b[(c + shift) mod n]` for a shift of -1, 0 or 1.
fn dot_shifted(a: &[f64], b: &[f64], shift: isize) -> f64 {
    let n = a.len();
    let body = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    match shift {
        0 => body(a, b),
        1 => body(&a[..n - 1], &b[1..]) + a[n - 1] * b[0],
        _ => body(&a[1..], &b[..n - 1]) + a[0] * b[n - 1],
    }
}

/// Row offset and column shift of tap `t` in a 3×3 kernel.
fn tap(t: usize, rows: usize) -> (usize, isize) {
    (t / 3 + rows - 1, (t % 3) as isize - 1)
}

/// `out[i,j] += Σ k[t]·x[i+di, j+dj]` over the 3×3 neighborhood, wrapping.
fn correlate_add(x: &[f64], k: &[f64], d: Dims, out: &mut [f64]) {
    let (rows, cols) = (d.rows, d.cols);
    for (t, &kt) in k.iter().enumerate() {
        if kt == 0.0 {
            continue;
        }
        let (dr, shift) = tap(t, rows);
        for r in 0..rows {
            let src = (r + dr) % rows * cols;
            add_shifted(&mut out[r * cols..(r + 1) * cols], &x[src..src + cols], shift, kt);
        }
    }
}

/// Adjoint of [`correlate_add`] in `x`.
fn correlate_adjoint_add(g: &[f64], k: &[f64], d: Dims, out: &mut [f64]) {
    let (rows, cols) = (d.rows, d.cols);
    for (t, &kt) in k.iter().enumerate() {
        if kt == 0.0 {
            continue;
        }
        let (dr, shift) = tap(t, rows);
        for r in 0..rows {
            let dst = (r + dr) % rows * cols;
            add_shifted(&mut out[dst..dst + cols], &g[r * cols..(r + 1) * cols], -shift, kt);
        }
    }
}

/// Gradient of [`correlate_add`] with respect to the 9 taps.
fn correlate_kernel_grad(g: &[f64], x: &[f64], d: Dims, out: &mut [f64]) {
    let (rows, cols) = (d.rows, d.cols);
    for (t, o) in out.iter_mut().enumerate().take(TAPS) {
        let (dr, shift) = tap(t, rows);
        *o += (0..rows)
            .map(|r| {
                let src = (r + dr) % rows * cols;
                dot_shifted(&g[r * cols..(r + 1) * cols], &x[src..src + cols], shift)
            })
            .sum::<f64>();
    }
}

impl LearnedTransform {
    /// Zero filters with the skip connection on: the identity map.
    pub fn identity() -> Self {
        LearnedTransform { weights: TransformWeights::zeros(), residual: true }
    }

    /// The identity map used to start training: `conv_out` is zero, so the output equals the
    /// input exactly, while `conv_in` holds small seeded Gaussian weights so the hidden channels
    /// receive distinct gradients.
    pub fn initial() -> Self {
        let conv_in = LearnedTransform::random(INIT_SEED, INIT_SCALE).weights.conv_in;
        LearnedTransform { weights: TransformWeights { conv_in, ..TransformWeights::zeros() }, residual: true }
    }

    /// Gaussian weights with standard deviation `scale`, for tests and perturbed starts.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let v: Vec<f64> = (0..TransformWeights::LEN).map(|_| normal.sample(&mut rng)).collect();
        LearnedTransform { weights: TransformWeights::from_slice(&v).expect("length"), residual: true }
    }

    pub fn num_params(&self) -> usize {
        TransformWeights::LEN
    }

    pub fn apply(&self, x: &RealGrid) -> RealGrid {
        let (out, _) = self.forward_raw(x.values(), x.dims());
        RealGrid::from_vec(x.dims(), out)
    }

    /// Output plus the hidden pre-activations needed by the backward pass.
    fn forward_raw(&self, x: &[f64], d: Dims) -> (Vec<f64>, Vec<Vec<f64>>) {
        let w = &self.weights;
        let mut out = if self.residual { x.to_vec() } else { vec![0.0; x.len()] };
        out.iter_mut().for_each(|o| *o += w.bias_out);
        let mut hidden = Vec::with_capacity(HIDDEN);
        let mut act = vec![0.0; x.len()];
        for c in 0..HIDDEN {
            let mut h = vec![w.bias_in[c]; x.len()];
            correlate_add(x, &w.conv_in[c * TAPS..(c + 1) * TAPS], d, &mut h);
            act.iter_mut().zip(&h).for_each(|(a, &hv)| *a = softplus(hv));
            correlate_add(&act, &w.conv_out[c * TAPS..(c + 1) * TAPS], d, &mut out);
            hidden.push(h);
        }
        (out, hidden)
    }

    /// Accumulate weight gradients into `grads` and return the gradient with respect to `x`.
    fn backward_raw(&self, x: &[f64], hidden: &[Vec<f64>], g: &[f64], d: Dims, grads: &mut TransformWeights) -> Vec<f64> {
        let w = &self.weights;
        let mut gx = if self.residual { g.to_vec() } else { vec![0.0; g.len()] };
        grads.bias_out += g.iter().sum::<f64>();
        let mut act = vec![0.0; x.len()];
        for (c, h) in hidden.iter().enumerate().take(HIDDEN) {
            act.iter_mut().zip(h).for_each(|(a, &hv)| *a = softplus(hv));
            correlate_kernel_grad(g, &act, d, &mut grads.conv_out[c * TAPS..(c + 1) * TAPS]);
            let mut ga = vec![0.0; x.len()];
            correlate_adjoint_add(g, &w.conv_out[c * TAPS..(c + 1) * TAPS], d, &mut ga);
            ga.iter_mut().zip(h).for_each(|(v, &hv)| *v *= sigmoid(hv));
            grads.bias_in[c] += ga.iter().sum::<f64>();
            correlate_kernel_grad(&ga, x, d, &mut grads.conv_in[c * TAPS..(c + 1) * TAPS]);
            correlate_adjoint_add(&ga, &w.conv_in[c * TAPS..(c + 1) * TAPS], d, &mut gx);
        }
        gx
    }
}

/// A complete unrolled network: depth-K parameters plus the transform for the star variant.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledModel {
    pub variant: Variant,
    pub theta: LeAdmmTheta,
    pub transform: Option<LearnedTransform>,
    pub shrinkage: Shrinkage,
}

impl UnrolledModel {
    /// The untrained network: default solver parameters and, for the star variant, the initial transform.
    pub fn initial(variant: Variant, layers: usize) -> Self {
        UnrolledModel {
            variant,
            theta: LeAdmmTheta::initial(layers),
            transform: (variant == Variant::LeAdmmStar).then(LearnedTransform::initial),
            shrinkage: Shrinkage::Isotropic,
        }
    }

    pub fn leadmm(theta: LeAdmmTheta) -> Self {
        UnrolledModel { variant: Variant::LeAdmm, theta, transform: None, shrinkage: Shrinkage::Isotropic }
    }

    pub fn leadmm_star(theta: LeAdmmTheta, transform: LearnedTransform) -> Self {
        UnrolledModel {
            variant: Variant::LeAdmmStar,
            theta,
            transform: Some(transform),
            shrinkage: Shrinkage::Isotropic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        match (self.variant, &self.transform) {
            (Variant::LeAdmm, _) => Ok(()),
            (Variant::LeAdmmStar, Some(t)) => {
                if t.weights.to_vec().iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("non-finite transform weight".into()))
                }
            }
            (Variant::LeAdmmStar, None) => Err(Error::InvalidArgument("star variant needs a transform".into())),
        }
    }

    /// Flat parameter vector: layer parameters, then transform weights.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.theta.to_vec();
        if let Some(t) = &self.transform {
            v.extend(t.weights.to_vec());
        }
        v
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let n = 4 * self.theta.depth();
        if values.len() != n + self.transform.as_ref().map_or(0, |_| TransformWeights::LEN) {
            return Err(Error::InvalidArgument("parameter vector length mismatch".into()));
        }
        self.theta = LeAdmmTheta::from_slice(&values[..n])?;
        if let Some(t) = &mut self.transform {
            t.weights = TransformWeights::from_slice(&values[n..])?;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..self.theta.depth() {
            for p in ["log_mu1", "log_mu2", "log_mu3", "log_tau"] {
                names.push(format!("layer{}.{p}", k + 1));
            }
        }
        if self.transform.is_some() {
            names.extend((0..HIDDEN * TAPS).map(|i| format!("transform.conv_in[{i}]")));
            names.extend((0..HIDDEN).map(|i| format!("transform.bias_in[{i}]")));
            names.extend((0..HIDDEN * TAPS).map(|i| format!("transform.conv_out[{i}]")));
            names.push("transform.bias_out".into());
        }
        names
    }
}

/// State of one plane in the star variant (no multiplier for `u`).
#[derive(Clone, Debug, PartialEq)]
pub struct StarPlaneState {
    pub x: RealGrid,
    pub hx: RealGrid,
    pub u: RealGrid,
    pub v: RealGrid,
    pub w: RealGrid,
    pub alpha1: RealGrid,
    pub alpha3: RealGrid,
}

impl StarPlaneState {
    pub fn zeros(d: Dims) -> Self {
        let z = RealGrid::zeros(d);
        StarPlaneState {
            x: z.clone(),
            hx: z.clone(),
            u: z.clone(),
            v: z.clone(),
            w: z.clone(),
            alpha1: z.clone(),
            alpha3: z,
        }
    }
}

/// Recorded forward intermediates for one color plane.
#[derive(Clone, Debug, PartialEq)]
pub enum PlaneRecord {
    /// `K + 1` states: the zero initialization and the output of each layer.
    LeAdmm(Vec<PlaneState>),
    /// `K + 1` states plus, per layer, the transform's hidden pre-activations.
    Star { states: Vec<StarPlaneState>, hidden: Vec<Vec<Vec<f64>>> },
}

/// Everything the reverse pass needs, for one forward evaluation.
#[derive(Clone, Debug)]
pub struct Tape<'a> {
    ops: &'a PrecomputedOperators,
    model: UnrolledModel,
    measurement: Measurement,
    planes: Vec<PlaneRecord>,
}

impl<'a> Tape<'a> {
    pub fn model(&self) -> &UnrolledModel {
        &self.model
    }

    pub fn depth(&self) -> usize {
        self.model.theta.depth()
    }

    pub fn records(&self) -> &[PlaneRecord] {
        &self.planes
    }

    /// Re-run the forward pass from the recorded inputs.
    pub fn replay(&self) -> Result<Tape<'a>> {
        Ok(run_forward(self.ops, &self.model, &self.measurement)?.tape)
    }

    /// `x` after each layer, across planes.
    pub fn snapshots(&self) -> Vec<Scene> {
        (1..=self.depth())
            .map(|k| {
                let planes = std::array::from_fn(|c| match &self.planes[c] {
                    PlaneRecord::LeAdmm(states) => states[k].x.clone(),
                    PlaneRecord::Star { states, .. } => states[k].x.clone(),
                });
                Scene { planes }
            })
            .collect()
    }

    fn output(&self) -> Scene {
        let k = self.depth();
        Scene {
            planes: std::array::from_fn(|c| match &self.planes[c] {
                PlaneRecord::LeAdmm(states) => states[k].w.clone(),
                PlaneRecord::Star { states, .. } => states[k].w.clone(),
            }),
        }
    }
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<'a> {
    /// Nonnegative estimate `w` after the last layer.
    pub scene: Scene,
    pub tape: Tape<'a>,
    /// `x` after each layer, in order.
    pub snapshots: Vec<Scene>,
}

fn layer_error(layer: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(step) => Error::NonFinite(format!("layer {layer}: {step}")),
        other => other,
    }
}

fn star_denominator(ops: &PrecomputedOperators, p: &StepParams) -> Vec<f64> {
    ops.hth().iter().map(|h| p.mu1 * h + p.mu2 + p.mu3).collect()
}

fn finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// One star layer: `u = N(x)`, no `α₂`, and `μ₂I` in place of `μ₂ΨᵀΨ`.
fn star_step(
    ops: &PrecomputedOperators,
    p: &StepParams,
    transform: &LearnedTransform,
    ctb: &[f64],
    s: &StarPlaneState,
    den: &[f64],
) -> Result<(StarPlaneState, Vec<Vec<f64>>)> {
    let dims = ops.padded_dims();
    let n = dims.len();
    let (mu1, mu2, mu3) = (p.mu1, p.mu2, p.mu3);
    let x = s.x.values();
    let a1 = s.alpha1.values();
    let a3 = s.alpha3.values();

    let (u, hidden) = transform.forward_raw(x, dims);
    finite(&u, "network regularizer")?;
    let v: Vec<f64> = (0..n).map(|i| (a1[i] + mu1 * s.hx.values()[i] + ctb[i]) / (ops.ctc()[i] + mu1)).collect();
    finite(&v, "v-update")?;
    let w: Vec<f64> = x.iter().zip(a3).map(|(xi, ai)| (ai / mu3 + xi).max(0.0)).collect();

    let spatial: Vec<f64> = (0..n).map(|i| mu3 * w[i] - a3[i] + mu2 * u[i]).collect();
    let through_h: Vec<f64> = v.iter().zip(a1).map(|(vi, ai)| mu1 * vi - ai).collect();
    let (fs, fh) = ops.forward().fft().forward_pair(&spatial, &through_h);
    let h = ops.forward().spectrum();
    let xhat: Vec<Complex64> = (0..n).map(|k| (fs[k] + h[k].conj() * fh[k]) / den[k]).collect();
    let hxhat: Vec<Complex64> = xhat.iter().zip(h).map(|(a, b)| a * b).collect();
    let (x_new, hx_new) = ops.forward().fft().inverse_pair(&xhat, &hxhat);
    finite(&x_new, "x-update")?;

    let a1_new: Vec<f64> = (0..n).map(|i| a1[i] + mu1 * (hx_new[i] - v[i])).collect();
    let a3_new: Vec<f64> = (0..n).map(|i| a3[i] + mu3 * (x_new[i] - w[i])).collect();
    finite(&a1_new, "alpha1 dual update")?;
    finite(&a3_new, "alpha3 dual update")?;

    let g = |data: Vec<f64>| RealGrid::from_vec(dims, data);
    let next = StarPlaneState {
        x: g(x_new),
        hx: g(hx_new),
        u: g(u),
        v: g(v),
        w: g(w),
        alpha1: g(a1_new),
        alpha3: g(a3_new),
    };
    Ok((next, hidden))
}

fn run_forward<'a>(ops: &'a PrecomputedOperators, model: &UnrolledModel, b: &Measurement) -> Result<ForwardPass<'a>> {
    model.validate()?;
    let ctb = ops.ctb(b)?;
    let dims = ops.padded_dims();
    let layers: Vec<StepParams> = model.theta.layers.iter().map(|l| l.step_params(model.shrinkage)).collect();
    let planes: Vec<Result<PlaneRecord>> = match model.variant {
        Variant::LeAdmm => {
            let dens: Vec<Vec<f64>> = layers.iter().map(|p| ops.x_denominator(p.mu1, p.mu2, p.mu3)).collect();
            ctb.par_iter()
                .map(|c| {
                    let mut states = Vec::with_capacity(layers.len() + 1);
                    states.push(PlaneState::zeros(dims));
                    for (k, (p, den)) in layers.iter().zip(&dens).enumerate() {
                        let (next, _) = step_plane(ops, p, c, states.last().unwrap(), den, false)
                            .map_err(|e| layer_error(k + 1, e))?;
                        states.push(next);
                    }
                    Ok(PlaneRecord::LeAdmm(states))
                })
                .collect()
        }
        Variant::LeAdmmStar => {
            let transform = model.transform.as_ref().expect("validated");
            let dens: Vec<Vec<f64>> = layers.iter().map(|p| star_denominator(ops, p)).collect();
            ctb.par_iter()
                .map(|c| {
                    let mut states = Vec::with_capacity(layers.len() + 1);
                    let mut hidden = Vec::with_capacity(layers.len());
                    states.push(StarPlaneState::zeros(dims));
                    for (k, (p, den)) in layers.iter().zip(&dens).enumerate() {
                        let (next, h) = star_step(ops, p, transform, c, states.last().unwrap(), den)
                            .map_err(|e| layer_error(k + 1, e))?;
                        states.push(next);
                        hidden.push(h);
                    }
                    Ok(PlaneRecord::Star { states, hidden })
                })
                .collect()
        }
    };
    let planes = planes.into_iter().collect::<Result<Vec<_>>>()?;
    let tape = Tape { ops, model: model.clone(), measurement: b.clone(), planes };
    Ok(ForwardPass { scene: tape.output(), snapshots: tape.snapshots(), tape })
}

/// Le-ADMM forward pass with a recorded tape.
pub fn leadmm_forward<'a>(
    theta: &LeAdmmTheta,
    ops: &'a PrecomputedOperators,
    b: &Measurement,
) -> Result<ForwardPass<'a>> {
    run_forward(ops, &UnrolledModel::leadmm(theta.clone()), b)
}

/// Le-ADMM* forward pass with a recorded tape.
pub fn leadmm_star_forward<'a>(
    theta: &LeAdmmTheta,
    transform: &LearnedTransform,
    ops: &'a PrecomputedOperators,
    b: &Measurement,
) -> Result<ForwardPass<'a>> {
    run_forward(ops, &UnrolledModel::leadmm_star(theta.clone(), transform.clone()), b)
}

/// Forward pass for any model, with a tape.
pub fn model_forward<'a>(
    model: &UnrolledModel,
    ops: &'a PrecomputedOperators,
    b: &Measurement,
) -> Result<ForwardPass<'a>> {
    run_forward(ops, model, b)
}

/// Inference only: runs the same layers without keeping intermediates.
pub fn reconstruct(model: &UnrolledModel, ops: &PrecomputedOperators, b: &Measurement) -> Result<Scene> {
    model.validate()?;
    let ctb = ops.ctb(b)?;
    let dims = ops.padded_dims();
    let layers: Vec<StepParams> = model.theta.layers.iter().map(|l| l.step_params(model.shrinkage)).collect();
    let planes: Vec<Result<RealGrid>> = match model.variant {
        Variant::LeAdmm => {
            let dens: Vec<Vec<f64>> = layers.iter().map(|p| ops.x_denominator(p.mu1, p.mu2, p.mu3)).collect();
            ctb.par_iter()
                .map(|c| {
                    let mut s = PlaneState::zeros(dims);
                    for (k, (p, den)) in layers.iter().zip(&dens).enumerate() {
                        s = step_plane(ops, p, c, &s, den, false).map_err(|e| layer_error(k + 1, e))?.0;
                    }
                    Ok(s.w)
                })
                .collect()
        }
        Variant::LeAdmmStar => {
            let transform = model.transform.as_ref().expect("validated");
            let dens: Vec<Vec<f64>> = layers.iter().map(|p| star_denominator(ops, p)).collect();
            ctb.par_iter()
                .map(|c| {
                    let mut s = StarPlaneState::zeros(dims);
                    for (k, (p, den)) in layers.iter().zip(&dens).enumerate() {
                        s = star_step(ops, p, transform, c, &s, den).map_err(|e| layer_error(k + 1, e))?.0;
                    }
                    Ok(s.w)
                })
                .collect()
        }
    };
    let planes = planes.into_iter().collect::<Result<Vec<_>>>()?;
    Scene::new(planes.try_into().expect("three planes"))
}

/// `∂loss/∂parameter` in the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaGradients {
    pub layers: Vec<LayerTheta>,
    pub transform: Option<TransformWeights>,
}

impl ThetaGradients {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.layers.iter().flat_map(|l| l.as_array()).collect();
        if let Some(t) = &self.transform {
            v.extend(t.to_vec());
        }
        v
    }
}

/// Gradients with respect to the raw `(μ₁, μ₂, μ₃, τ)` of one layer.
type RawGrad = [f64; 4];

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Fourier solve used by the reverse of the `x`-update: returns `A⁻¹g` and `H A⁻¹g`
/// where `g = spatial + Hᵀ through_h`.
fn solve_adjoint(
    ops: &PrecomputedOperators,
    spatial: &[f64],
    through_h: &[f64],
    den: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (fs, fh) = ops.forward().fft().forward_pair(spatial, through_h);
    let h = ops.forward().spectrum();
    let rhat: Vec<Complex64> = (0..den.len()).map(|k| (fs[k] + h[k].conj() * fh[k]) / den[k]).collect();
    let hrhat: Vec<Complex64> = rhat.iter().zip(h).map(|(a, b)| a * b).collect();
    ops.forward().fft().inverse_pair(&rhat, &hrhat)
}

struct Adjoints {
    x: Vec<f64>,
    a1: Vec<f64>,
    a2x: Vec<f64>,
    a2y: Vec<f64>,
    a3: Vec<f64>,
}

impl Adjoints {
    fn zeros(n: usize) -> Self {
        Adjoints { x: vec![0.0; n], a1: vec![0.0; n], a2x: vec![0.0; n], a2y: vec![0.0; n], a3: vec![0.0; n] }
    }
}

/// Reverse of one Le-ADMM layer. `bar` holds adjoints of the layer's output state and is
/// replaced by adjoints of its input state; `w_bar` is any direct gradient on the output `w`.
#[allow(clippy::too_many_arguments)]
fn leadmm_layer_backward(
    ops: &PrecomputedOperators,
    p: &StepParams,
    s: &PlaneState,
    o: &PlaneState,
    den: &[f64],
    bar: &mut Adjoints,
    w_bar: Option<&[f64]>,
) -> RawGrad {
    let dims = ops.padded_dims();
    let n = dims.len();
    let (mu1, mu2, mu3, tau) = (p.mu1, p.mu2, p.mu3, p.tau);
    let mut g: RawGrad = [0.0; 4];

    let x = s.x.values();
    let a3 = s.alpha3.values();
    let (a2x, a2y) = (s.alpha2.gx.values(), s.alpha2.gy.values());
    let (ux, uy) = (o.u.gx.values(), o.u.gy.values());
    let (v, w) = (o.v.values(), o.w.values());
    let (xn, hxn) = (o.x.values(), o.hx.values());
    let (qx, qy) = psi_forward_raw(xn, dims);

    // Dual ascent steps.
    let mut wb = match w_bar {
        Some(wb) => wb.to_vec(),
        None => vec![0.0; n],
    };
    let mut vb = vec![0.0; n];
    let mut ubx = vec![0.0; n];
    let mut uby = vec![0.0; n];
    g[0] += (0..n).map(|i| bar.a1[i] * (hxn[i] - v[i])).sum::<f64>();
    g[1] += (0..n).map(|i| bar.a2x[i] * (qx[i] - ux[i]) + bar.a2y[i] * (qy[i] - uy[i])).sum::<f64>();
    g[2] += (0..n).map(|i| bar.a3[i] * (xn[i] - w[i])).sum::<f64>();
    axpy(&mut vb, -mu1, &bar.a1);
    axpy(&mut ubx, -mu2, &bar.a2x);
    axpy(&mut uby, -mu2, &bar.a2y);
    axpy(&mut wb, -mu3, &bar.a3);
    let psi_t = psi_adjoint_raw(&bar.a2x, &bar.a2y, dims);
    let xbar_spatial: Vec<f64> = (0..n).map(|i| bar.x[i] + mu3 * bar.a3[i] + mu2 * psi_t[i]).collect();
    let xbar_h: Vec<f64> = bar.a1.iter().map(|a| mu1 * a).collect();

    // x-update: x⁺ = A⁻¹ r, A symmetric.
    let (rb, hrb) = solve_adjoint(ops, &xbar_spatial, &xbar_h, den);
    let (prx, pry) = psi_forward_raw(&rb, dims);
    g[0] -= dot(&hrb, hxn);
    g[1] -= dot(&prx, &qx) + dot(&pry, &qy);
    g[2] -= dot(&rb, xn);

    // r = μ₃w − α₃ + Ψᵀ(μ₂u − α₂) + Hᵀ(μ₁v − α₁); the input multipliers start from the
    // pass-through of the dual steps.
    let mut a1b = bar.a1.clone();
    let mut a2xb = bar.a2x.clone();
    let mut a2yb = bar.a2y.clone();
    let mut a3b = bar.a3.clone();
    axpy(&mut wb, mu3, &rb);
    axpy(&mut a3b, -1.0, &rb);
    g[2] += dot(&rb, w);
    axpy(&mut ubx, mu2, &prx);
    axpy(&mut uby, mu2, &pry);
    axpy(&mut a2xb, -1.0, &prx);
    axpy(&mut a2yb, -1.0, &pry);
    g[1] += dot(&prx, ux) + dot(&pry, uy);
    axpy(&mut vb, mu1, &hrb);
    axpy(&mut a1b, -1.0, &hrb);
    g[0] += dot(&hrb, v);

    let mut xb = vec![0.0; n];

    // w = max(α₃/μ₃ + x, 0)
    for i in 0..n {
        if a3[i] / mu3 + x[i] > 0.0 {
            let t = wb[i];
            xb[i] += t;
            a3b[i] += t / mu3;
            g[2] -= t * a3[i] / (mu3 * mu3);
        }
    }

    // v = (α₁ + μ₁Hx + Cᵀb) / (CᵀC + μ₁)
    let hx = s.hx.values();
    let mut hxb = vec![0.0; n];
    for i in 0..n {
        let sb = vb[i] / (ops.ctc()[i] + mu1);
        a1b[i] += sb;
        hxb[i] = mu1 * sb;
        g[0] += sb * (hx[i] - v[i]);
    }
    let through = ops.forward().ht_raw(&hxb);
    axpy(&mut xb, 1.0, &through);

    // u = T_{τ/μ₂}(Ψx + α₂/μ₂)
    let kappa = tau / mu2;
    let (px, py) = psi_forward_raw(x, dims);
    let mut zbx = vec![0.0; n];
    let mut zby = vec![0.0; n];
    let mut kappa_bar = 0.0;
    for i in 0..n {
        let zx = px[i] + a2x[i] / mu2;
        let zy = py[i] + a2y[i] / mu2;
        match p.shrinkage {
            Shrinkage::Isotropic => {
                let m = (zx * zx + zy * zy).sqrt();
                if m > kappa {
                    let zu = zx * ubx[i] + zy * uby[i];
                    let f = 1.0 - kappa / m;
                    let c = kappa * zu / (m * m * m);
                    zbx[i] = f * ubx[i] + c * zx;
                    zby[i] = f * uby[i] + c * zy;
                    kappa_bar -= zu / m;
                }
            }
            Shrinkage::Anisotropic => {
                if zx.abs() > kappa {
                    zbx[i] = ubx[i];
                    kappa_bar -= zx.signum() * ubx[i];
                }
                if zy.abs() > kappa {
                    zby[i] = uby[i];
                    kappa_bar -= zy.signum() * uby[i];
                }
            }
        }
    }
    g[3] += kappa_bar / mu2;
    g[1] -= kappa_bar * tau / (mu2 * mu2);
    let psi_zb = psi_adjoint_raw(&zbx, &zby, dims);
    axpy(&mut xb, 1.0, &psi_zb);
    axpy(&mut a2xb, 1.0 / mu2, &zbx);
    axpy(&mut a2yb, 1.0 / mu2, &zby);
    g[1] -= (dot(&zbx, a2x) + dot(&zby, a2y)) / (mu2 * mu2);

    *bar = Adjoints { x: xb, a1: a1b, a2x: a2xb, a2y: a2yb, a3: a3b };
    g
}

/// Reverse of one star layer; accumulates transform gradients into `tgrad`.
#[allow(clippy::too_many_arguments)]
fn star_layer_backward(
    ops: &PrecomputedOperators,
    p: &StepParams,
    transform: &LearnedTransform,
    s: &StarPlaneState,
    o: &StarPlaneState,
    hidden: &[Vec<f64>],
    den: &[f64],
    bar: &mut Adjoints,
    w_bar: Option<&[f64]>,
    tgrad: &mut TransformWeights,
) -> RawGrad {
    let dims = ops.padded_dims();
    let n = dims.len();
    let (mu1, mu2, mu3) = (p.mu1, p.mu2, p.mu3);
    let mut g: RawGrad = [0.0; 4];

    let x = s.x.values();
    let a3 = s.alpha3.values();
    let (u, v, w) = (o.u.values(), o.v.values(), o.w.values());
    let (xn, hxn) = (o.x.values(), o.hx.values());

    let mut wb = match w_bar {
        Some(wb) => wb.to_vec(),
        None => vec![0.0; n],
    };
    let mut vb = vec![0.0; n];
    g[0] += (0..n).map(|i| bar.a1[i] * (hxn[i] - v[i])).sum::<f64>();
    g[2] += (0..n).map(|i| bar.a3[i] * (xn[i] - w[i])).sum::<f64>();
    axpy(&mut vb, -mu1, &bar.a1);
    axpy(&mut wb, -mu3, &bar.a3);
    let xbar_spatial: Vec<f64> = (0..n).map(|i| bar.x[i] + mu3 * bar.a3[i]).collect();
    let xbar_h: Vec<f64> = bar.a1.iter().map(|a| mu1 * a).collect();

    // x⁺ = (μ₁HᵀH + (μ₂ + μ₃)I)⁻¹ r
    let (rb, hrb) = solve_adjoint(ops, &xbar_spatial, &xbar_h, den);
    let rx = dot(&rb, xn);
    g[0] -= dot(&hrb, hxn);
    g[1] -= rx;
    g[2] -= rx;

    // r = μ₃w − α₃ + μ₂u + Hᵀ(μ₁v − α₁)
    let mut a1b = bar.a1.clone();
    let mut a3b = bar.a3.clone();
    axpy(&mut wb, mu3, &rb);
    axpy(&mut a3b, -1.0, &rb);
    g[2] += dot(&rb, w);
    let ub: Vec<f64> = rb.iter().map(|r| mu2 * r).collect();
    g[1] += dot(&rb, u);
    axpy(&mut vb, mu1, &hrb);
    axpy(&mut a1b, -1.0, &hrb);
    g[0] += dot(&hrb, v);

    let mut xb = vec![0.0; n];
    for i in 0..n {
        if a3[i] / mu3 + x[i] > 0.0 {
            let t = wb[i];
            xb[i] += t;
            a3b[i] += t / mu3;
            g[2] -= t * a3[i] / (mu3 * mu3);
        }
    }

    let hx = s.hx.values();
    let mut hxb = vec![0.0; n];
    for i in 0..n {
        let sb = vb[i] / (ops.ctc()[i] + mu1);
        a1b[i] += sb;
        hxb[i] = mu1 * sb;
        g[0] += sb * (hx[i] - v[i]);
    }
    axpy(&mut xb, 1.0, &ops.forward().ht_raw(&hxb));

    // u = N(x)
    let through = transform.backward_raw(x, hidden, &ub, dims, tgrad);
    axpy(&mut xb, 1.0, &through);

    *bar = Adjoints { x: xb, a1: a1b, a2x: Vec::new(), a2y: Vec::new(), a3: a3b };
    g
}

/// Reverse pass: gradients of a scalar loss with respect to every model parameter, given
/// `∂loss/∂scene` for the scene returned by the forward pass.
pub fn leadmm_backward(tape: &Tape<'_>, d_scene: &Scene) -> Result<ThetaGradients> {
    let ops = tape.ops;
    let dims = ops.padded_dims();
    ensure_dims(dims, d_scene.dims())?;
    if tape.planes.len() != PLANES {
        return Err(Error::InvalidArgument("tape does not hold three planes".into()));
    }
    let model = &tape.model;
    let depth = model.theta.depth();
    let layers: Vec<StepParams> = model.theta.layers.iter().map(|l| l.step_params(model.shrinkage)).collect();
    let n = dims.len();

    let per_plane: Vec<Result<(Vec<RawGrad>, Option<TransformWeights>)>> = tape
        .planes
        .par_iter()
        .enumerate()
        .map(|(c, record)| {
            let upstream = d_scene.planes[c].values();
            let mut raw = vec![[0.0; 4]; depth];
            let mut bar = Adjoints::zeros(n);
            match record {
                PlaneRecord::LeAdmm(states) => {
                    if states.len() != depth + 1 {
                        return Err(Error::InvalidArgument("tape depth does not match the model".into()));
                    }
                    for k in (0..depth).rev() {
                        let p = &layers[k];
                        let den = ops.x_denominator(p.mu1, p.mu2, p.mu3);
                        let w_bar = (k + 1 == depth).then_some(upstream);
                        raw[k] = leadmm_layer_backward(ops, p, &states[k], &states[k + 1], &den, &mut bar, w_bar);
                        finite(&bar.x, &format!("layer {} backward", k + 1))?;
                    }
                    Ok((raw, None))
                }
                PlaneRecord::Star { states, hidden } => {
                    if states.len() != depth + 1 || hidden.len() != depth {
                        return Err(Error::InvalidArgument("tape depth does not match the model".into()));
                    }
                    let transform = model.transform.as_ref().expect("star tape carries a transform");
                    let mut tgrad = TransformWeights::zeros();
                    for k in (0..depth).rev() {
                        let p = &layers[k];
                        let den = star_denominator(ops, p);
                        let w_bar = (k + 1 == depth).then_some(upstream);
                        raw[k] = star_layer_backward(
                            ops, p, transform, &states[k], &states[k + 1], &hidden[k], &den, &mut bar, w_bar, &mut tgrad,
                        );
                        finite(&bar.x, &format!("layer {} backward", k + 1))?;
                    }
                    Ok((raw, Some(tgrad)))
                }
            }
        })
        .collect();

    let mut totals = vec![[0.0; 4]; depth];
    let mut transform: Option<TransformWeights> = None;
    for result in per_plane {
        let (raw, tgrad) = result?;
        for (t, r) in totals.iter_mut().zip(&raw) {
            for i in 0..4 {
                t[i] += r[i];
            }
        }
        if let Some(tg) = tgrad {
            transform = Some(match transform {
                None => tg,
                Some(acc) => {
                    let sum: Vec<f64> = acc.to_vec().iter().zip(tg.to_vec()).map(|(a, b)| a + b).collect();
                    TransformWeights::from_slice(&sum)?
                }
            });
        }
    }
    // Chain rule through the exponential parameterization.
    let layers_grad = totals
        .iter()
        .zip(&layers)
        .map(|(t, p)| LayerTheta::from_array([t[0] * p.mu1, t[1] * p.mu2, t[2] * p.mu3, t[3] * p.tau]))
        .collect::<Vec<_>>();
    if layers_grad.iter().flat_map(|l| l.as_array()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok(ThetaGradients { layers: layers_grad, transform })
}

/// One row of [`gradient_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub step: f64,
    /// False when the gradient is below the reporting floor and was not compared.
    pub checked: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().filter(|e| e.checked).count()
    }
}

/// Relative tolerance applied by [`gradient_check`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are reported but not compared.
pub const GRADCHECK_FLOOR: f64 = 1e-12;

/// Mean squared error over the central `valid` block of the sensor crop, and its gradient on
/// the padded scene grid.
pub fn crop_mse(scene: &Scene, x_gt: &ColorImage, valid: Dims) -> Result<(f64, Scene)> {
    let sensor = x_gt.dims();
    let padded = scene.dims();
    let count = (PLANES * valid.len()) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(PLANES);
    for c in 0..PLANES {
        let est = crop_center(&crop_center(&scene.planes[c], sensor)?, valid)?;
        let gt = crop_center(&x_gt.planes[c], valid)?;
        let diff = est.zip_map(&gt, |a, b| a - b)?;
        loss += diff.sum_squares() / count;
        let g = diff.scaled(2.0 / count);
        grads.push(pad_center(&pad_center(&g, sensor)?, padded)?);
    }
    Ok((loss, Scene::new(grads.try_into().expect("three planes"))?))
}

/// Which side of every kink each pixel sits on, for all layers and planes.
fn kink_signature(tape: &Tape<'_>) -> Vec<bool> {
    let model = &tape.model;
    let dims = tape.ops.padded_dims();
    let mut sig = Vec::new();
    for record in &tape.planes {
        match record {
            PlaneRecord::LeAdmm(states) => {
                for (k, layer) in model.theta.layers.iter().enumerate() {
                    let p = layer.step_params(model.shrinkage);
                    let s = &states[k];
                    let (px, py) = psi_forward_raw(s.x.values(), dims);
                    let zx: Vec<f64> = px.iter().zip(s.alpha2.gx.values()).map(|(g, a)| g + a / p.mu2).collect();
                    let zy: Vec<f64> = py.iter().zip(s.alpha2.gy.values()).map(|(g, a)| g + a / p.mu2).collect();
                    let (ux, uy) = shrink_raw(&zx, &zy, p.tau / p.mu2, p.shrinkage);
                    sig.extend(ux.iter().zip(&uy).map(|(a, b)| *a != 0.0 || *b != 0.0));
                    sig.extend(s.x.values().iter().zip(s.alpha3.values()).map(|(x, a)| a / p.mu3 + x > 0.0));
                }
            }
            PlaneRecord::Star { states, .. } => {
                for (k, layer) in model.theta.layers.iter().enumerate() {
                    let p = layer.step_params(model.shrinkage);
                    let s = &states[k];
                    sig.extend(s.x.values().iter().zip(s.alpha3.values()).map(|(x, a)| a / p.mu3 + x > 0.0));
                }
            }
        }
    }
    sig
}

/// Compare analytic gradients of the crop MSE against central differences of step `step`.
///
/// Each probe is retried with a smaller step when the perturbation moves any pixel across a
/// shrinkage dead-zone boundary or the nonnegativity clamp.
pub fn gradient_check(
    model: &UnrolledModel,
    psf: &Psf,
    b: &Measurement,
    x_gt: &ColorImage,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let sensor = psf.sensor_dims();
    if sensor.rows > 32 || sensor.cols > 32 {
        return Err(Error::InvalidArgument(format!("gradient check is limited to 32x32 sensors, got {sensor}")));
    }
    ensure_dims(sensor, x_gt.dims())?;
    let ops = PrecomputedOperators::new(psf)?;
    let valid = sensor;
    let pass = run_forward(&ops, model, b)?;
    let (_, d_scene) = crop_mse(&pass.scene, x_gt, valid)?;
    let analytic = leadmm_backward(&pass.tape, &d_scene)?.to_vec();
    let base_sig = kink_signature(&pass.tape);
    let names = model.param_names();
    let base = model.params();

    let probe = |i: usize, h: f64| -> Result<(f64, bool)> {
        let mut values = [0.0; 2];
        let mut smooth = true;
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut params = base.clone();
            params[i] += sign * h;
            let mut m = model.clone();
            m.set_params(&params)?;
            let fp = run_forward(&ops, &m, b)?;
            smooth &= kink_signature(&fp.tape) == base_sig;
            values[slot] = crop_mse(&fp.scene, x_gt, valid)?.0;
        }
        Ok(((values[0] - values[1]) / (2.0 * h), smooth))
    };

    let entries = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let mut h = step;
            let (mut numeric, mut smooth) = probe(i, h)?;
            for _ in 0..6 {
                if smooth {
                    break;
                }
                h *= 0.25;
                (numeric, smooth) = probe(i, h)?;
            }
            let a = analytic[i];
            let checked = a.abs() >= GRADCHECK_FLOOR;
            let scale = a.abs().max(numeric.abs());
            let rel_error = if scale > 0.0 { (a - numeric).abs() / scale } else { 0.0 };
            Ok(GradCheckEntry {
                name: names[i].clone(),
                analytic: a,
                numeric,
                rel_error,
                step: h,
                checked,
                pass: !checked || rel_error < GRADCHECK_TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { entries, tolerance: GRADCHECK_TOLERANCE })
}

/// MSE and data fidelity of one layer's `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub mse: f64,
    pub data_fidelity: f64,
}

/// Quality of each layer's `x` snapshot against the ground truth, in layer order.
pub fn per_layer_metrics(
    snapshots: &[Scene],
    x_gt: &ColorImage,
    ops: &PrecomputedOperators,
    b: &Measurement,
    valid: Dims,
) -> Result<Vec<LayerMetrics>> {
    snapshots
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let (mse, _) = crop_mse(x, x_gt, valid)?;
            let data_fidelity = crate::training::data_fidelity_with(ops, b, x)?;
            Ok(LayerMetrics { layer: k + 1, mse, data_fidelity })
        })
        .collect()
}
