//! Datasets, image-quality losses, the Adam optimizer, the training loop and test-set evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{admm_solve_with, AdmmParams, PrecomputedOperators};
use crate::error::{Error, Result};
use crate::forward::{measure_with, ColorImage, Measurement, NoiseModel, Psf, Scene, PLANES};
use crate::grid::{crop_center, ensure_dims, pad_center, Dims, RealGrid};
use crate::unrolled::{leadmm_backward, model_forward, reconstruct, UnrolledModel, Variant};

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub measurement: Measurement,
    /// Ground truth at sensor dims, values in `[0, 1]`.
    pub ground_truth: ColorImage,
    /// Central block used for losses and metrics.
    pub valid_region: Dims,
}

impl DatasetPair {
    pub fn new(measurement: Measurement, ground_truth: ColorImage, valid_region: Dims) -> Result<Self> {
        ensure_dims(measurement.dims(), ground_truth.dims())?;
        if !valid_region.fits_within(&ground_truth.dims()) {
            return Err(Error::InvalidDims(format!(
                "valid region {valid_region} exceeds sensor {}",
                ground_truth.dims()
            )));
        }
        if ground_truth.min() < 0.0 || ground_truth.max() > 1.0 {
            return Err(Error::InvalidArgument("ground truth must lie in [0, 1]".into()));
        }
        Ok(DatasetPair { measurement, ground_truth, valid_region })
    }

    pub fn sensor_dims(&self) -> Dims {
        self.ground_truth.dims()
    }
}

/// Central 80% of the sensor in each dimension.
pub fn default_valid_region(sensor: Dims) -> Dims {
    let shrink = |n: usize| ((n as f64 * 0.8).round() as usize).clamp(1, n);
    Dims { rows: shrink(sensor.rows), cols: shrink(sensor.cols) }
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub fn resize_bilinear(src: &RealGrid, target: Dims) -> RealGrid {
    let sd = src.dims();
    let coord = |i: usize, from: usize, to: usize| {
        let pos = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(from - 1), pos - lo as f64)
    };
    let data = (0..target.rows)
        .flat_map(|r| {
            let (r0, r1, fr) = coord(r, sd.rows, target.rows);
            (0..target.cols).map(move |c| {
                let (c0, c1, fc) = coord(c, sd.cols, target.cols);
                let top = src.get(r0, c0) * (1.0 - fc) + src.get(r0, c1) * fc;
                let bottom = src.get(r1, c0) * (1.0 - fc) + src.get(r1, c1) * fc;
                top * (1.0 - fr) + bottom * fr
            })
        })
        .collect();
    RealGrid::from_vec(target, data)
}

/// Rescale so the brightest value across planes is 1; negative values clip to 0.
pub fn normalize_intensity(image: &ColorImage) -> ColorImage {
    let peak = image.max();
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    ColorImage {
        planes: std::array::from_fn(|c| {
            let data = image.planes[c].values().iter().map(|v| (v * scale).clamp(0.0, 1.0)).collect();
            RealGrid::from_vec(image.dims(), data)
        }),
    }
}

/// Piecewise-smooth synthetic color images: a shaded background with overlapping
/// rectangles and ellipses, rendered at `dims`.
pub fn procedural_sources(count: usize, dims: Dims, seed: u64) -> Vec<ColorImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.4));
            let slope: [(f64, f64); 3] =
                std::array::from_fn(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
            let mut planes: [Vec<f64>; 3] = std::array::from_fn(|c| {
                (0..dims.len())
                    .map(|i| {
                        let y = (i / dims.cols) as f64 / dims.rows as f64;
                        let x = (i % dims.cols) as f64 / dims.cols as f64;
                        base[c] + slope[c].0 * y + slope[c].1 * x
                    })
                    .collect()
            });
            let shapes = rng.random_range(3..8);
            for _ in 0..shapes {
                let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let cy = rng.random_range(0.0..1.0);
                let cx = rng.random_range(0.0..1.0);
                let ry = rng.random_range(0.08..0.35);
                let rx = rng.random_range(0.08..0.35);
                let ellipse = rng.random_bool(0.5);
                for i in 0..dims.len() {
                    let dy = ((i / dims.cols) as f64 + 0.5) / dims.rows as f64 - cy;
                    let dx = ((i % dims.cols) as f64 + 0.5) / dims.cols as f64 - cx;
                    let inside = if ellipse {
                        (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
                    } else {
                        dy.abs() <= ry && dx.abs() <= rx
                    };
                    if inside {
                        for (c, plane) in planes.iter_mut().enumerate() {
                            plane[i] = color[c];
                        }
                    }
                }
            }
            normalize_intensity(&ColorImage {
                planes: planes.map(|p| RealGrid::from_vec(dims, p)),
            })
        })
        .collect()
}

/// Train/test split of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<DatasetPair>,
    pub test: Vec<DatasetPair>,
}

/// Options for [`generate_synthetic_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub sensor: Dims,
    pub count: usize,
    /// Fraction of pairs assigned to the training split.
    pub split_fraction: f64,
    pub seed: u64,
    pub noise: NoiseModel,
    /// Allow `count` to exceed the number of sources by cycling through them.
    #[serde(default)]
    pub repeat: bool,
}

/// Resize, normalize and measure source images, then split with a seeded shuffle.
pub fn generate_synthetic_dataset(sources: &[ColorImage], psf: &Psf, spec: &DatasetSpec) -> Result<Dataset> {
    if spec.count < 2 {
        return Err(Error::InvalidArgument("dataset needs at least 2 pairs".into()));
    }
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no source images".into()));
    }
    if spec.count > sources.len() && !spec.repeat {
        return Err(Error::InvalidArgument(format!(
            "{} pairs requested from {} sources without repeat",
            spec.count,
            sources.len()
        )));
    }
    if !(0.0..=1.0).contains(&spec.split_fraction) {
        return Err(Error::InvalidArgument(format!("split fraction {} outside [0, 1]", spec.split_fraction)));
    }
    ensure_dims(psf.sensor_dims(), spec.sensor)?;
    let ops = PrecomputedOperators::new(psf)?;
    let valid = default_valid_region(spec.sensor);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_seeds: Vec<u64> = (0..spec.count).map(|_| rng.random()).collect();

    let pairs = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let src = &sources[i % sources.len()];
            let resized = ColorImage { planes: std::array::from_fn(|c| resize_bilinear(&src.planes[c], spec.sensor)) };
            let gt = normalize_intensity(&resized);
            let noise = spec.noise.with_seed(noise_seeds[i]);
            let b = measure_with(ops.forward(), &Scene::embed(&gt)?, &noise)?;
            DatasetPair::new(b, gt, valid)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut rng);
    let n_train = ((spec.count as f64 * spec.split_fraction).round() as usize).clamp(1, spec.count - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok(Dataset { train: pick(&order[..n_train]), test: pick(&order[n_train..]) })
}

/// `½‖b − CHx̂‖²` summed over color planes.
pub fn data_fidelity(psf: &Psf, b: &Measurement, x_hat: &Scene) -> Result<f64> {
    data_fidelity_with(&PrecomputedOperators::new(psf)?, b, x_hat)
}

pub(crate) fn data_fidelity_with(ops: &PrecomputedOperators, b: &Measurement, x_hat: &Scene) -> Result<f64> {
    ensure_dims(ops.sensor_dims(), b.dims())?;
    ensure_dims(ops.padded_dims(), x_hat.dims())?;
    let mut total = 0.0;
    for c in 0..PLANES {
        let pred = ops.forward().apply_ch(&x_hat.planes[c])?;
        total += pred.values().iter().zip(b.planes[c].values()).map(|(p, m)| (m - p) * (m - p)).sum::<f64>();
    }
    Ok(0.5 * total)
}

/// Image-quality summary of one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// PSNR in dB for peak value 1; infinite for a perfect match.
pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

fn crop_pair(x_hat: &ColorImage, x_gt: &ColorImage, valid: Dims) -> Result<([RealGrid; 3], [RealGrid; 3])> {
    ensure_dims(x_gt.dims(), x_hat.dims())?;
    let crop = |img: &ColorImage| -> Result<[RealGrid; 3]> {
        Ok([
            crop_center(&img.planes[0], valid)?,
            crop_center(&img.planes[1], valid)?,
            crop_center(&img.planes[2], valid)?,
        ])
    };
    Ok((crop(x_hat)?, crop(x_gt)?))
}

/// Per-pixel mean squared error, PSNR and mean SSIM over the central `valid` block.
pub fn metrics(x_hat: &ColorImage, x_gt: &ColorImage, valid: Dims) -> Result<Metrics> {
    let (a, b) = crop_pair(x_hat, x_gt, valid)?;
    let mut sq = 0.0;
    let mut ssim_sum = 0.0;
    for c in 0..PLANES {
        sq += a[c].values().iter().zip(b[c].values()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        ssim_sum += ssim_plane(a[c].values(), b[c].values(), valid, false).0;
    }
    let mse = sq / (PLANES * valid.len()) as f64;
    Ok(Metrics { mse, psnr: psnr(mse), ssim: ssim_sum / PLANES as f64 })
}

/// Window side used for a region: 8, or the smaller region side when that is below 8.
pub fn ssim_window(valid: Dims) -> usize {
    SSIM_WINDOW.min(valid.rows).min(valid.cols)
}

/// Sums of every `w×w` window, `(R−w+1)×(C−w+1)` values.
fn window_sums(x: &[f64], d: Dims, w: usize) -> Vec<f64> {
    let out_r = d.rows - w + 1;
    let out_c = d.cols - w + 1;
    let mut horiz = vec![0.0; d.rows * out_c];
    for r in 0..d.rows {
        let row = &x[r * d.cols..(r + 1) * d.cols];
        let mut acc: f64 = row[..w].iter().sum();
        horiz[r * out_c] = acc;
        for c in 1..out_c {
            acc += row[c + w - 1] - row[c - 1];
            horiz[r * out_c + c] = acc;
        }
    }
    let mut out = vec![0.0; out_r * out_c];
    for c in 0..out_c {
        let mut acc: f64 = (0..w).map(|r| horiz[r * out_c + c]).sum();
        out[c] = acc;
        for r in 1..out_r {
            acc += horiz[(r + w - 1) * out_c + c] - horiz[(r - 1) * out_c + c];
            out[r * out_c + c] = acc;
        }
    }
    out
}

/// Adjoint of [`window_sums`]: each pixel gathers the values of every window covering it.
fn window_sums_adjoint(g: &[f64], d: Dims, w: usize) -> Vec<f64> {
    let out_r = d.rows - w + 1;
    let out_c = d.cols - w + 1;
    let mut vert = vec![0.0; d.rows * out_c];
    for c in 0..out_c {
        let mut acc = 0.0;
        for r in 0..d.rows {
            if r < out_r {
                acc += g[r * out_c + c];
            }
            if r >= w {
                acc -= g[(r - w) * out_c + c];
            }
            vert[r * out_c + c] = acc;
        }
    }
    let mut out = vec![0.0; d.len()];
    for r in 0..d.rows {
        let mut acc = 0.0;
        for c in 0..d.cols {
            if c < out_c {
                acc += vert[r * out_c + c];
            }
            if c >= w {
                acc -= vert[r * out_c + c - w];
            }
            out[r * d.cols + c] = acc;
        }
    }
    out
}

/// Mean SSIM of one plane and, when requested, its gradient with respect to `x`.
fn ssim_plane(x: &[f64], y: &[f64], d: Dims, with_grad: bool) -> (f64, Vec<f64>) {
    let w = ssim_window(d);
    let n = (w * w) as f64;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = window_sums(x, d, w);
    let my = window_sums(y, d, w);
    let mxx = window_sums(&prod(x, x), d, w);
    let myy = window_sums(&prod(y, y), d, w);
    let mxy = window_sums(&prod(x, y), d, w);
    let windows = mx.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_xx, mut g_xy) = if with_grad {
        (vec![0.0; windows], vec![0.0; windows], vec![0.0; windows])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..windows {
        let (ux, uy) = (mx[i] / n, my[i] / n);
        let (exx, eyy, exy) = (mxx[i] / n, myy[i] / n, mxy[i] / n);
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * (exy - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (exx - ux * ux) + (eyy - uy * uy) + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if with_grad {
            g_mu[i] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2) / n;
            g_xx[i] = -s / b2 / n;
            g_xy[i] = 2.0 * s / a2 / n;
        }
    }
    let mean = total / windows as f64;
    if !with_grad {
        return (mean, Vec::new());
    }
    let scale = 1.0 / windows as f64;
    let s_mu = window_sums_adjoint(&g_mu, d, w);
    let s_xx = window_sums_adjoint(&g_xx, d, w);
    let s_xy = window_sums_adjoint(&g_xy, d, w);
    let grad = (0..d.len()).map(|p| scale * (s_mu[p] + 2.0 * x[p] * s_xx[p] + y[p] * s_xy[p])).collect();
    (mean, grad)
}

/// Per-epoch loss weights: `w_mse` constant, `w_ssim` ramping linearly from 0 to its final value
/// over the first `ramp_fraction` of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSchedule {
    pub mse_weight: f64,
    pub ssim_weight: f64,
    pub ramp_fraction: f64,
    pub epochs: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule { mse_weight: 1.0, ssim_weight: 1.0, ramp_fraction: 0.5, epochs: 1 }
    }
}

impl LossSchedule {
    pub fn for_epochs(epochs: usize) -> Self {
        LossSchedule { epochs, ..Default::default() }
    }

    pub fn mse_only(epochs: usize) -> Self {
        LossSchedule { ssim_weight: 0.0, epochs, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.mse_weight) || !ok(self.ssim_weight) || !ok(self.ramp_fraction) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.mse_weight == 0.0 && self.ssim_weight == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }

    pub fn w_mse(&self, _epoch: usize) -> f64 {
        self.mse_weight
    }

    /// Weight at 0-based `epoch`.
    pub fn w_ssim(&self, epoch: usize) -> f64 {
        let ramp = self.ramp_fraction * self.epochs as f64;
        if ramp <= 0.0 {
            return self.ssim_weight;
        }
        self.ssim_weight * (epoch as f64 / ramp).min(1.0)
    }
}

/// `w_mse·MSE + w_ssim·(1 − SSIM)` on the valid crop, and its gradient with respect to `x_hat`
/// (zero outside the crop).
pub fn loss_eval(
    x_hat: &ColorImage,
    x_gt: &ColorImage,
    valid: Dims,
    schedule: &LossSchedule,
    epoch: usize,
) -> Result<(f64, ColorImage)> {
    schedule.validate()?;
    let (a, b) = crop_pair(x_hat, x_gt, valid)?;
    let wm = schedule.w_mse(epoch);
    let ws = schedule.w_ssim(epoch);
    let count = (PLANES * valid.len()) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(PLANES);
    for c in 0..PLANES {
        let (p, q) = (a[c].values(), b[c].values());
        let mut g: Vec<f64> = p.iter().zip(q).map(|(u, v)| 2.0 * wm * (u - v) / count).collect();
        loss += wm * p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / count;
        if ws > 0.0 {
            let (s, sg) = ssim_plane(p, q, valid, true);
            loss += ws * (1.0 - s) / PLANES as f64;
            g.iter_mut().zip(&sg).for_each(|(gi, si)| *gi -= ws * si / PLANES as f64);
        }
        grads.push(pad_center(&RealGrid::from_vec(valid, g), x_gt.dims())?);
    }
    Ok((loss, ColorImage::new(grads.try_into().expect("three planes"))?))
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &[f64], grads: &[f64], state: &AdamState) -> Result<(Vec<f64>, AdamState)> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::InvalidArgument(format!(
            "adam shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let t = state.t + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let m: Vec<f64> = state.m.iter().zip(grads).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect();
    let v: Vec<f64> = state.v.iter().zip(grads).map(|(v, g)| b2 * v + (1.0 - b2) * g * g).collect();
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let next: Vec<f64> = params
        .iter()
        .zip(m.iter().zip(&v))
        .map(|(p, (mi, vi))| p - state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps))
        .collect();
    Ok((next, AdamState { m, v, t, ..state.clone() }))
}

/// Settings for [`train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LossSchedule,
    pub seed: u64,
}

impl TrainConfig {
    /// Default learning rate per variant.
    pub fn default_lr(variant: Variant) -> f64 {
        match variant {
            Variant::LeAdmm => 1e-2,
            Variant::LeAdmmStar => 1e-3,
        }
    }

    pub fn new(variant: Variant, epochs: usize, seed: u64) -> Self {
        TrainConfig { epochs, lr: Self::default_lr(variant), schedule: LossSchedule::for_epochs(epochs), seed }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch; 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mse: f64,
    pub test_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest test MSE seen, including the untrained start.
    pub checkpoint: UnrolledModel,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: UnrolledModel,
    pub history: Vec<EpochRecord>,
}

/// Mean MSE and SSIM of a model over pairs, reduced in pair order.
pub fn test_metrics(model: &UnrolledModel, ops: &PrecomputedOperators, pairs: &[DatasetPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let rows = pairs
        .par_iter()
        .map(|p| {
            let scene = reconstruct(model, ops, &p.measurement)?;
            metrics(&scene.crop_to(p.sensor_dims())?, &p.ground_truth, p.valid_region)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok((rows.iter().map(|m| m.mse).sum::<f64>() / n, rows.iter().map(|m| m.ssim).sum::<f64>() / n))
}

/// Single-example Adam training, keeping the parameters with the best test MSE.
pub fn train(initial: &UnrolledModel, dataset: &Dataset, psf: &Psf, config: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {}", config.lr)));
    }
    config.schedule.validate()?;
    initial.validate()?;
    let ops = PrecomputedOperators::new(psf)?;
    for p in dataset.train.iter().chain(&dataset.test) {
        ensure_dims(ops.sensor_dims(), p.sensor_dims())?;
    }
    let schedule = LossSchedule { epochs: config.epochs, ..config.schedule };

    let mut model = initial.clone();
    let mut adam = AdamState::new(model.params().len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mse0, ssim0) = test_metrics(&model, &ops, &dataset.test)?;
    let mut history = vec![EpochRecord { epoch: 0, train_loss: f64::NAN, test_mse: mse0, test_ssim: ssim0 }];
    let mut best = (mse0, 0, model.clone());
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let pair = &dataset.train[i];
            let diverged = |loss: f64| Error::Diverged { epoch: epoch + 1, example: i, loss };
            let pass = model_forward(&model, &ops, &pair.measurement).map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                other => other,
            })?;
            let estimate = pass.scene.crop_to(pair.sensor_dims())?;
            let (loss, grad) = loss_eval(&estimate, &pair.ground_truth, pair.valid_region, &schedule, epoch)?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            loss_sum += loss;
            let d_scene = Scene::embed(&grad)?;
            let grads = leadmm_backward(&pass.tape, &d_scene)
                .map_err(|e| match e {
                    Error::NonFinite(_) => diverged(loss),
                    other => other,
                })?
                .to_vec();
            let (next, state) = adam_step(&model.params(), &grads, &adam)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(diverged(loss));
            }
            adam = state;
            model.set_params(&next)?;
        }
        let (test_mse, test_ssim) = test_metrics(&model, &ops, &dataset.test)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / order.len() as f64,
            test_mse,
            test_ssim,
        });
        if test_mse < best.0 {
            best = (test_mse, epoch + 1, model.clone());
        }
    }
    // Without a test set the last parameters are the checkpoint.
    let (checkpoint, best_epoch) = if dataset.test.is_empty() {
        (model.clone(), config.epochs)
    } else {
        (best.2, best.1)
    };
    Ok(TrainOutcome { checkpoint, best_epoch, last: model, history })
}

/// A reconstruction method to evaluate.
#[derive(Clone, Debug)]
pub enum Method {
    Admm { label: String, params: AdmmParams },
    Unrolled { label: String, model: UnrolledModel, n_train: usize },
    /// Returns the ground truth itself; a sanity row.
    GroundTruth,
}

impl Method {
    pub fn label(&self) -> &str {
        match self {
            Method::Admm { label, .. } | Method::Unrolled { label, .. } => label,
            Method::GroundTruth => "ground-truth",
        }
    }

    fn n_train(&self) -> usize {
        match self {
            Method::Unrolled { n_train, .. } => *n_train,
            _ => 0,
        }
    }

    fn run(&self, ops: &PrecomputedOperators, pair: &DatasetPair) -> Result<Scene> {
        match self {
            Method::Admm { params, .. } => Ok(admm_solve_with(ops, &pair.measurement, params, None)?.0),
            Method::Unrolled { model, .. } => reconstruct(model, ops, &pair.measurement),
            Method::GroundTruth => Scene::embed(&pair.ground_truth),
        }
    }
}

/// One method's averages over the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub data_fidelity: f64,
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub wall_time_ms: f64,
    pub n_train_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MethodRow>,
}

impl MetricsReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<16} {:>14} {:>10} {:>8} {:>8} {:>12} {:>8}",
            "method", "data_fidelity", "mse", "ssim", "psnr", "time_ms", "n_train"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<16} {:>14.4} {:>10.6} {:>8.4} {:>8.2} {:>12.3} {:>8}",
                r.method, r.data_fidelity, r.mse, r.ssim, r.psnr, r.wall_time_ms, r.n_train_images
            )?;
        }
        Ok(())
    }
}

/// Median of `runs` timed reconstructions of `pair`, in milliseconds.
pub fn median_wall_time_ms(method: &Method, ops: &PrecomputedOperators, pair: &DatasetPair, runs: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        std::hint::black_box(method.run(ops, pair)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Mean quality metrics per method and median wall time of `timing_runs` (at least 5) runs.
pub fn evaluate_testset(methods: &[Method], test: &[DatasetPair], psf: &Psf, timing_runs: usize) -> Result<MetricsReport> {
    if methods.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one method and one pair".into()));
    }
    let ops = PrecomputedOperators::new(psf)?;
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let per_pair = test
            .par_iter()
            .map(|pair| {
                let scene = method.run(&ops, pair)?;
                let m = metrics(&scene.crop_to(pair.sensor_dims())?, &pair.ground_truth, pair.valid_region)?;
                Ok((data_fidelity_with(&ops, &pair.measurement, &scene)?, m))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_pair.len() as f64;
        let mean = |f: &dyn Fn(&(f64, Metrics)) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
        rows.push(MethodRow {
            method: method.label().to_string(),
            data_fidelity: mean(&|r| r.0),
            mse: mean(&|r| r.1.mse),
            ssim: mean(&|r| r.1.ssim),
            psnr: mean(&|r| r.1.psnr),
            wall_time_ms: median_wall_time_ms(method, &ops, &test[0], timing_runs.max(5))?,
            n_train_images: method.n_train(),
        });
    }
    Ok(MetricsReport { rows })
}

/// Test metrics for one training-set size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub train_size: usize,
    pub test_mse: f64,
    pub test_ssim: f64,
    pub best_epoch: usize,
}

/// Train from the same initialization on the first `size` training pairs for each size.
pub fn sweep_train_size(
    sizes: &[usize],
    initial: &UnrolledModel,
    dataset: &Dataset,
    psf: &Psf,
    config: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no training-set sizes given".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > dataset.train.len()) {
        return Err(Error::InvalidArgument(format!(
            "training size {bad} outside 1..={}",
            dataset.train.len()
        )));
    }
    let ops = PrecomputedOperators::new(psf)?;
    sizes
        .iter()
        .map(|&size| {
            let subset = Dataset { train: dataset.train[..size].to_vec(), test: dataset.test.clone() };
            let outcome = train(initial, &subset, psf, config)?;
            let (test_mse, test_ssim) = test_metrics(&outcome.checkpoint, &ops, &dataset.test)?;
            Ok(SweepRow { train_size: size, test_mse, test_ssim, best_epoch: outcome.best_epoch })
        })
        .collect()
}
