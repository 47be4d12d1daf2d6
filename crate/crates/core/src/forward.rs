//! Imaging physics: `b = C H x` per color plane.
//!
//! `H` is circular convolution with the PSF on a working grid twice the sensor
//! size in each axis, `C` crops the central sensor block. The PSF is stored
//! center-origin at sensor size; [`ForwardOperator`] embeds it in the padded
//! grid and rolls it so the sensor-grid center pixel lands on index `(0, 0)`,
//! which makes a centered delta PSF the identity.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{center_offset, crop_center, ensure_dims, pad_center, ComplexGrid, Dims, Fft2, RealGrid};

/// Color planes carried by scenes, measurements and ground truths.
pub const PLANES: usize = 3;

/// Unit-ℓ2 point spread function shared by all color planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    grid: RealGrid,
    norm: f64,
}

impl Psf {
    pub fn grid(&self) -> &RealGrid {
        &self.grid
    }

    /// The ℓ2 norm that was divided out of the raw calibration image.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn sensor_dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn padded_dims(&self) -> Dims {
        self.grid.dims().doubled()
    }
}

pub fn normalize_psf(raw: &RealGrid) -> Result<Psf> {
    if raw.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("PSF has negative entries".into()));
    }
    let norm = raw.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("PSF is all zeros".into()));
    }
    Ok(Psf { grid: raw.scaled(1.0 / norm), norm })
}

macro_rules! color_planes {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Three color planes (R, G, B) holding ", $what, ".")]
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            pub planes: [RealGrid; PLANES],
        }

        impl $name {
            pub fn new(planes: [RealGrid; PLANES]) -> Result<Self> {
                let d = planes[0].dims();
                for p in &planes[1..] {
                    ensure_dims(d, p.dims())?;
                }
                Ok(Self { planes })
            }

            pub fn zeros(dims: Dims) -> Self {
                Self { planes: std::array::from_fn(|_| RealGrid::zeros(dims)) }
            }

            pub fn dims(&self) -> Dims {
                self.planes[0].dims()
            }

            pub fn min(&self) -> f64 {
                self.planes.iter().map(RealGrid::min).fold(f64::INFINITY, f64::min)
            }

            pub fn max(&self) -> f64 {
                self.planes.iter().map(RealGrid::max).fold(f64::NEG_INFINITY, f64::max)
            }

            pub fn scaled(&self, factor: f64) -> Self {
                Self { planes: std::array::from_fn(|i| self.planes[i].scaled(factor)) }
            }
        }
    };
}

color_planes!(Scene, "a scene estimate on the padded working grid");
color_planes!(Measurement, "a sensor measurement");
color_planes!(ColorImage, "an image at sensor size, such as a ground truth");

impl Scene {
    /// Embed a sensor-sized image in the center of the padded grid.
    pub fn embed(image: &ColorImage) -> Result<Scene> {
        let padded = image.dims().doubled();
        let planes = [
            pad_center(&image.planes[0], padded)?,
            pad_center(&image.planes[1], padded)?,
            pad_center(&image.planes[2], padded)?,
        ];
        Scene::new(planes)
    }

    /// The central sensor-sized block of each plane.
    pub fn crop_to(&self, sensor: Dims) -> Result<ColorImage> {
        ColorImage::new([
            crop_center(&self.planes[0], sensor)?,
            crop_center(&self.planes[1], sensor)?,
            crop_center(&self.planes[2], sensor)?,
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    None,
    Gaussian,
}

/// Additive noise applied by [`forward_measure`]; `sigma` is a fraction of the peak clean signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel::default()
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseModel { kind: NoiseKind::Gaussian, sigma, seed }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseModel { seed, ..self }
    }
}

/// Precomputed PSF spectrum on the padded grid; immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct ForwardOperator {
    sensor: Dims,
    padded: Dims,
    fft: Fft2,
    spectrum: Vec<Complex64>,
}

impl ForwardOperator {
    pub fn new(psf: &Psf) -> Result<Self> {
        let sensor = psf.sensor_dims();
        let padded = psf.padded_dims();
        let embedded = pad_center(psf.grid(), padded)?;
        let (r0, c0) = center_offset(sensor, padded);
        let center = ((r0 + sensor.rows / 2) as isize, (c0 + sensor.cols / 2) as isize);
        let origin = embedded.roll(-center.0, -center.1);
        let fft = Fft2::new(padded);
        let spectrum = fft.forward_real(origin.values());
        Ok(ForwardOperator { sensor, padded, fft, spectrum })
    }

    pub fn sensor_dims(&self) -> Dims {
        self.sensor
    }

    pub fn padded_dims(&self) -> Dims {
        self.padded
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn psf_spectrum(&self) -> ComplexGrid {
        ComplexGrid::from_vec(self.padded, self.spectrum.clone())
    }

    pub(crate) fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    pub fn apply_h(&self, x: &RealGrid) -> Result<RealGrid> {
        ensure_dims(self.padded, x.dims())?;
        Ok(RealGrid::from_vec(self.padded, self.h_raw(x.values())))
    }

    pub fn apply_h_adjoint(&self, y: &RealGrid) -> Result<RealGrid> {
        ensure_dims(self.padded, y.dims())?;
        Ok(RealGrid::from_vec(self.padded, self.ht_raw(y.values())))
    }

    /// `C H x`: convolve on the padded grid, then crop to the sensor.
    pub fn apply_ch(&self, x: &RealGrid) -> Result<RealGrid> {
        crop_center(&self.apply_h(x)?, self.sensor)
    }

    /// `Hᵀ Cᵀ y` for a sensor-sized `y`.
    pub fn apply_ch_adjoint(&self, y: &RealGrid) -> Result<RealGrid> {
        ensure_dims(self.sensor, y.dims())?;
        self.apply_h_adjoint(&pad_center(y, self.padded)?)
    }

    pub(crate) fn h_raw(&self, x: &[f64]) -> Vec<f64> {
        self.filter(x, false)
    }

    pub(crate) fn ht_raw(&self, y: &[f64]) -> Vec<f64> {
        self.filter(y, true)
    }

    fn filter(&self, x: &[f64], adjoint: bool) -> Vec<f64> {
        let mut buf = self.fft.forward_real(x);
        if adjoint {
            buf.iter_mut().zip(&self.spectrum).for_each(|(z, h)| *z *= h.conj());
        } else {
            buf.iter_mut().zip(&self.spectrum).for_each(|(z, h)| *z *= h);
        }
        self.fft.inverse_real(buf)
    }
}

pub fn apply_h(psf: &Psf, x: &RealGrid) -> Result<RealGrid> {
    ForwardOperator::new(psf)?.apply_h(x)
}

pub fn apply_h_adjoint(psf: &Psf, y: &RealGrid) -> Result<RealGrid> {
    ForwardOperator::new(psf)?.apply_h_adjoint(y)
}

/// Simulate a sensor measurement of `scene`, plane by plane.
pub fn forward_measure(psf: &Psf, scene: &Scene, noise: &NoiseModel) -> Result<Measurement> {
    let op = ForwardOperator::new(psf)?;
    measure_with(&op, scene, noise)
}

pub(crate) fn measure_with(op: &ForwardOperator, scene: &Scene, noise: &NoiseModel) -> Result<Measurement> {
    ensure_dims(op.padded_dims(), scene.dims())?;
    let clean = Measurement::new([
        op.apply_ch(&scene.planes[0])?,
        op.apply_ch(&scene.planes[1])?,
        op.apply_ch(&scene.planes[2])?,
    ])?;
    match noise.kind {
        NoiseKind::None => Ok(clean),
        NoiseKind::Gaussian => {
            if noise.sigma < 0.0 || !noise.sigma.is_finite() {
                return Err(Error::InvalidArgument(format!("noise sigma {} must be >= 0", noise.sigma)));
            }
            let std = noise.sigma * clean.max().max(0.0);
            if std == 0.0 {
                return Ok(clean);
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            let planes = clean.planes.map(|p| {
                let noisy = p.values().iter().map(|&v| (v + normal.sample(&mut rng)).max(0.0)).collect();
                RealGrid::from_vec(p.dims(), noisy)
            });
            Measurement::new(planes)
        }
    }
}

/// A synthetic caustic-like PSF: sparse bright blobs and short streaks over the central
/// two-thirds of the sensor. Not normalized.
pub fn caustic_psf(sensor: Dims, seed: u64) -> RealGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (sensor.rows as f64, sensor.cols as f64);
    let spots = ((sensor.len() as f64).sqrt() * 1.5).ceil() as usize;
    let mut centers = Vec::with_capacity(spots * 3);
    for _ in 0..spots {
        let r = rows * rng.random_range(1.0 / 6.0..5.0 / 6.0);
        let c = cols * rng.random_range(1.0 / 6.0..5.0 / 6.0);
        let amp = rng.random_range(0.3..1.0);
        // Each spot is smeared into a short streak of three blobs.
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        for k in -1..=1 {
            let t = k as f64 * 0.9;
            centers.push((r + t * angle.sin(), c + t * angle.cos(), amp));
        }
    }
    let sigma2 = 2.0 * 0.7f64 * 0.7;
    let mut data = vec![0.0; sensor.len()];
    for (i, v) in data.iter_mut().enumerate() {
        let (pr, pc) = ((i / sensor.cols) as f64, (i % sensor.cols) as f64);
        *v = centers
            .iter()
            .map(|&(r, c, a)| a * (-((pr - r).powi(2) + (pc - c).powi(2)) / sigma2).exp())
            .sum();
    }
    RealGrid::from_vec(sensor, data)
}

/// A delta PSF at the sensor-grid center, optionally displaced.
pub fn delta_psf(sensor: Dims, shift: (isize, isize)) -> Result<RealGrid> {
    let r = sensor.rows as isize / 2 + shift.0;
    let c = sensor.cols as isize / 2 + shift.1;
    if r < 0 || c < 0 || r >= sensor.rows as isize || c >= sensor.cols as isize {
        return Err(Error::InvalidArgument(format!("delta offset {shift:?} leaves the sensor")));
    }
    RealGrid::from_fn(sensor, |i, j| if i as isize == r && j as isize == c { 1.0 } else { 0.0 })
}
