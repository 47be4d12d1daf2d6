//! Straight-line reference implementations used as test oracles.
//!
//! Convolutions are explicit loops, the Fourier solve uses the standalone
//! `dft2`/`idft2` transforms, and the difference-operator spectrum comes from
//! transforming the stencil instead of a closed form.

#![allow(dead_code)]

use lensless_core::forward::{ColorImage, Measurement, Scene};
use lensless_core::grid::{dft2, idft2, Dims, RealGrid};
use lensless_core::unrolled::LearnedTransform;
use lensless_core::Psf;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(d: Dims, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> RealGrid {
    RealGrid::from_fn(d, |_, _| rng.random_range(lo..hi)).unwrap()
}

pub fn random_image(d: Dims, rng: &mut ChaCha8Rng) -> ColorImage {
    ColorImage::new(std::array::from_fn(|_| random_grid(d, rng, 0.0, 1.0))).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense plane on the padded grid.
#[derive(Clone, Debug)]
pub struct Plane {
    pub d: Dims,
    pub v: Vec<f64>,
}

impl Plane {
    pub fn zeros(d: Dims) -> Self {
        Plane { d, v: vec![0.0; d.len()] }
    }

    fn at(&self, r: isize, c: isize) -> f64 {
        let (rows, cols) = (self.d.rows as isize, self.d.cols as isize);
        self.v[(r.rem_euclid(rows) * cols + c.rem_euclid(cols)) as usize]
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { d: self.d, v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect() }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { d: self.d, v: self.v.iter().map(|a| f(*a)).collect() }
    }

    pub fn grid(&self) -> RealGrid {
        RealGrid::new(self.d, self.v.clone()).unwrap()
    }
}

/// The convolution kernel: the PSF placed so its sensor-center pixel sits at the origin.
pub fn kernel(psf: &Psf) -> Plane {
    let s = psf.sensor_dims();
    let p = s.doubled();
    let mut k = Plane::zeros(p);
    for i in 0..s.rows {
        for j in 0..s.cols {
            let r = (i as isize - (s.rows / 2) as isize).rem_euclid(p.rows as isize) as usize;
            let c = (j as isize - (s.cols / 2) as isize).rem_euclid(p.cols as isize) as usize;
            k.v[r * p.cols + c] = psf.grid().get(i, j);
        }
    }
    k
}

/// `(k ∗ x)[r,c] = Σ k[a,b] x[r−a, c−b]`, wrapping.
pub fn conv(k: &Plane, x: &Plane) -> Plane {
    let mut out = Plane::zeros(x.d);
    for r in 0..x.d.rows {
        for c in 0..x.d.cols {
            let mut acc = 0.0;
            for a in 0..k.d.rows {
                for b in 0..k.d.cols {
                    acc += k.v[a * k.d.cols + b] * x.at(r as isize - a as isize, c as isize - b as isize);
                }
            }
            out.v[r * x.d.cols + c] = acc;
        }
    }
    out
}

/// Transpose of [`conv`]: `Σ k[a,b] y[r+a, c+b]`.
pub fn conv_t(k: &Plane, y: &Plane) -> Plane {
    let mut out = Plane::zeros(y.d);
    for r in 0..y.d.rows {
        for c in 0..y.d.cols {
            let mut acc = 0.0;
            for a in 0..k.d.rows {
                for b in 0..k.d.cols {
                    acc += k.v[a * k.d.cols + b] * y.at(r as isize + a as isize, c as isize + b as isize);
                }
            }
            out.v[r * y.d.cols + c] = acc;
        }
    }
    out
}

pub fn offset(s: Dims, p: Dims) -> (usize, usize) {
    ((p.rows - s.rows) / 2, (p.cols - s.cols) / 2)
}

pub fn pad(y: &RealGrid, p: Dims) -> Plane {
    let s = y.dims();
    let (r0, c0) = offset(s, p);
    let mut out = Plane::zeros(p);
    for i in 0..s.rows {
        for j in 0..s.cols {
            out.v[(r0 + i) * p.cols + c0 + j] = y.get(i, j);
        }
    }
    out
}

pub fn crop(x: &Plane, s: Dims) -> RealGrid {
    let (r0, c0) = offset(s, x.d);
    RealGrid::from_fn(s, |i, j| x.v[(r0 + i) * x.d.cols + c0 + j]).unwrap()
}

/// Mask equal to 1 inside the sensor window.
pub fn ctc(s: Dims, p: Dims) -> Plane {
    pad(&RealGrid::filled(s, 1.0), p)
}

pub fn grad_x(x: &Plane) -> Plane {
    let mut g = Plane::zeros(x.d);
    for r in 0..x.d.rows {
        for c in 0..x.d.cols {
            g.v[r * x.d.cols + c] = x.at(r as isize, c as isize + 1) - x.at(r as isize, c as isize);
        }
    }
    g
}

pub fn grad_y(x: &Plane) -> Plane {
    let mut g = Plane::zeros(x.d);
    for r in 0..x.d.rows {
        for c in 0..x.d.cols {
            g.v[r * x.d.cols + c] = x.at(r as isize + 1, c as isize) - x.at(r as isize, c as isize);
        }
    }
    g
}

/// `Ψᵀ(gx, gy)` written as the transpose of the two stencils.
pub fn grad_t(gx: &Plane, gy: &Plane) -> Plane {
    let mut out = Plane::zeros(gx.d);
    for r in 0..gx.d.rows as isize {
        for c in 0..gx.d.cols as isize {
            let i = (r as usize) * gx.d.cols + c as usize;
            out.v[i] = gx.at(r, c - 1) - gx.at(r, c) + gy.at(r - 1, c) - gy.at(r, c);
        }
    }
    out
}

fn spectrum(p: &Plane) -> Vec<Complex64> {
    dft2(&p.grid()).values().to_vec()
}

/// `(μ₁KᵀK + μ₂ΨᵀΨ + μ₃)⁻¹ r` (or `μ₂I` in place of `μ₂ΨᵀΨ` when `tv` is false), via the DFT.
pub fn fourier_solve(k: &Plane, r: &Plane, mu: [f64; 3], tv: bool) -> Plane {
    let d = r.d;
    let kh = spectrum(k);
    let mut dx = Plane::zeros(d);
    dx.v[0] = -1.0;
    dx.v[d.cols - 1] += 1.0;
    let mut dy = Plane::zeros(d);
    dy.v[0] = -1.0;
    dy.v[(d.rows - 1) * d.cols] += 1.0;
    let (dxh, dyh) = (spectrum(&dx), spectrum(&dy));
    let rh = spectrum(r);
    let xh: Vec<Complex64> = (0..d.len())
        .map(|i| {
            let reg = if tv { dxh[i].norm_sqr() + dyh[i].norm_sqr() } else { 1.0 };
            rh[i] / (mu[0] * kh[i].norm_sqr() + mu[1] * reg + mu[2])
        })
        .collect();
    let grid = idft2(&lensless_core::grid::ComplexGrid::new(d, xh).unwrap()).unwrap();
    Plane { d, v: grid.into_values() }
}

/// Every variable of the TV splitting for one plane.
#[derive(Clone, Debug)]
pub struct OracleState {
    pub x: Plane,
    pub ux: Plane,
    pub uy: Plane,
    pub v: Plane,
    pub w: Plane,
    pub a1: Plane,
    pub a2x: Plane,
    pub a2y: Plane,
    pub a3: Plane,
}

impl OracleState {
    pub fn zeros(d: Dims) -> Self {
        let z = Plane::zeros(d);
        OracleState {
            x: z.clone(),
            ux: z.clone(),
            uy: z.clone(),
            v: z.clone(),
            w: z.clone(),
            a1: z.clone(),
            a2x: z.clone(),
            a2y: z.clone(),
            a3: z,
        }
    }
}

/// One TV-ADMM iteration, isotropic shrinkage.
pub fn tv_step(k: &Plane, b: &RealGrid, s: &OracleState, mu: [f64; 3], tau: f64) -> OracleState {
    let d = s.x.d;
    let [mu1, mu2, mu3] = mu;
    let kappa = tau / mu2;

    let zx = grad_x(&s.x).zip(&s.a2x, |g, a| g + a / mu2);
    let zy = grad_y(&s.x).zip(&s.a2y, |g, a| g + a / mu2);
    let mut ux = Plane::zeros(d);
    let mut uy = Plane::zeros(d);
    for i in 0..d.len() {
        let m = (zx.v[i].powi(2) + zy.v[i].powi(2)).sqrt();
        let f = if m > kappa { (m - kappa) / m } else { 0.0 };
        ux.v[i] = zx.v[i] * f;
        uy.v[i] = zy.v[i] * f;
    }

    let kx = conv(k, &s.x);
    let mask = ctc(b.dims(), d);
    let cb = pad(b, d);
    let v = Plane {
        d,
        v: (0..d.len()).map(|i| (s.a1.v[i] + mu1 * kx.v[i] + cb.v[i]) / (mask.v[i] + mu1)).collect(),
    };
    let w = s.x.zip(&s.a3, |x, a| (a / mu3 + x).max(0.0));

    let r_w = w.zip(&s.a3, |w, a| mu3 * w - a);
    let r_u = grad_t(&ux.zip(&s.a2x, |u, a| mu2 * u - a), &uy.zip(&s.a2y, |u, a| mu2 * u - a));
    let r_v = conv_t(k, &v.zip(&s.a1, |v, a| mu1 * v - a));
    let r = Plane { d, v: (0..d.len()).map(|i| r_w.v[i] + r_u.v[i] + r_v.v[i]).collect() };
    let x = fourier_solve(k, &r, mu, true);

    let kx_new = conv(k, &x);
    let a1 = Plane { d, v: (0..d.len()).map(|i| s.a1.v[i] + mu1 * (kx_new.v[i] - v.v[i])).collect() };
    let gx = grad_x(&x);
    let gy = grad_y(&x);
    let a2x = Plane { d, v: (0..d.len()).map(|i| s.a2x.v[i] + mu2 * (gx.v[i] - ux.v[i])).collect() };
    let a2y = Plane { d, v: (0..d.len()).map(|i| s.a2y.v[i] + mu2 * (gy.v[i] - uy.v[i])).collect() };
    let a3 = Plane { d, v: (0..d.len()).map(|i| s.a3.v[i] + mu3 * (x.v[i] - w.v[i])).collect() };
    OracleState { x, ux, uy, v, w, a1, a2x, a2y, a3 }
}

/// `N(x)` with explicit loops: 3×3 circular cross-correlations, softplus, residual skip.
pub fn transform(t: &LearnedTransform, x: &Plane) -> Plane {
    let w = &t.weights;
    let d = x.d;
    let corr = |k: &[f64], src: &Plane| {
        let mut out = Plane::zeros(d);
        for r in 0..d.rows as isize {
            for c in 0..d.cols as isize {
                let mut acc = 0.0;
                for (tap, &kt) in k.iter().enumerate() {
                    acc += kt * src.at(r + tap as isize / 3 - 1, c + tap as isize % 3 - 1);
                }
                out.v[(r as usize) * d.cols + c as usize] = acc;
            }
        }
        out
    };
    let mut out = if t.residual { x.clone() } else { Plane::zeros(d) };
    for o in out.v.iter_mut() {
        *o += w.bias_out;
    }
    for ch in 0..8 {
        let h = corr(&w.conv_in[ch * 9..ch * 9 + 9], x).map(|v| v + w.bias_in[ch]);
        let a = h.map(|v| (1.0 + v.exp()).ln());
        let y = corr(&w.conv_out[ch * 9..ch * 9 + 9], &a);
        out = out.zip(&y, |p, q| p + q);
    }
    out
}

/// Star-variant state: no `α₂`.
#[derive(Clone, Debug)]
pub struct StarOracleState {
    pub x: Plane,
    pub u: Plane,
    pub v: Plane,
    pub w: Plane,
    pub a1: Plane,
    pub a3: Plane,
}

impl StarOracleState {
    pub fn zeros(d: Dims) -> Self {
        let z = Plane::zeros(d);
        StarOracleState { x: z.clone(), u: z.clone(), v: z.clone(), w: z.clone(), a1: z.clone(), a3: z }
    }
}

pub fn star_step(k: &Plane, b: &RealGrid, t: &LearnedTransform, s: &StarOracleState, mu: [f64; 3]) -> StarOracleState {
    let d = s.x.d;
    let [mu1, mu2, mu3] = mu;
    let u = transform(t, &s.x);
    let kx = conv(k, &s.x);
    let mask = ctc(b.dims(), d);
    let cb = pad(b, d);
    let v = Plane {
        d,
        v: (0..d.len()).map(|i| (s.a1.v[i] + mu1 * kx.v[i] + cb.v[i]) / (mask.v[i] + mu1)).collect(),
    };
    let w = s.x.zip(&s.a3, |x, a| (a / mu3 + x).max(0.0));
    let r_v = conv_t(k, &v.zip(&s.a1, |v, a| mu1 * v - a));
    let r = Plane { d, v: (0..d.len()).map(|i| mu3 * w.v[i] - s.a3.v[i] + mu2 * u.v[i] + r_v.v[i]).collect() };
    let x = fourier_solve(k, &r, mu, false);
    let kx_new = conv(k, &x);
    let a1 = Plane { d, v: (0..d.len()).map(|i| s.a1.v[i] + mu1 * (kx_new.v[i] - v.v[i])).collect() };
    let a3 = Plane { d, v: (0..d.len()).map(|i| s.a3.v[i] + mu3 * (x.v[i] - w.v[i])).collect() };
    StarOracleState { x, u, v, w, a1, a3 }
}

/// Noiseless `C K x` per plane.
pub fn measure(k: &Plane, scene: &Scene, sensor: Dims) -> Measurement {
    Measurement::new(std::array::from_fn(|c| {
        let x = Plane { d: scene.dims(), v: scene.planes[c].values().to_vec() };
        crop(&conv(k, &x), sensor)
    }))
    .unwrap()
}
