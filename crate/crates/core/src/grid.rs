//! Dense 2D real and complex grids, the 2D DFT, and the center pad/crop pair.
//!
//! Grids are row-major and immutable once built. Every other module works on
//! top of these primitives; the solvers reach into the raw buffers through
//! crate-private accessors to avoid reallocating on every update.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative imaginary residue above which `idft2` refuses to drop the imaginary part.
pub const IMAG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDims(format!("{rows}x{cols} has an empty axis")));
        }
        Ok(Dims { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self> {
        Dims::new(n, n)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The working grid used for convolution: twice the sensor size on each axis.
    pub fn doubled(&self) -> Dims {
        Dims { rows: 2 * self.rows, cols: 2 * self.cols }
    }

    pub fn fits_within(&self, other: &Dims) -> bool {
        self.rows <= other.rows && self.cols <= other.cols
    }

    /// Parse `"ROWSxCOLS"`.
    pub fn parse(text: &str) -> Result<Self> {
        let (r, c) = text
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::InvalidDims(format!("expected ROWSxCOLS, got {text:?}")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidDims(format!("bad dimension {s:?} in {text:?}")))
        };
        Dims::new(parse(r)?, parse(c)?)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

pub(crate) fn ensure_dims(expected: Dims, got: Dims) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

/// A row-major grid of finite `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    dims: Dims,
    data: Vec<f64>,
}

impl RealGrid {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidDims(format!("{dims} has an empty axis")));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidDims(format!(
                "{dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid construction (index {i})")));
        }
        Ok(RealGrid { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        RealGrid { dims, data: vec![0.0; dims.len()] }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(value.is_finite());
        RealGrid { dims, data: vec![value; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                data.push(f(r, c));
            }
        }
        RealGrid::new(dims, data)
    }

    /// Construct from a buffer the caller has already validated.
    pub(crate) fn from_vec(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        RealGrid { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }


    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dims.cols + col]
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, factor: f64) -> RealGrid {
        RealGrid::from_vec(self.dims, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<RealGrid> {
        RealGrid::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &RealGrid, f: impl Fn(f64, f64) -> f64) -> Result<RealGrid> {
        ensure_dims(self.dims, other.dims)?;
        RealGrid::new(
            self.dims,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Cyclic shift: `out[(r + dr) mod R, (c + dc) mod C] = self[r, c]`.
    pub fn roll(&self, dr: isize, dc: isize) -> RealGrid {
        let Dims { rows, cols } = self.dims;
        let sr = dr.rem_euclid(rows as isize) as usize;
        let sc = dc.rem_euclid(cols as isize) as usize;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            let tr = (r + sr) % rows;
            for c in 0..cols {
                out[tr * cols + (c + sc) % cols] = self.data[r * cols + c];
            }
        }
        RealGrid::from_vec(self.dims, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    dims: Dims,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(dims: Dims, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != dims.len() || dims.is_empty() {
            return Err(Error::InvalidDims(format!(
                "{dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("complex grid construction".into()));
        }
        Ok(ComplexGrid { dims, data })
    }

    pub(crate) fn from_vec(dims: Dims, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        ComplexGrid { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dims.cols + col]
    }
}

/// Planned 2D FFT for one grid size. Forward is unnormalized; inverse carries `1/(rows*cols)`.
#[derive(Clone)]
pub struct Fft2 {
    dims: Dims,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("dims", &self.dims).finish()
    }
}

impl Fft2 {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            dims,
            row_fwd: planner.plan_fft_forward(dims.cols),
            row_inv: planner.plan_fft_inverse(dims.cols),
            col_fwd: planner.plan_fft_forward(dims.rows),
            col_inv: planner.plan_fft_inverse(dims.rows),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    pub fn forward_in_place(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform including the `1/N` factor.
    pub fn inverse_in_place(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.row_inv, &self.col_inv);
        let scale = 1.0 / self.dims.len() as f64;
        for z in buf.iter_mut() {
            *z *= scale;
        }
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.inverse_in_place(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }

    /// Spectra of two real grids from a single complex transform of `a + i·b`.
    pub fn forward_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&re, &im)| Complex64::new(re, im)).collect();
        self.forward_in_place(&mut z);
        let Dims { rows, cols } = self.dims;
        let mut fa = Vec::with_capacity(z.len());
        let mut fb = Vec::with_capacity(z.len());
        for r in 0..rows {
            let nr = (rows - r) % rows;
            for c in 0..cols {
                let nc = (cols - c) % cols;
                let zk = z[r * cols + c];
                let zm = z[nr * cols + nc].conj();
                fa.push((zk + zm) * 0.5);
                // (zk - zm) / 2i
                let d = (zk - zm) * 0.5;
                fb.push(Complex64::new(d.im, -d.re));
            }
        }
        (fa, fb)
    }

    /// Inverse transforms of two conjugate-symmetric spectra from one complex transform.
    pub fn inverse_pair(&self, fa: &[Complex64], fb: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let mut z: Vec<Complex64> =
            fa.iter().zip(fb).map(|(a, b)| a + Complex64::new(-b.im, b.re)).collect();
        self.inverse_in_place(&mut z);
        z.into_iter().map(|v| (v.re, v.im)).unzip()
    }

    fn transform(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let Dims { rows, cols } = self.dims;
        assert_eq!(buf.len(), rows * cols, "buffer does not match planned dims");
        let scratch_len = row.get_inplace_scratch_len().max(col.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
        row.process_with_scratch(buf, &mut scratch);
        let mut transposed = vec![Complex64::new(0.0, 0.0); buf.len()];
        transpose(buf, &mut transposed, rows, cols);
        col.process_with_scratch(&mut transposed, &mut scratch);
        transpose(&transposed, buf, cols, rows);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const BLOCK: usize = 16;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Unnormalized forward 2D DFT.
pub fn dft2(grid: &RealGrid) -> ComplexGrid {
    let fft = Fft2::new(grid.dims);
    ComplexGrid::from_vec(grid.dims, fft.forward_real(&grid.data))
}

/// Inverse 2D DFT with the `1/(rows*cols)` factor.
///
/// The real part is returned. If the discarded imaginary part exceeds
/// [`IMAG_TOLERANCE`] relative to the largest output magnitude, the spectrum
/// was not conjugate-symmetric and an error is returned instead.
pub fn idft2(spectrum: &ComplexGrid) -> Result<RealGrid> {
    let fft = Fft2::new(spectrum.dims);
    let mut buf = spectrum.data.clone();
    fft.inverse_in_place(&mut buf);
    let max_abs = buf.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let max_imag = buf.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if max_abs > 0.0 && max_imag / max_abs > IMAG_TOLERANCE {
        return Err(Error::NonRealSpectrum { relative: max_imag / max_abs });
    }
    RealGrid::new(spectrum.dims, buf.into_iter().map(|z| z.re).collect())
}

/// Offset of a `source`-sized block centered in `target`: `floor((T - S) / 2)` per axis.
pub fn center_offset(source: Dims, target: Dims) -> (usize, usize) {
    ((target.rows - source.rows) / 2, (target.cols - source.cols) / 2)
}

/// Zero-pad `grid` into a larger grid with the source block centered (the adjoint of crop).
pub fn pad_center(grid: &RealGrid, target: Dims) -> Result<RealGrid> {
    let source = grid.dims;
    if !source.fits_within(&target) {
        return Err(Error::InvalidDims(format!("cannot pad {source} into smaller {target}")));
    }
    let (r0, c0) = center_offset(source, target);
    let mut out = vec![0.0; target.len()];
    for r in 0..source.rows {
        let dst = (r + r0) * target.cols + c0;
        out[dst..dst + source.cols]
            .copy_from_slice(&grid.data[r * source.cols..(r + 1) * source.cols]);
    }
    Ok(RealGrid::from_vec(target, out))
}

/// Extract the centered `target`-sized block (the sensor crop).
pub fn crop_center(grid: &RealGrid, target: Dims) -> Result<RealGrid> {
    let source = grid.dims;
    if !target.fits_within(&source) || target.is_empty() {
        return Err(Error::InvalidDims(format!("cannot crop {source} to larger {target}")));
    }
    let (r0, c0) = center_offset(target, source);
    let mut out = Vec::with_capacity(target.len());
    for r in 0..target.rows {
        let src = (r + r0) * source.cols + c0;
        out.extend_from_slice(&grid.data[src..src + target.cols]);
    }
    Ok(RealGrid::from_vec(target, out))
}

pub fn inner_product(a: &RealGrid, b: &RealGrid) -> Result<f64> {
    ensure_dims(a.dims, b.dims)?;
    Ok(dot(&a.data, &b.data))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
