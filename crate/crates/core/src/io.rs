//! File formats: LTG1 grid files and containers, PNG images, checkpoints, CSV reports,
//! dataset directories and the JSON run configuration.
//!
//! An LTG1 record is `"LTG1"`, a dtype byte (0 = f32, 1 = f64), an ndim byte, `ndim`
//! little-endian u32 dims, then the row-major little-endian payload. A container is a
//! sequence of `(u32 name length, UTF-8 name, LTG1 record)` entries.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::admm::{AdmmParams, Shrinkage};
use crate::error::{Error, Result};
use crate::forward::{ColorImage, Measurement, NoiseModel, PLANES};
use crate::grid::{Dims, RealGrid};
use crate::training::{Dataset, DatasetPair, EpochRecord, LossSchedule, MetricsReport, SweepRow};
use crate::unrolled::{LayerTheta, LeAdmmTheta, LearnedTransform, TransformWeights, UnrolledModel, Variant, HIDDEN};

pub const MAGIC: &[u8; 4] = b"LTG1";
const MAX_NDIM: usize = 8;
const MAX_NAME: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// An n-dimensional array as stored in a grid file; values are always held as f64.
#[derive(Clone, Debug, PartialEq)]
pub struct GridArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl GridArray {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if expected != Some(data.len()) {
            return Err(Error::InvalidArgument(format!("dims {dims:?} do not hold {} values", data.len())));
        }
        Ok(GridArray { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        GridArray { dims: vec![data.len()], data }
    }

    pub fn from_grid(grid: &RealGrid) -> Self {
        let d = grid.dims();
        GridArray { dims: vec![d.rows, d.cols], data: grid.values().to_vec() }
    }

    /// Three planes stacked as a `3 × rows × cols` array.
    pub fn from_planes(planes: &[RealGrid; PLANES]) -> Self {
        let d = planes[0].dims();
        let data = planes.iter().flat_map(|p| p.values().iter().copied()).collect();
        GridArray { dims: vec![PLANES, d.rows, d.cols], data }
    }

    pub fn into_grid(self) -> Result<RealGrid> {
        match self.dims[..] {
            [rows, cols] => RealGrid::new(Dims::new(rows, cols)?, self.data),
            _ => Err(Error::InvalidDims(format!("expected a 2-D array, got dims {:?}", self.dims))),
        }
    }

    pub fn into_planes(self) -> Result<[RealGrid; PLANES]> {
        match self.dims[..] {
            [PLANES, rows, cols] => {
                let d = Dims::new(rows, cols)?;
                let mut chunks = self.data.chunks(d.len());
                let mut next = || RealGrid::new(d, chunks.next().expect("three planes").to_vec());
                Ok([next()?, next()?, next()?])
            }
            _ => Err(Error::InvalidDims(format!("expected a 3×R×C array, got dims {:?}", self.dims))),
        }
    }
}

/// Serialize one LTG1 record.
pub fn encode_array(array: &GridArray, dtype: Dtype) -> Result<Vec<u8>> {
    if array.dims.is_empty() || array.dims.len() > MAX_NDIM {
        return Err(Error::InvalidDims(format!("{} dimensions not storable", array.dims.len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * array.dims.len() + dtype.size() * array.data.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(array.dims.len() as u8);
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidDims(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => array.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => array.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated {what} at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn record(&mut self) -> Result<(GridArray, Dtype)> {
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::format(self.path, "bad magic, expected LTG1"));
        }
        let dtype = match self.take(1, "dtype")?[0] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(Error::format(self.path, format!("unknown dtype code {other}"))),
        };
        let ndim = self.take(1, "ndim")?[0] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::format(self.path, format!("unsupported ndim {ndim}")));
        }
        let dims = (0..ndim).map(|_| self.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|bytes| (n, bytes)));
        let (count, bytes) = count.ok_or_else(|| Error::format(self.path, format!("dims {dims:?} overflow")))?;
        if bytes > self.remaining() {
            return Err(Error::format(
                self.path,
                format!("truncated payload: dims {dims:?} need {bytes} bytes, {} remain", self.remaining()),
            ));
        }
        let payload = self.take(bytes, "payload")?;
        let mut data = Vec::with_capacity(count);
        match dtype {
            Dtype::F32 => data.extend(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)),
            Dtype::F64 => data.extend(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))),
        }
        Ok((GridArray { dims, data }, dtype))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decode a single-record file.
pub fn decode_array(bytes: &[u8], path: &Path) -> Result<(GridArray, Dtype)> {
    let mut cursor = Cursor { bytes, pos: 0, path };
    let out = cursor.record()?;
    if cursor.remaining() != 0 {
        return Err(Error::format(path, format!("{} trailing bytes", cursor.remaining())));
    }
    Ok(out)
}

pub fn write_array(path: impl AsRef<Path>, array: &GridArray, dtype: Dtype) -> Result<()> {
    write_bytes(path.as_ref(), &encode_array(array, dtype)?)
}

pub fn read_array(path: impl AsRef<Path>) -> Result<GridArray> {
    let path = path.as_ref();
    Ok(decode_array(&read_bytes(path)?, path)?.0)
}

pub fn write_grid(path: impl AsRef<Path>, grid: &RealGrid, dtype: Dtype) -> Result<()> {
    write_array(path, &GridArray::from_grid(grid), dtype)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<RealGrid> {
    read_array(path)?.into_grid()
}

pub fn write_container(path: impl AsRef<Path>, entries: &[(String, GridArray)], dtype: Dtype) -> Result<()> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (name, array) in entries {
        if name.is_empty() || name.len() > MAX_NAME {
            return Err(Error::InvalidArgument(format!("array name length {} outside 1..={MAX_NAME}", name.len())));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate array name {name:?}")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend(encode_array(array, dtype)?);
    }
    write_bytes(path.as_ref(), &out)
}

/// Named arrays in file order. A plain single-record file yields one entry named `""`.
pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<(String, GridArray)>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(MAGIC) {
        return Ok(vec![(String::new(), decode_array(&bytes, path)?.0)]);
    }
    let mut cursor = Cursor { bytes: &bytes, pos: 0, path };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    while cursor.remaining() > 0 {
        let len = cursor.u32("name length")? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(Error::format(path, format!("array name length {len} outside 1..={MAX_NAME}")));
        }
        let name = std::str::from_utf8(cursor.take(len, "name")?)
            .map_err(|_| Error::format(path, "array name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(path, format!("duplicate array name {name:?}")));
        }
        let (array, _) = cursor.record()?;
        entries.push((name, array));
    }
    Ok(entries)
}

fn take_named(entries: &mut Vec<(String, GridArray)>, name: &str, path: &Path) -> Result<GridArray> {
    let idx = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::format(path, format!("missing array {name:?}")))?;
    Ok(entries.remove(idx).1)
}

/// Bit depth for PNG output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Read an 8- or 16-bit PNG as three planes in `[0, 1]`. Grayscale is replicated; alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<ColorImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let dims = Dims::new(img.height() as usize, img.width() as usize)?;
    let (raw, max): (Vec<f64>, f64) = if sixteen {
        (img.to_rgb16().into_raw().into_iter().map(f64::from).collect(), 65535.0)
    } else {
        (img.to_rgb8().into_raw().into_iter().map(f64::from).collect(), 255.0)
    };
    let planes = std::array::from_fn(|c| RealGrid::from_vec(dims, raw.iter().skip(c).step_by(3).map(|v| v / max).collect()));
    ColorImage::new(planes)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max + 0.5).floor()
}

pub fn write_png(path: impl AsRef<Path>, image: &ColorImage, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let d = image.dims();
    let (w, h) = (d.cols as u32, d.rows as u32);
    let interleaved = |max: f64| -> Vec<f64> {
        (0..d.len()).flat_map(|i| (0..PLANES).map(move |c| quantize(image.planes[c].values()[i], max))).collect()
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let result = match depth {
        BitDepth::Eight => {
            let data: Vec<u8> = interleaved(255.0).into_iter().map(|v| v as u8).collect();
            let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, data).expect("size");
            buf.save(path)
        }
        BitDepth::Sixteen => {
            let data: Vec<u16> = interleaved(65535.0).into_iter().map(|v| v as u16).collect();
            let buf: ImageBuffer<Rgb<u16>, _> = ImageBuffer::from_raw(w, h, data).expect("size");
            buf.save(path)
        }
    };
    result.map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Single grayscale plane as PNG, for PSFs and diagnostics.
pub fn write_png_gray(path: impl AsRef<Path>, grid: &RealGrid) -> Result<()> {
    let path = path.as_ref();
    let d = grid.dims();
    let data = grid.values().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(d.cols as u32, d.rows as u32, data).expect("size");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// JSON written beside a checkpoint container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub layers: usize,
    pub sensor: Dims,
    pub padded: Dims,
    pub shrinkage: Shrinkage,
    pub residual: bool,
}

/// Sidecar path for a checkpoint: `model.ltg` → `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &UnrolledModel, sensor: Dims) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;
    let column = |f: fn(&LayerTheta) -> f64| GridArray::vector(model.theta.layers.iter().map(f).collect());
    let mut entries = vec![
        ("log_mu1".to_string(), column(|l| l.log_mu1)),
        ("log_mu2".to_string(), column(|l| l.log_mu2)),
        ("log_mu3".to_string(), column(|l| l.log_mu3)),
        ("log_tau".to_string(), column(|l| l.log_tau)),
    ];
    if let Some(t) = &model.transform {
        let w = &t.weights;
        entries.push(("transform.conv_in".into(), GridArray::new(vec![HIDDEN, 3, 3], w.conv_in.clone())?));
        entries.push(("transform.bias_in".into(), GridArray::vector(w.bias_in.clone())));
        entries.push(("transform.conv_out".into(), GridArray::new(vec![HIDDEN, 3, 3], w.conv_out.clone())?));
        entries.push(("transform.bias_out".into(), GridArray::vector(vec![w.bias_out])));
    }
    write_container(path, &entries, Dtype::F64)?;
    let meta = CheckpointMeta {
        variant: model.variant,
        layers: model.theta.depth(),
        sensor,
        padded: sensor.doubled(),
        shrinkage: model.shrinkage,
        residual: model.transform.as_ref().is_none_or(|t| t.residual),
    };
    write_json(sidecar_path(path), &meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UnrolledModel, CheckpointMeta)> {
    let path = path.as_ref();
    let meta: CheckpointMeta = read_json(sidecar_path(path))?;
    let mut entries = read_container(path)?;
    let mut column = |name: &str| -> Result<Vec<f64>> {
        let a = take_named(&mut entries, name, path)?;
        if a.dims != [meta.layers] {
            return Err(Error::format(path, format!("{name} has dims {:?}, expected [{}]", a.dims, meta.layers)));
        }
        Ok(a.data)
    };
    let (m1, m2, m3, t) = (column("log_mu1")?, column("log_mu2")?, column("log_mu3")?, column("log_tau")?);
    let theta = LeAdmmTheta {
        layers: (0..meta.layers).map(|k| LayerTheta::from_array([m1[k], m2[k], m3[k], t[k]])).collect(),
    };
    let transform = match meta.variant {
        Variant::LeAdmm => None,
        Variant::LeAdmmStar => {
            let mut part = |name: &str| take_named(&mut entries, name, path).map(|a| a.data);
            let mut flat = part("transform.conv_in")?;
            flat.extend(part("transform.bias_in")?);
            flat.extend(part("transform.conv_out")?);
            flat.extend(part("transform.bias_out")?);
            let weights = TransformWeights::from_slice(&flat).map_err(|e| Error::format(path, e.to_string()))?;
            Some(LearnedTransform { weights, residual: meta.residual })
        }
    };
    let model = UnrolledModel { variant: meta.variant, theta, transform, shrinkage: meta.shrinkage };
    model.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, meta))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.as_ref(), e.to_string()))?;
    write_bytes(path.as_ref(), format!("{text}\n").as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Serialize rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// `epoch,train_loss,test_mse,test_ssim`.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    write_csv(path.as_ref(), history)
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    read_csv(path.as_ref())
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    write_csv(path.as_ref(), &report.rows)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    Ok(MetricsReport { rows: read_csv(path.as_ref())? })
}

pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sensor: Dims,
    pub valid_region: Dims,
    pub seed: u64,
    pub noise: NoiseModel,
    /// PSF before normalization, relative to the dataset directory.
    pub psf: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Write `psf.ltg`, `pairs/<name>.ltg` (measurement, `3×R×C`), `pairs/<name>.png`
/// (16-bit ground truth) and `manifest.json`.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    dataset: &Dataset,
    raw_psf: &RealGrid,
    seed: u64,
    noise: &NoiseModel,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let first = dataset.train.first().or(dataset.test.first()).ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    write_grid(dir.join("psf.ltg"), raw_psf, Dtype::F64)?;
    let names = |pairs: &[DatasetPair], split: &str| -> Result<Vec<String>> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let name = format!("{split}_{i:04}");
                write_array(dir.join("pairs").join(format!("{name}.ltg")), &GridArray::from_planes(&p.measurement.planes), Dtype::F64)?;
                write_png(dir.join("pairs").join(format!("{name}.png")), &p.ground_truth, BitDepth::Sixteen)?;
                Ok(name)
            })
            .collect()
    };
    let manifest = DatasetManifest {
        sensor: first.sensor_dims(),
        valid_region: first.valid_region,
        seed,
        noise: *noise,
        psf: "psf.ltg".into(),
        train: names(&dataset.train, "train")?,
        test: names(&dataset.test, "test")?,
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read a dataset directory written by [`save_dataset`]; returns the dataset, raw PSF and manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, RealGrid, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = read_json(dir.join("manifest.json"))?;
    let psf = read_grid(dir.join(&manifest.psf))?;
    let load = |names: &[String]| -> Result<Vec<DatasetPair>> {
        names
            .iter()
            .map(|name| {
                let mpath = dir.join("pairs").join(format!("{name}.ltg"));
                let planes = read_array(&mpath)?.into_planes()?;
                let measurement = Measurement::new(planes)?;
                let gt = read_png(dir.join("pairs").join(format!("{name}.png")))?;
                if measurement.dims() != manifest.sensor || gt.dims() != manifest.sensor {
                    return Err(Error::format(&mpath, format!("pair {name} does not match sensor {}", manifest.sensor)));
                }
                DatasetPair::new(measurement, gt, manifest.valid_region)
            })
            .collect()
    };
    let dataset = Dataset { train: load(&manifest.train)?, test: load(&manifest.test)? };
    Ok((dataset, psf, manifest))
}

/// Options shared by every CLI subcommand. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// LTG1 grid with the raw PSF; a procedural caustic is generated when absent.
    pub psf: Option<PathBuf>,
    pub psf_seed: u64,
    pub sensor: Dims,
    pub solver: AdmmParams,
    pub variant: Variant,
    pub layers: usize,
    /// Trained checkpoint; the untrained network is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Directory of PNG source images for `simulate`; procedural images when absent.
    pub sources: Option<PathBuf>,
    pub count: usize,
    pub split: f64,
    pub noise: NoiseModel,
    pub epochs: usize,
    /// Learning rate; the variant's default when absent.
    pub lr: Option<f64>,
    pub schedule: LossSchedule,
    pub seed: u64,
    pub train_sizes: Vec<usize>,
    pub timing_runs: usize,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            psf: None,
            psf_seed: 0,
            sensor: Dims { rows: 96, cols: 96 },
            solver: AdmmParams::default(),
            variant: Variant::LeAdmm,
            layers: crate::unrolled::DEFAULT_LAYERS,
            checkpoint: None,
            dataset: None,
            sources: None,
            count: 150,
            split: 2.0 / 3.0,
            noise: NoiseModel::gaussian(0.02, 0),
            epochs: 50,
            lr: None,
            schedule: LossSchedule::default(),
            seed: 0,
            train_sizes: vec![25, 100],
            timing_runs: 5,
            output: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parse a config file, rejecting unknown keys, and resolve its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.psf, &mut self.checkpoint, &mut self.dataset, &mut self.sources].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output);
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate().map_err(|e| Error::Config(format!("solver: {e}")))?;
        self.schedule.validate().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        if self.layers == 0 {
            return Err(Error::Config("layers: must be at least 1".into()));
        }
        if self.count < 2 {
            return Err(Error::Config("count: must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.split) {
            return Err(Error::Config(format!("split: {} outside [0, 1]", self.split)));
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("lr: {lr} is not a nonnegative finite number")));
            }
        }
        if !(self.noise.sigma.is_finite() && self.noise.sigma >= 0.0) {
            return Err(Error::Config(format!("noise.sigma: {} is invalid", self.noise.sigma)));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| crate::training::TrainConfig::default_lr(self.variant))
    }
}
