use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lensless_core::forward::caustic_psf;
use lensless_core::io::{
    load_checkpoint, load_dataset, read_array, read_grid, read_json, read_png, save_checkpoint, save_dataset,
    write_array, write_csv, write_history, write_json, write_png, write_report, write_sweep, BitDepth, DatasetManifest, Dtype,
    GridArray, RunConfig,
};
use lensless_core::training::{
    default_valid_region, median_wall_time_ms, procedural_sources, sweep_train_size, DatasetSpec, Method as EvalMethod,
};
use lensless_core::unrolled::{
    gradient_check, model_forward, per_layer_metrics, reconstruct as run_unrolled, GradCheckReport, LearnedTransform,
    GRADCHECK_TOLERANCE,
};
use lensless_core::{
    admm_solve, evaluate_testset, forward_measure, generate_synthetic_dataset, normalize_psf, AdmmParams, ColorImage,
    Dataset, DatasetPair, Dims, LeAdmmTheta, Measurement, NoiseModel, PrecomputedOperators, Psf, RealGrid, Scene,
    TrainConfig, UnrolledModel, Variant,
};
use serde::Serialize;

use crate::{ConfigError, Method, VerificationFailed};

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    write_json(dir.join("config.json"), cfg)?;
    Ok(dir)
}

/// Raw PSF: the configured file, else the dataset's PSF, else a procedural caustic.
fn raw_psf(cfg: &RunConfig) -> Result<RealGrid> {
    if let Some(path) = &cfg.psf {
        let grid = read_grid(path)?;
        if grid.dims() != cfg.sensor {
            bail!(ConfigError(format!("psf: {} has dims {}, but sensor is {}", path.display(), grid.dims(), cfg.sensor)));
        }
        return Ok(grid);
    }
    if let Some(dir) = &cfg.dataset {
        let manifest: DatasetManifest = read_json(dir.join("manifest.json"))?;
        return Ok(read_grid(dir.join(manifest.psf))?);
    }
    Ok(caustic_psf(cfg.sensor, cfg.psf_seed))
}

fn psf(cfg: &RunConfig) -> Result<Psf> {
    Ok(normalize_psf(&raw_psf(cfg)?)?)
}

fn dataset(cfg: &RunConfig) -> Result<(Dataset, Psf)> {
    let dir = cfg.dataset.as_ref().ok_or_else(|| config_err("dataset: required by this command"))?;
    let (data, raw, _) = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let psf = match &cfg.psf {
        Some(_) => psf(cfg)?,
        None => normalize_psf(&raw)?,
    };
    Ok((data, psf))
}

/// The untrained network built from the configured solver penalties.
fn untrained(cfg: &RunConfig, variant: Variant) -> UnrolledModel {
    let theta = LeAdmmTheta::constant(&cfg.solver, cfg.layers);
    let mut model = match variant {
        Variant::LeAdmm => UnrolledModel::leadmm(theta),
        Variant::LeAdmmStar => UnrolledModel::leadmm_star(theta, LearnedTransform::initial()),
    };
    model.shrinkage = cfg.solver.shrinkage;
    model
}

/// The configured checkpoint, or the untrained network.
fn model(cfg: &RunConfig, variant: Variant) -> Result<UnrolledModel> {
    let Some(path) = &cfg.checkpoint else {
        return Ok(untrained(cfg, variant));
    };
    let (model, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.variant != variant {
        bail!(ConfigError(format!(
            "checkpoint: {} holds a {} network, expected {}",
            path.display(),
            model.variant.tag(),
            variant.tag()
        )));
    }
    Ok(model)
}

fn bounded(cfg: &RunConfig, iters: usize) -> AdmmParams {
    AdmmParams { iters, tol: 0.0, ..cfg.solver }
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let raw = raw_psf(cfg)?;
    let psf = normalize_psf(&raw)?;
    let (sources, repeat) = match &cfg.sources {
        Some(dir) => (read_sources(dir)?, true),
        None => {
            let dims = Dims::new(cfg.sensor.rows * 4 / 3, cfg.sensor.cols * 4 / 3)?;
            (procedural_sources(cfg.count, dims, cfg.seed), false)
        }
    };
    let spec =
        DatasetSpec { sensor: cfg.sensor, count: cfg.count, split_fraction: cfg.split, seed: cfg.seed, noise: cfg.noise, repeat };
    let data = generate_synthetic_dataset(&sources, &psf, &spec)?;
    let dir = prepare_output(cfg)?;
    save_dataset(dir, &data, &raw, cfg.seed, &cfg.noise)?;
    println!("wrote {} train and {} test pairs to {}", data.train.len(), data.test.len(), dir.display());
    Ok(())
}

fn read_sources(dir: &Path) -> Result<Vec<ColorImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("sources: cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(ConfigError(format!("sources: no PNG files in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(read_png(p)?)).collect()
}

pub fn reconstruct(cfg: &RunConfig, method: Method, input: &Path) -> Result<()> {
    let planes = read_array(input)?.into_planes().with_context(|| format!("input: {}", input.display()))?;
    let b = Measurement::new(planes)?;
    let psf = psf(cfg)?;
    if b.dims() != psf.sensor_dims() {
        bail!(ConfigError(format!("input: {} has dims {}, but the PSF is {}", input.display(), b.dims(), psf.sensor_dims())));
    }
    let ops = PrecomputedOperators::new(&psf)?;
    let (scene, tag) = match method {
        Method::Admm => (admm_solve(&psf, &b, &cfg.solver, None)?.0, "admm"),
        Method::Admm5 => (admm_solve(&psf, &b, &bounded(cfg, 5), None)?.0, "admm5"),
        Method::Leadmm => (run_unrolled(&model(cfg, Variant::LeAdmm)?, &ops, &b)?, "leadmm"),
        Method::LeadmmStar => (run_unrolled(&model(cfg, Variant::LeAdmmStar)?, &ops, &b)?, "leadmm-star"),
    };
    let dir = prepare_output(cfg)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    let base = dir.join(format!("{stem}_{tag}"));
    write_array(base.with_extension("ltg"), &GridArray::from_planes(&scene.planes), Dtype::F64)?;
    write_png(base.with_extension("png"), &scene.crop_to(b.dims())?, BitDepth::Sixteen)?;
    println!("wrote {}.{{ltg,png}}", base.display());
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig { epochs: cfg.epochs, lr: cfg.learning_rate(), schedule: cfg.schedule, seed: cfg.seed }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (data, psf) = dataset(cfg)?;
    let initial = model(cfg, cfg.variant)?;
    let outcome = lensless_core::train(&initial, &data, &psf, &train_config(cfg))?;
    let dir = prepare_output(cfg)?;
    save_checkpoint(dir.join("checkpoint.ltg"), &outcome.checkpoint, psf.sensor_dims())?;
    save_checkpoint(dir.join("last.ltg"), &outcome.last, psf.sensor_dims())?;
    write_history(dir.join("history.csv"), &outcome.history)?;
    for row in &outcome.history {
        println!("epoch {:>3}  train loss {:>10.6}  test mse {:.6}  test ssim {:.4}", row.epoch, row.train_loss, row.test_mse, row.test_ssim);
    }
    println!("best epoch {}; checkpoint written to {}", outcome.best_epoch, dir.join("checkpoint.ltg").display());
    Ok(())
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    mse: f64,
    data_fidelity: f64,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (data, psf) = dataset(cfg)?;
    if data.test.is_empty() {
        bail!(ConfigError("dataset: the test split is empty".into()));
    }
    let net = model(cfg, cfg.variant)?;
    let n_train = if cfg.checkpoint.is_some() { data.train.len() } else { 0 };
    let methods = vec![
        EvalMethod::Admm { label: "admm5".into(), params: bounded(cfg, 5) },
        EvalMethod::Admm { label: "admm100".into(), params: bounded(cfg, 100) },
        EvalMethod::Admm { label: "admm".into(), params: cfg.solver },
        EvalMethod::Unrolled { label: net.variant.tag().into(), model: net.clone(), n_train },
        EvalMethod::GroundTruth,
    ];
    let report = evaluate_testset(&methods, &data.test, &psf, cfg.timing_runs)?;

    let ops = PrecomputedOperators::new(&psf)?;
    let depth = net.theta.depth();
    let mut layers: Vec<LayerRow> = (1..=depth).map(|layer| LayerRow { layer, mse: 0.0, data_fidelity: 0.0 }).collect();
    let n = data.test.len() as f64;
    for pair in &data.test {
        let pass = model_forward(&net, &ops, &pair.measurement)?;
        for row in per_layer_metrics(&pass.snapshots, &pair.ground_truth, &ops, &pair.measurement, pair.valid_region)? {
            layers[row.layer - 1].mse += row.mse / n;
            layers[row.layer - 1].data_fidelity += row.data_fidelity / n;
        }
    }

    let dir = prepare_output(cfg)?;
    write_report(dir.join("metrics.csv"), &report)?;
    write_csv(&dir.join("per_layer.csv"), &layers)?;
    print!("{report}");
    for row in &layers {
        println!("layer {}  mse {:.6}  data fidelity {:.4}", row.layer, row.mse, row.data_fidelity);
    }
    Ok(())
}

/// The built-in gradient-check instance: a 16×16 caustic PSF and a procedural scene.
fn fixture() -> Result<(Psf, Measurement, ColorImage)> {
    let sensor = Dims::square(16)?;
    let psf = normalize_psf(&caustic_psf(sensor, 3))?;
    let gt = procedural_sources(1, sensor, 3).remove(0);
    let b = forward_measure(&psf, &Scene::embed(&gt)?, &NoiseModel::gaussian(0.02, 3))?;
    Ok((psf, b, gt))
}

#[derive(Serialize)]
struct GradCheckSummary {
    model: String,
    passed: bool,
    report: GradCheckReport,
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let (psf, b, gt) = fixture()?;
    let mut star = UnrolledModel::initial(Variant::LeAdmmStar, 5);
    star.transform = Some(LearnedTransform::random(4, 0.1));
    let models = [("leadmm", UnrolledModel::initial(Variant::LeAdmm, 5)), ("leadmm-star", star)];
    let mut summaries = Vec::new();
    for (name, model) in models {
        let report = gradient_check(&model, &psf, &b, &gt, 1e-5)?;
        let worst = report.entries.iter().filter(|e| e.checked).map(|e| e.rel_error).fold(0.0, f64::max);
        println!(
            "{name}: {} of {} parameters checked, worst relative error {worst:.2e} (tolerance {GRADCHECK_TOLERANCE:.0e}): {}",
            report.checked(),
            report.entries.len(),
            if report.passed() { "PASS" } else { "FAIL" }
        );
        for e in report.entries.iter().filter(|e| !e.pass) {
            println!("  {}: analytic {:.6e}, numeric {:.6e}", e.name, e.analytic, e.numeric);
        }
        summaries.push(GradCheckSummary { model: name.into(), passed: report.passed(), report });
    }
    let dir = prepare_output(cfg)?;
    write_json(dir.join("gradcheck.json"), &summaries)?;
    if summaries.iter().any(|s| !s.passed) {
        return Err(VerificationFailed("analytic and numeric gradients disagree".into()).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkReport {
    sensor: Dims,
    layers: usize,
    admm_iters: usize,
    runs: usize,
    unrolled_ms: f64,
    admm_ms: f64,
    speedup: f64,
}

pub fn benchmark(cfg: &RunConfig) -> Result<()> {
    let psf = psf(cfg)?;
    let pair = match &cfg.dataset {
        Some(_) => dataset(cfg)?.0.test.into_iter().next().ok_or_else(|| config_err("dataset: the test split is empty"))?,
        None => {
            let gt = procedural_sources(1, psf.sensor_dims(), cfg.seed).remove(0);
            let b = forward_measure(&psf, &Scene::embed(&gt)?, &cfg.noise)?;
            DatasetPair::new(b, gt, default_valid_region(psf.sensor_dims()))?
        }
    };
    let ops = PrecomputedOperators::new(&psf)?;
    let net = model(cfg, cfg.variant)?;
    let runs = cfg.timing_runs.max(5);
    let admm = bounded(cfg, cfg.solver.iters);
    let unrolled = EvalMethod::Unrolled { label: "unrolled".into(), model: net.clone(), n_train: 0 };
    median_wall_time_ms(&unrolled, &ops, &pair, 1)?;
    let unrolled_ms = median_wall_time_ms(&unrolled, &ops, &pair, runs)?;
    let admm_ms = median_wall_time_ms(&EvalMethod::Admm { label: "admm".into(), params: admm }, &ops, &pair, runs)?;
    let report = BenchmarkReport {
        sensor: psf.sensor_dims(),
        layers: net.theta.depth(),
        admm_iters: admm.iters,
        runs,
        unrolled_ms,
        admm_ms,
        speedup: admm_ms / unrolled_ms,
    };
    let dir = prepare_output(cfg)?;
    write_json(dir.join("benchmark.json"), &report)?;
    println!(
        "{}-layer {}: {unrolled_ms:.2} ms; {}-iteration ADMM: {admm_ms:.2} ms; speedup {:.1}x (median of {runs})",
        report.layers,
        net.variant.tag(),
        report.admm_iters,
        report.speedup
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, sizes: Option<Vec<usize>>) -> Result<()> {
    let (data, psf) = dataset(cfg)?;
    let sizes = sizes.unwrap_or_else(|| cfg.train_sizes.clone());
    if let Some(bad) = sizes.iter().find(|&&s| s == 0 || s > data.train.len()) {
        bail!(ConfigError(format!("train_sizes: {bad} is outside 1..={}", data.train.len())));
    }
    let rows = sweep_train_size(&sizes, &model(cfg, cfg.variant)?, &data, &psf, &train_config(cfg))?;
    let dir = prepare_output(cfg)?;
    write_sweep(dir.join("sweep.csv"), &rows)?;
    for row in &rows {
        println!("{:>5} pairs  test mse {:.6}  test ssim {:.4}  best epoch {}", row.train_size, row.test_mse, row.test_ssim, row.best_epoch);
    }
    Ok(())
}
