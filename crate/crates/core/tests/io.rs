//! File formats: LTG1 grids and containers, PNG, checkpoints, datasets and configs.

mod support;

use std::fs;

use lensless_core::forward::caustic_psf;
use lensless_core::io::{
    load_checkpoint, load_dataset, read_array, read_container, read_grid, read_history, read_png, read_report,
    save_checkpoint, save_dataset, sidecar_path, write_array, write_container, write_grid, write_history, write_png,
    write_report, BitDepth, Dtype, GridArray, RunConfig,
};
use lensless_core::training::{procedural_sources, DatasetSpec, EpochRecord, MethodRow};
use lensless_core::unrolled::LearnedTransform;
use lensless_core::{
    generate_synthetic_dataset, normalize_psf, ColorImage, Dims, Error, LeAdmmTheta, MetricsReport, NoiseModel,
    RealGrid, UnrolledModel, Variant,
};
use support::*;

#[test]
fn f64_grid_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let g = random_grid(Dims::new(3, 5).unwrap(), &mut rng(1), -1e3, 1e3);
    write_grid(dir.path().join("g.ltg"), &g, Dtype::F64).unwrap();
    let back = read_grid(dir.path().join("g.ltg")).unwrap();
    assert!(g.values().iter().zip(back.values()).all(|(a, b)| a.to_bits() == b.to_bits()));

    write_grid(dir.path().join("h.ltg"), &g, Dtype::F32).unwrap();
    let single = read_grid(dir.path().join("h.ltg")).unwrap();
    assert!(g.values().iter().zip(single.values()).all(|(a, b)| (*a as f32) as f64 == *b));
}

#[test]
fn f32_header_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.ltg");
    write_grid(&path, &RealGrid::filled(Dims::square(2).unwrap(), 0.25), Dtype::F32).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes[..14], [0x4C, 0x54, 0x47, 0x31, 0x00, 0x02, 2, 0, 0, 0, 2, 0, 0, 0]);
    assert_eq!(bytes.len(), 14 + 16);
    assert_eq!(bytes[14..18], 0.25f32.to_le_bytes());
}

#[test]
fn bad_magic_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ltg");
    fs::write(&path, b"XXXX\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let err = read_grid(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("bad.ltg"));
}

#[test]
fn container_round_trip_and_duplicate_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ltg");
    let entries = vec![
        ("alpha".to_string(), GridArray::vector(vec![1.0, 2.0, 3.0])),
        ("beta.gamma".to_string(), GridArray::new(vec![2, 1, 2], vec![0.5, -0.5, 1.5, 2.5]).unwrap()),
    ];
    write_container(&path, &entries, Dtype::F64).unwrap();
    assert_eq!(read_container(&path).unwrap(), entries);
    let dup = vec![entries[0].clone(), entries[0].clone()];
    assert!(write_container(dir.path().join("d.ltg"), &dup, Dtype::F64).is_err());

    write_array(dir.path().join("single.ltg"), &entries[1].1, Dtype::F64).unwrap();
    assert_eq!(read_container(dir.path().join("single.ltg")).unwrap(), vec![(String::new(), entries[1].1.clone())]);
    assert_eq!(read_array(dir.path().join("single.ltg")).unwrap(), entries[1].1);
}

#[test]
fn png_scaling_and_fixed_points() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dims::new(3, 4).unwrap();
    let levels = |max: f64| {
        ColorImage::new(std::array::from_fn(|c| RealGrid::from_fn(d, |i, j| ((i * 4 + j) * 21 + c * 7) as f64 / max).unwrap()))
            .unwrap()
    };
    let eight = levels(255.0);
    write_png(dir.path().join("a.png"), &eight, BitDepth::Eight).unwrap();
    let read = read_png(dir.path().join("a.png")).unwrap();
    assert!(max_abs_diff(read.planes[1].values(), eight.planes[1].values()) < 1e-15);
    write_png(dir.path().join("b.png"), &read, BitDepth::Eight).unwrap();
    assert_eq!(fs::read(dir.path().join("a.png")).unwrap(), fs::read(dir.path().join("b.png")).unwrap());

    let extremes = ColorImage::new(std::array::from_fn(|_| {
        RealGrid::new(Dims::new(1, 3).unwrap(), vec![0.0, 1.0, 32768.0 / 65535.0]).unwrap()
    }))
    .unwrap();
    write_png(dir.path().join("c.png"), &extremes, BitDepth::Sixteen).unwrap();
    let back = read_png(dir.path().join("c.png")).unwrap();
    assert_eq!(back.planes[0].values(), &[0.0, 1.0, 32768.0 / 65535.0]);
    assert!((back.planes[2].values()[2] - 0.50000763).abs() < 1e-8);

    let out_of_range = ColorImage::new(std::array::from_fn(|_| RealGrid::new(Dims::new(1, 2).unwrap(), vec![-0.2, 1.7]).unwrap())).unwrap();
    write_png(dir.path().join("d.png"), &out_of_range, BitDepth::Eight).unwrap();
    assert_eq!(read_png(dir.path().join("d.png")).unwrap().planes[0].values(), &[0.0, 1.0]);
}

#[test]
fn checkpoints_round_trip_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let sensor = Dims::square(16).unwrap();
    let mut theta = LeAdmmTheta::initial(4);
    theta.layers[2].log_mu2 = -3.25;
    let models = [UnrolledModel::leadmm(theta.clone()), UnrolledModel::leadmm_star(theta, LearnedTransform::random(3, 0.2))];
    for (i, model) in models.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.ltg"));
        save_checkpoint(&path, model, sensor).unwrap();
        assert!(sidecar_path(&path).exists());
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(&back, model);
        assert_eq!((meta.layers, meta.sensor, meta.padded), (4, sensor, sensor.doubled()));
        assert_eq!(meta.variant, model.variant);
    }
    let names: Vec<String> = read_container(dir.path().join("m1.ltg")).unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["log_mu1", "log_mu2", "log_mu3", "log_tau", "transform.conv_in", "transform.bias_in", "transform.conv_out", "transform.bias_out"]
    );
    assert_eq!(load_checkpoint(dir.path().join("m0.ltg")).unwrap().0.variant, Variant::LeAdmm);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sensor = Dims::square(10).unwrap();
    let raw = caustic_psf(sensor, 2);
    let psf = normalize_psf(&raw).unwrap();
    let noise = NoiseModel::gaussian(0.02, 0);
    let spec = DatasetSpec { sensor, count: 4, split_fraction: 0.5, seed: 3, noise, repeat: false };
    let data = generate_synthetic_dataset(&procedural_sources(4, sensor, 1), &psf, &spec).unwrap();
    let manifest = save_dataset(dir.path(), &data, &raw, 3, &noise).unwrap();
    let (back, back_raw, back_manifest) = load_dataset(dir.path()).unwrap();
    assert_eq!(back_raw, raw);
    assert_eq!(back_manifest, manifest);
    for (a, b) in data.train.iter().chain(&data.test).zip(back.train.iter().chain(&back.test)) {
        assert_eq!(a.measurement, b.measurement);
        assert_eq!(a.valid_region, b.valid_region);
        for c in 0..3 {
            assert!(max_abs_diff(a.ground_truth.planes[c].values(), b.ground_truth.planes[c].values()) <= 0.5 / 65535.0 + 1e-15);
        }
    }
}

#[test]
fn reports_and_history_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let history = vec![
        EpochRecord { epoch: 0, train_loss: f64::NAN, test_mse: 0.2, test_ssim: 0.1 },
        EpochRecord { epoch: 1, train_loss: 0.5, test_mse: 0.1, test_ssim: 0.3 },
    ];
    write_history(dir.path().join("h.csv"), &history).unwrap();
    let back = read_history(dir.path().join("h.csv")).unwrap();
    assert!(back[0].train_loss.is_nan());
    assert_eq!(back[1], history[1]);
    let report = MetricsReport {
        rows: vec![MethodRow {
            method: "admm5".into(),
            data_fidelity: 12.5,
            mse: 0.1041,
            ssim: 0.5,
            psnr: 9.8,
            wall_time_ms: 71.0,
            n_train_images: 0,
        }],
    };
    write_report(dir.path().join("r.csv"), &report).unwrap();
    assert_eq!(read_report(dir.path().join("r.csv")).unwrap(), report);
}

#[test]
fn config_rejects_unknown_keys_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"dataset": "data", "epochs": 3, "solver": {"tau": 0.01}}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset.as_deref(), Some(dir.path().join("data").as_path()));
    assert_eq!(cfg.output, dir.path().join("out"));
    assert_eq!((cfg.epochs, cfg.solver.tau, cfg.solver.mu1), (3, 0.01, 1e-4));
    cfg.validate().unwrap();

    fs::write(&path, r#"{"epochs": 3, "colour": "red"}"#).unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("colour"));

    fs::write(&path, r#"{"split": 1.5}"#).unwrap();
    assert!(RunConfig::load(&path).unwrap().validate().unwrap_err().to_string().contains("split"));
}
