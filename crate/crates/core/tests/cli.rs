//! End-to-end runs of the command-line pipeline on a tiny synthetic network.

use std::path::Path;
use std::process::Command as Process;

use ndarray::Array2;
use tm_diffuse::cli::{
    cmd_complete, cmd_eval, cmd_gen, cmd_ingest, cmd_synth, cmd_tomo, cmd_train, RunConfig, CHECKPOINT_FILE,
    LOSS_FILE, MANIFEST_FILE,
};
use tm_diffuse::data::{read_dense_csv, write_dense_csv, write_mask_csv, write_trace_csv, ObservationMask};
use tm_diffuse::denoiser::Checkpoint;
use tm_diffuse::sampling::{assemble_series, covering_origins, sample_unconditional};

const BIN: &str = env!("CARGO_BIN_EXE_tm-diffuse");

fn tiny(dir: &Path) -> RunConfig {
    let cfg = RunConfig {
        data_dir: dir.display().to_string(),
        input: "synthetic/traffic.csv".into(),
        topology: "synthetic/topology.csv".into(),
        gen_nodes: 3,
        gen_slots: 120,
        train_len: 96,
        window_len: 6,
        train_stride: 3,
        train_mask_rate: 0.7,
        diffusion_steps: 20,
        model_dim: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        ff_dim: 16,
        batch_size: 8,
        warmup_iters: 5,
        epochs_pre: 2,
        epochs_diff: 4,
        synth_count: 5,
        seed: 3,
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    cfg
}

fn prepared(dir: &Path) -> RunConfig {
    let cfg = tiny(dir);
    cmd_gen(&cfg).unwrap();
    cmd_ingest(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cfg
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn ingest_writes_split_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_gen(&cfg).unwrap();
    let out = cmd_ingest(&cfg).unwrap();
    assert_eq!(out.dataset.train.shape(), (9, 96));
    assert_eq!(out.dataset.test.shape(), (9, 24));
    assert_eq!(out.dataset.train_mask.observed_count(), (0.7f64 * 9.0 * 96.0).round() as usize);
    assert!(out.dataset.train.values().iter().all(|&v| (0.0..=1.0).contains(&v)));

    cfg.train_mask_rate = 1.0;
    let out = cmd_ingest(&cfg).unwrap();
    let bits = read_dense_csv(out.dir.join("train_mask.csv")).unwrap();
    assert!(bits.iter().all(|&b| b == 1.0));
}

#[test]
fn sliced_training_matches_one_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = tiny(a.path());
    cmd_gen(&cfg_a).unwrap();
    cmd_ingest(&cfg_a).unwrap();
    let full = cmd_train(&cfg_a).unwrap();
    assert_eq!(full.epochs, 4);

    let mut cfg_b = tiny(b.path());
    cmd_gen(&cfg_b).unwrap();
    cmd_ingest(&cfg_b).unwrap();
    cfg_b.epoch_budget = 1;
    assert_eq!(cmd_train(&cfg_b).unwrap().epochs, 1);
    cfg_b.resume = true;
    let step = cmd_train(&cfg_b).unwrap();
    assert_eq!((step.epochs, step.resumed_from_epoch), (2, Some(1)));
    cfg_b.epoch_budget = 0;
    assert_eq!(cmd_train(&cfg_b).unwrap().epochs, 4);

    let model = |d: &Path| d.join("model");
    assert_eq!(read(model(a.path()).join(LOSS_FILE)), read(model(b.path()).join(LOSS_FILE)));
    let ck_a = Checkpoint::load(model(a.path()).join(CHECKPOINT_FILE)).unwrap();
    let ck_b = Checkpoint::load(model(b.path()).join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck_a.denoiser.params(), ck_b.denoiser.params());
    assert_eq!(ck_a.optim, ck_b.optim);

    cfg_b.learning_rate = 1e-3;
    assert!(cmd_train(&cfg_b).is_err(), "resume with different settings must be refused");
}

#[test]
fn numeric_abort_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let ck = dir.path().join("model").join(CHECKPOINT_FILE);
    let out = Process::new(BIN)
        .args(["train", "--set", "learning_rate=1e300", "--set", "warmup_iters=1"])
        .args(["--config", dir.path().join("model").join("resolved.conf").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("NaN"), "{stderr}");
    let kept = Checkpoint::load(&ck).unwrap();
    assert!(kept.denoiser.params().iter().all(|p| p.iter().all(|v| v.is_finite())));
    assert!(kept.optim.unwrap().epoch < 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let status = Process::new(BIN)
        .args(["ingest", "--set", &format!("input={}", missing.display())])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Process::new(BIN).args(["eval", "--jobs", "many"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Process::new(BIN)
        .args(["gen", "--set", "gen_nodes=2", "--set", "gen_slots=10"])
        .env("TM_DIFFUSE_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("synthetic/traffic.csv").exists());
}

#[test]
fn synth_respects_count_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let out = cmd_synth(&cfg).unwrap();
    let raw = read_dense_csv(dir.path().join("results/synth/synth.csv")).unwrap();
    assert_eq!(raw.dim(), (5 * 6, 9));
    let ck = Checkpoint::load(dir.path().join("model").join(CHECKPOINT_FILE)).unwrap();
    let scale = ck.normalization.unwrap().scale;
    assert!(raw.iter().all(|&v| (0.0..=scale).contains(&v)));
    let flat = std::fs::read_to_string(dir.path().join("results/synth/flat_samples.csv")).unwrap();
    assert_eq!(flat.lines().count(), 1 + 4 + 5);
    assert!(out.mmd2.is_some());
    let manifest = std::fs::read_to_string(out.dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("\"mmd2\""));
}

#[test]
fn tomo_without_guidance_is_unconditional() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.simulate = true;
    cfg.rho = 0.0;
    let out = cmd_tomo(&cfg).unwrap();
    let ck = Checkpoint::load(dir.path().join("model").join(CHECKPOINT_FILE)).unwrap();
    let origins = covering_origins(24, 6).unwrap();
    let plain = sample_unconditional(&ck.denoiser, &ck.schedule, origins.len(), &cfg.guidance_config().unwrap()).unwrap();
    assert_eq!(assemble_series(&plain.windows, &origins).unwrap(), out.estimate);

    cfg.rho = 0.05;
    let guided = cmd_tomo(&cfg).unwrap();
    assert!(guided.link_residual < out.link_residual);
    assert!(dir.path().join("results/tomo/tre.svg").exists());
}

#[test]
fn tomo_rejects_mismatched_routing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    write_dense_csv(dir.path().join("bad_routing.csv"), &Array2::ones((4, 7))).unwrap();
    cfg.routing = "bad_routing.csv".into();
    cfg.simulate = true;
    let err = cmd_tomo(&cfg).unwrap_err().to_string();
    assert!(err.contains('7') && err.contains('9'), "{err}");
}

#[test]
fn complete_edge_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.test_mask_rate = 1.0;
    let full = cmd_complete(&cfg).unwrap();
    assert_eq!(full.report.nmae, None);
    assert_eq!(full.report.evaluated_entries, 0);
    let ds = tm_diffuse::cli::Dataset::load(&dir.path().join("dataset")).unwrap();
    assert_eq!(full.estimate, ds.test);
    let text = std::fs::read_to_string(full.dir.join("report.txt")).unwrap();
    assert!(text.contains("nmae=NA"));

    write_mask_csv(dir.path().join("empty.csv"), &ObservationMask::zeros(9, 24)).unwrap();
    cfg.mask = "empty.csv".into();
    assert!(cmd_complete(&cfg).is_err());

    cfg.mask = String::new();
    cfg.test_mask_rate = 0.5;
    let half = cmd_complete(&cfg).unwrap();
    for ((e, t), b) in half.estimate.values().iter().zip(ds.test.values()).zip(half.observed.bits()) {
        if *b == 1.0 {
            assert_eq!(e.to_bits(), t.to_bits());
        }
    }
    assert!(half.report.nmae.unwrap() > 0.0);
    assert!(half.baseline.nmae.is_some());
}

#[test]
fn manifest_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.simulate = true;
    cfg.jobs = 2;
    cfg.sample_batch = 1;
    let out = cmd_tomo(&cfg).unwrap();
    let first = read(out.dir.join("estimate.csv"));
    std::fs::rename(out.dir.join(MANIFEST_FILE), dir.path().join("replay.json")).unwrap();
    let status = Process::new(BIN)
        .args(["tomo", "--config", dir.path().join("replay.json").to_str().unwrap(), "--jobs", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(read(out.dir.join("estimate.csv")), first);
}

#[test]
fn eval_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let truth = ndarray::array![[1.0, 2.0, 3.0, 9.0]];
    let est = ndarray::array![[2.0, 2.0, 2.0, 0.0]];
    write_trace_csv(dir.path().join("truth.csv"), &truth).unwrap();
    write_trace_csv(dir.path().join("est.csv"), &est).unwrap();
    write_mask_csv(
        dir.path().join("mask.csv"),
        &ObservationMask::new(ndarray::array![[0.0, 0.0, 0.0, 1.0]]).unwrap(),
    )
    .unwrap();
    let mut cfg = RunConfig {
        data_dir: dir.path().display().to_string(),
        truth: "truth.csv".into(),
        estimate: "truth.csv".into(),
        ..RunConfig::default()
    };
    let same = cmd_eval(&cfg).unwrap();
    assert_eq!((same.nmae, same.nrmse), (Some(0.0), Some(0.0)));

    cfg.estimate = "est.csv".into();
    cfg.mask = "mask.csv".into();
    let masked = cmd_eval(&cfg).unwrap();
    assert!((masked.nmae.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((masked.nrmse.unwrap() - 2f64.sqrt() / 14f64.sqrt()).abs() < 1e-12);

    cfg.scope = tm_diffuse::cli::EvalScope::All;
    let all = cmd_eval(&cfg).unwrap();
    assert!((all.nmae.unwrap() - 11.0 / 15.0).abs() < 1e-12);
    let tre = std::fs::read_to_string(dir.path().join("results/eval/tre.csv")).unwrap();
    assert_eq!(tre.lines().count(), 5);
}
