use std::path::{Path, PathBuf};

use tempfile::tempdir;

use super::*;
use crate::error::Error;
use crate::train::SchedulerKind;

fn cli(command: Command, config: Option<PathBuf>, out: &Path) -> Cli {
    Cli {
        command,
        config,
        desk_scale: false,
        out: out.to_path_buf(),
        seed: None,
        workers: 1,
        scheduler: None,
        eta: None,
        sigma_t: None,
    }
}

/// Small end-to-end config: 16×16 phantoms, 25% Hadamard sampling, one
/// two-width UNet stage, two epochs.
fn tiny_config() -> AppConfig {
    let mut cfg = AppConfig::desk();
    cfg.seed = 7;
    cfg.side = 16;
    cfg.problem = ProblemSpec::Cs { m_over_n: 0.25, eta: 0.1 };
    cfg.dataset = DatasetSpec::Synthetic { train: 8, test: 4 };
    cfg.model.stages = 1;
    cfg.model.widths = vec![2, 4];
    cfg.training.epochs = 2;
    cfg.training.batch_size = 4;
    cfg.training.refresh_every = 1;
    cfg.verify.side = 8;
    cfg.verify.grid_points = 6;
    cfg.verify.tol = 1e-8;
    cfg.verify.max_iters = 5_000;
    cfg
}

fn write_config(cfg: &AppConfig, dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn desk_preset_is_valid_and_round_trips() {
    let desk = AppConfig::desk();
    desk.validate().unwrap();
    assert_eq!(desk.side, 32);
    assert_eq!(desk.dataset, DatasetSpec::Synthetic { train: 2000, test: 200 });
    assert_eq!(desk.problem, ProblemSpec::Cs { m_over_n: 0.3, eta: 0.1 });
    assert_eq!(desk.snr_db, Some(35.0));
    assert_eq!(desk.model.stages, 3);
    assert_eq!(desk.model.widths, vec![8, 16]);
    assert_eq!(desk.training.epochs, 60);
    assert_eq!(desk.training.batch_size, 32);
    assert_eq!(desk.training.scheduler, SchedulerKind::Linear);

    let text = serde_json::to_string(&desk).unwrap();
    let back: AppConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, desk);
}

#[test]
fn checked_in_configs_parse_and_the_desk_one_matches_the_preset() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg: AppConfig =
            serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        if path.file_name().and_then(|n| n.to_str()) == Some("desk-cs.json") {
            assert_eq!(cfg, AppConfig::desk(), "desk-cs.json drifted from the built-in preset");
        }
        seen += 1;
    }
    assert!(seen >= 3, "expected at least three checked-in configs, found {seen}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let mut value = serde_json::to_value(AppConfig::desk()).unwrap();
    value["surprise"] = serde_json::json!(1);
    let err = serde_json::from_value::<AppConfig>(value).unwrap_err();
    assert!(err.to_string().contains("surprise"));

    let mut value = serde_json::to_value(AppConfig::desk()).unwrap();
    value["training"]["bogus"] = serde_json::json!(true);
    assert!(serde_json::from_value::<AppConfig>(value).is_err());
}

#[test]
fn config_source_resolution_and_flag_overrides() {
    let tmp = tempdir().unwrap();
    let path = write_config(&tiny_config(), tmp.path());

    // Exactly one config source.
    let mut both = cli(Command::Train, Some(path.clone()), tmp.path());
    both.desk_scale = true;
    assert!(matches!(load_config(&both), Err(Error::Config(_))));
    let neither = cli(Command::Train, None, tmp.path());
    assert!(matches!(load_config(&neither), Err(Error::Config(_))));

    let mut c = cli(Command::Train, Some(path.clone()), tmp.path());
    c.seed = Some(99);
    c.scheduler = Some(SchedulerArg::Baseline);
    c.eta = Some(0.0);
    let (cfg, from) = load_config(&c).unwrap();
    assert_eq!(from.as_deref(), Some(path.to_str().unwrap()));
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.training.scheduler, SchedulerKind::ConstantZero);
    assert_eq!(cfg.problem, ProblemSpec::Cs { m_over_n: 0.25, eta: 0.0 });
    assert_eq!(cfg.scheduler_label(), "baseline");

    // Family-mismatched overrides are config errors.
    let mut wrong = cli(Command::Train, Some(path.clone()), tmp.path());
    wrong.sigma_t = Some(1.0);
    assert!(matches!(load_config(&wrong), Err(Error::Config(_))));
    let mut blur_cfg = tiny_config();
    blur_cfg.problem = ProblemSpec::Blur { sigma: 3.0, sigma_t: 1.0 };
    let blur_path = tmp.path().join("blur.json");
    std::fs::write(&blur_path, serde_json::to_string(&blur_cfg).unwrap()).unwrap();
    let mut wrong = cli(Command::Train, Some(blur_path), tmp.path());
    wrong.eta = Some(0.2);
    assert!(matches!(load_config(&wrong), Err(Error::Config(_))));

    let mut desk = cli(Command::Train, None, tmp.path());
    desk.desk_scale = true;
    let (cfg, from) = load_config(&desk).unwrap();
    assert_eq!(cfg, AppConfig::desk());
    assert!(from.is_none());
}

#[test]
fn out_dir_env_override_wins_when_non_empty() {
    let flag = Path::new("flagged");
    assert_eq!(resolve_out(None, flag), PathBuf::from("flagged"));
    assert_eq!(resolve_out(Some("env-dir".into()), flag), PathBuf::from("env-dir"));
    assert_eq!(resolve_out(Some("".into()), flag), PathBuf::from("flagged"));
}

#[test]
fn invalid_configs_are_rejected_with_config_errors() {
    let cases: Vec<Box<dyn Fn(&mut AppConfig)>> = vec![
        Box::new(|c| c.side = 20),
        Box::new(|c| c.snr_db = Some(f64::NAN)),
        Box::new(|c| c.model.widths.clear()),
        Box::new(|c| c.model.stages = 0),
        Box::new(|c| c.training.batch_size = 0),
        Box::new(|c| c.training.learning_rate = 0.0),
        Box::new(|c| c.training.refresh_every = 0),
        Box::new(|c| c.evaluation.push(EvalCase { label: "".into(), m_over_n: None, sigma: None, snr_db: None })),
        Box::new(|c| {
            let case = EvalCase { label: "x".into(), m_over_n: Some(0.2), sigma: None, snr_db: None };
            c.evaluation.push(case.clone());
            c.evaluation.push(case);
        }),
        Box::new(|c| {
            c.evaluation.push(EvalCase { label: "x".into(), m_over_n: None, sigma: Some(2.0), snr_db: None })
        }),
        Box::new(|c| c.verify.beta_target = 1.0),
        Box::new(|c| c.verify.tau = Some(-0.1)),
        Box::new(|c| c.verify.grid_points = 1),
    ];
    for (i, mutate) in cases.iter().enumerate() {
        let mut cfg = tiny_config();
        mutate(&mut cfg);
        assert!(cfg.validate().is_err(), "case {i} should be rejected");
    }
    assert_eq!(tiny_config().validate().map_err(|e| e.to_string()), Ok(()));
}

#[test]
fn workers_zero_is_a_config_error() {
    let tmp = tempdir().unwrap();
    let mut c = cli(Command::MakeOperators, Some(write_config(&tiny_config(), tmp.path())), tmp.path());
    c.workers = 0;
    let err = run(c).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn operator_descriptors_match_the_design_dimensions() {
    // 64×64 compressed sensing at 30%: 0.3·4096 rounds to 1229 rows, and the
    // 10% augmentation adds round(0.1·4096) = 410 more.
    let tmp = tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.side = 64;
    cfg.problem = ProblemSpec::Cs { m_over_n: 0.3, eta: 0.1 };
    let path = write_config(&cfg, tmp.path());
    run(cli(Command::MakeOperators, Some(path), tmp.path())).unwrap();

    let report: DimensionReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("operators/dimensions.json")).unwrap())
            .unwrap();
    assert_eq!(report, DimensionReport::Cs { n: 4096, m: 1229, m_t: 1639, eta: 0.1 });
    let desc: OperatorDescriptor =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("operators/h.json")).unwrap()).unwrap();
    match desc {
        OperatorDescriptor::HadamardCs { n, m, rows, .. } => {
            assert_eq!((n, m), (4096, 1229));
            assert_eq!(rows.len(), 1229);
        }
        other => panic!("unexpected descriptor {other:?}"),
    }
}

#[test]
fn blur_dimension_report_uses_three_sigma_half_widths() {
    let tmp = tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.side = 32;
    cfg.problem = ProblemSpec::Blur { sigma: 5.0, sigma_t: 3.0 };
    let path = write_config(&cfg, tmp.path());
    run(cli(Command::MakeOperators, Some(path), tmp.path())).unwrap();
    let report: DimensionReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("operators/dimensions.json")).unwrap())
            .unwrap();
    assert_eq!(
        report,
        DimensionReport::Blur { side: 32, sigma: 5.0, sigma_t: 3.0, half_width: 15, half_width_t: 9 }
    );
}

#[test]
fn zero_augmentation_gives_identical_descriptors() {
    let tmp = tempdir().unwrap();
    let path = write_config(&tiny_config(), tmp.path());
    let mut c = cli(Command::MakeOperators, Some(path), tmp.path());
    c.eta = Some(0.0);
    run(c).unwrap();
    let h = std::fs::read(tmp.path().join("operators/h.json")).unwrap();
    let ht = std::fs::read(tmp.path().join("operators/ht.json")).unwrap();
    assert_eq!(h, ht);
}

#[test]
fn simulate_writes_expected_cache_shapes_and_is_bit_reproducible() {
    // n = 256 at 25% sampling: every sample caches 64 measurements.
    let stage = |dir: &Path| {
        let mut cfg = tiny_config();
        cfg.dataset = DatasetSpec::Synthetic { train: 10, test: 4 };
        let path = write_config(&cfg, dir);
        run(cli(Command::MakeOperators, Some(path.clone()), dir)).unwrap();
        run(cli(Command::Simulate, Some(path), dir)).unwrap();
    };
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    stage(a.path());
    stage(b.path());

    let y = io::read_tensor::<f64>(a.path().join("data/y-train.utns")).unwrap();
    assert_eq!(y.shape(), &[10, 64]);
    let yt = io::read_tensor::<f64>(a.path().join("data/yt-train.utns")).unwrap();
    assert_eq!(yt.shape(), &[10, 90]);
    for file in ["data/y-train.utns", "data/y-test.utns", "data/yt-test.utns", "data/train.utns"] {
        let lhs = std::fs::read(a.path().join(file)).unwrap();
        let rhs = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(lhs, rhs, "{file} differs between identical runs");
    }

    let report: SimulateReport =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("data/simulate.json")).unwrap()).unwrap();
    assert_eq!(report.requested_snr_db, Some(35.0));
    for split in &report.splits {
        let achieved = split.achieved_snr_db.expect("noisy run reports achieved snr");
        assert!((achieved - 35.0).abs() < 3.0, "achieved snr {achieved} far from request");
    }
}

#[test]
fn noiseless_simulation_caches_the_exact_measurements() {
    let tmp = tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.snr_db = None;
    let path = write_config(&cfg, tmp.path());
    run(cli(Command::MakeOperators, Some(path.clone()), tmp.path())).unwrap();
    run(cli(Command::Simulate, Some(path), tmp.path())).unwrap();

    let desc: OperatorDescriptor =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("operators/h.json")).unwrap()).unwrap();
    let h = desc.build::<f64>().unwrap();
    let train = Dataset::load_cache(tmp.path().join("data/train")).unwrap();
    let clean = h.apply(&train.images().reshaped(&[train.len(), 256]).unwrap()).unwrap();
    let y = io::read_tensor::<f64>(tmp.path().join("data/y-train.utns")).unwrap();
    assert_eq!(y.data(), clean.data(), "noiseless cache must be the exact measurements");

    let report: SimulateReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("data/simulate.json")).unwrap()).unwrap();
    assert!(report.splits.iter().all(|s| s.achieved_snr_db.is_none()));
}

#[test]
fn staged_pipeline_reports_missing_prerequisites() {
    let tmp = tempdir().unwrap();
    let path = write_config(&tiny_config(), tmp.path());
    for command in [Command::Simulate, Command::Train, Command::Eval, Command::PlotData] {
        let err = run(cli(command, Some(path.clone()), tmp.path())).unwrap_err();
        assert!(
            matches!(err, Error::MissingPrerequisite(_)),
            "{} without staging: {err}",
            command.name()
        );
        assert_eq!(err.exit_code(), 4);
    }
    // Staging operators alone is not enough to train.
    run(cli(Command::MakeOperators, Some(path.clone()), tmp.path())).unwrap();
    let err = run(cli(Command::Train, Some(path), tmp.path())).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

fn run_pipeline(dir: &Path, scheduler: Option<SchedulerArg>) -> RunManifest {
    let path = write_config(&tiny_config(), dir);
    run(cli(Command::MakeOperators, Some(path.clone()), dir)).unwrap();
    run(cli(Command::Simulate, Some(path.clone()), dir)).unwrap();
    let mut c = cli(Command::Train, Some(path), dir);
    c.scheduler = scheduler;
    run(c).unwrap()
}

#[test]
fn train_writes_metrics_checkpoint_and_manifest() {
    let tmp = tempdir().unwrap();
    let manifest = run_pipeline(tmp.path(), None);
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.scheduler, "linear");
    assert_eq!(manifest.seed, 7);
    assert_eq!(manifest.version, env!("CARGO_PKG_VERSION"));
    assert!(manifest.finished_unix_ms >= manifest.started_unix_ms);

    let metrics = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3, "header plus one row per epoch");
    assert_eq!(lines[0], MetricsLog::CSV_HEADER);
    assert!(tmp.path().join("final/manifest.json").exists());

    let written: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest-train.json")).unwrap())
            .unwrap();
    assert_eq!(written, manifest);
}

#[test]
fn baseline_flag_labels_the_run_manifest() {
    let tmp = tempdir().unwrap();
    let manifest = run_pipeline(tmp.path(), Some(SchedulerArg::Baseline));
    assert_eq!(manifest.scheduler, "baseline");
    assert_eq!(manifest.config.training.scheduler, SchedulerKind::ConstantZero);
}

#[test]
fn eval_covers_each_configured_setting_in_order() {
    let tmp = tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.evaluation = [0.25, 0.30, 0.35]
        .iter()
        .map(|f| EvalCase {
            label: format!("mn-{f:.2}"),
            m_over_n: Some(*f),
            sigma: None,
            snr_db: Some(35.0),
        })
        .collect();
    let path = write_config(&cfg, tmp.path());
    run(cli(Command::MakeOperators, Some(path.clone()), tmp.path())).unwrap();
    run(cli(Command::Simulate, Some(path.clone()), tmp.path())).unwrap();
    run(cli(Command::Train, Some(path.clone()), tmp.path())).unwrap();
    run(cli(Command::Eval, Some(path), tmp.path())).unwrap();

    let csv = std::fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "setting,mean_psnr,mean_ssim");
    for (line, label) in lines[1..].iter().zip(["mn-0.25", "mn-0.30", "mn-0.35"]) {
        assert!(line.starts_with(&format!("{label},")), "row {line:?} out of order");
    }
    assert!(tmp.path().join("eval.json").exists());
}

#[test]
fn verify_with_identical_operators_traces_a_constant_path() {
    let tmp = tempdir().unwrap();
    let path = write_config(&tiny_config(), tmp.path());
    let mut c = cli(Command::Verify, Some(path), tmp.path());
    c.eta = Some(0.0);
    run(c).unwrap();

    let report: theory::PathReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("verify/path.json")).unwrap()).unwrap();
    assert!(!report.failed);
    assert!(report.cert.rho_cert < 1.0);
    assert_eq!(report.points.len(), 6);
    assert!(report.max_ratio() < 1e-6, "identical fidelities should freeze the path");
    assert_eq!(report.violations(), 0);
    let csv = std::fs::read_to_string(tmp.path().join("verify/path.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn plot_data_reshapes_the_metrics_log() {
    let tmp = tempdir().unwrap();
    let metrics = "epoch,alpha,train_loss,train_psnr,test_psnr,test_ssim,seconds\n\
                   0,1,0.5,10,11,0.5,2.5\n\
                   1,0.75,0.25,12,13,0.6,2.25\n";
    std::fs::write(tmp.path().join("metrics.csv"), metrics).unwrap();
    let path = write_config(&tiny_config(), tmp.path());
    run(cli(Command::PlotData, Some(path), tmp.path())).unwrap();

    let read = |name: &str| std::fs::read_to_string(tmp.path().join("plots").join(name)).unwrap();
    assert_eq!(read("schedule.csv"), "epoch,alpha\n0,1\n1,0.75\n");
    assert_eq!(read("psnr.csv"), "epoch,train_psnr,test_psnr\n0,10,11\n1,12,13\n");
    assert_eq!(read("loss.csv"), "epoch,train_loss\n0,0.5\n1,0.25\n");
    assert!(!tmp.path().join("plots/path.csv").exists(), "no path data was staged");
}
