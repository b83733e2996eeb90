use std::path::Path;

use featinv_core::config::{AttackVariant, FrameCoupling, RunConfig};
use featinv_core::manifest::{RunManifest, RunStatus};
use featinv_core::metrics::MetricsReport;
use featinv_core::runner::{self, Command};

fn base(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg.data.count = 2;
    cfg.attack.iterations = 8;
    cfg
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn whitebox_run_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = base(tmp.path());
    let out = runner::run(&cfg).unwrap();
    let files = entries(&out.dir);
    for f in ["loss_trace.csv", "manifest.json", "metrics.json", "original_0000.png", "recon_0001.png"] {
        assert!(files.contains(&f.to_string()), "{f} missing from {files:?}");
    }
    let trace = std::fs::read_to_string(out.dir.join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("image,group,frame,iteration,total,"));
    assert_eq!(trace.lines().count(), 1 + 2 * 8);
    let report = MetricsReport::load(&out.dir.join("metrics.json")).unwrap();
    assert_eq!(report.per_image.len(), 2);
    assert_eq!(out.manifest.status, RunStatus::Completed);
    assert!(out.manifest.run_id.starts_with("whitebox-"));
    assert!(out.manifest.seeds.contains_key("attack"));
    // Only the finished run is left behind.
    assert_eq!(entries(tmp.path()), vec![out.manifest.run_id.clone()]);
    // The same run id is never overwritten.
    assert!(runner::run(&cfg).is_err());
}

#[test]
fn failed_runs_are_quarantined() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(tmp.path());
    cfg.attack.variant = AttackVariant::WhiteboxText;
    cfg.attack.text = Some("circle".into());
    cfg.run_id = Some("bad".into());
    let err = runner::run(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(!tmp.path().join("bad").exists());
    let q = entries(&tmp.path().join(".quarantine"));
    assert_eq!(q.len(), 1);
    assert!(q[0].starts_with("bad-"));
}

#[test]
fn invalid_config_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(&tmp.path().join("out"));
    cfg.attack.learning_rate = -1.0;
    assert_eq!(runner::run(&cfg).unwrap_err().exit_code(), 2);
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn multiframe_run_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(&tmp.path().join("a"));
    cfg.attack.variant = AttackVariant::Multiframe;
    cfg.attack.coupling = FrameCoupling::Joint;
    cfg.attack.lambda_c = 5.0;
    cfg.data.count = 1;
    cfg.data.frames = 3;
    let first = runner::run(&cfg).unwrap();
    assert!(first.dir.join("recon_0002.png").exists());
    let m = RunManifest::load(&first.dir.join("manifest.json")).unwrap();
    assert_eq!(m, first.manifest);
    let (second, diff) = runner::replay(&m, &tmp.path().join("b")).unwrap();
    assert!(diff.is_empty(), "{diff:?}");
    assert_eq!(
        std::fs::read(first.dir.join("loss_trace.csv")).unwrap(),
        std::fs::read(second.dir.join("loss_trace.csv")).unwrap()
    );
}

#[test]
fn blackbox_stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(tmp.path());
    cfg.model.split_index = 2;
    cfg.blackbox.queries = 12;
    cfg.blackbox.width = 4;
    cfg.blackbox.train.epochs = 1;
    cfg.blackbox.train.batch_size = 4;

    let collected = runner::run_command(&cfg, Command::BlackboxCollect).unwrap();
    assert!(collected.dir.join("queries/index.json").exists());

    cfg.blackbox.dataset_dir = Some(collected.dir.join("queries"));
    let trained = runner::run_command(&cfg, Command::BlackboxTrain).unwrap();
    let inv = trained.dir.join("inverter.finv");
    assert!(inv.exists());

    cfg.blackbox.inverter_path = Some(inv);
    let ran = runner::run_command(&cfg, Command::BlackboxRun).unwrap();
    assert!(ran.dir.join("recon_0001.png").exists());
    assert!(ran.dir.join("metrics.json").exists());

    let (_, diff) = runner::replay(&trained.manifest, &tmp.path().join("replay")).unwrap();
    assert!(diff.is_empty(), "{diff:?}");

    // Training on queries collected at another split is refused.
    cfg.model.split_index = 1;
    cfg.run_id = Some("mismatch".into());
    assert!(runner::run_command(&cfg, Command::BlackboxTrain).is_err());
}

#[test]
fn defend_writes_a_tradeoff_table() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(tmp.path());
    cfg.defense.sigmas = vec![1.0, 0.0];
    cfg.defense.attack_count = 1;
    let out = runner::run_command(&cfg, Command::Defend).unwrap();
    let csv = std::fs::read_to_string(out.dir.join("tradeoff.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sigma,task_accuracy,attack_psnr,attack_ssim,error");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn metrics_and_report_read_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = runner::run(&base(tmp.path())).unwrap();
    let (o, r) = (tmp.path().join("o"), tmp.path().join("r"));
    std::fs::create_dir(&o).unwrap();
    std::fs::create_dir(&r).unwrap();
    for i in 0..2 {
        std::fs::copy(out.dir.join(format!("original_000{i}.png")), o.join(format!("{i}.png"))).unwrap();
        std::fs::copy(out.dir.join(format!("recon_000{i}.png")), r.join(format!("{i}.png"))).unwrap();
    }
    let report = runner::evaluate_dirs(&o, &r, None).unwrap();
    assert_eq!(report.per_image.len(), 2);
    assert!(report.classifier_name.is_none());
    let disk = MetricsReport::load(&out.dir.join("metrics.json")).unwrap();
    // PNG quantization moves PSNR only slightly.
    assert!((report.aggregate.mean_psnr - disk.aggregate.mean_psnr).abs() < 1.0);
    let (md, grid) = runner::build_report(&[out.dir.clone()], 2).unwrap();
    assert!(md.contains(&out.manifest.run_id));
    assert!(grid.is_some());
}
