use std::path::Path;
use std::process::{Command, Output};

use deepicp_bench::{evaluate, icp_point2point, perturb_seeded, synth_scenes, EvalPair};
use deepicp_cli::config::Config;
use deepicp_cli::frame::read_frame_bin;

fn deepicp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepicp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, lines: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, lines).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_checkpoint_is_a_one_line_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nowhere.ckpt");
    let o = deepicp(&[
        "register",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--source",
        "a.bin",
        "--target",
        "b.bin",
        "--prior",
        "0 0 0 0 0 0",
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nowhere.ckpt"), "{err}");
}

#[test]
fn malformed_config_is_rejected_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scene.count = 2\nscene.bogus = 1\n");
    let o = deepicp(&["synth", "--config", &cfg, "--out", dir.path().join("d").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("scene.bogus") && err.contains("line 2"), "{err}");
}

#[test]
fn unknown_arguments_fail_with_one_line() {
    let o = deepicp(&["register", "--frobnicate"]);
    assert!(!o.status.success());
    assert_eq!(String::from_utf8(o.stderr).unwrap().lines().count(), 1);
}

#[test]
fn train_register_and_export_on_a_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    let cfg = write_config(dir.path(), "scene.count = 3\ntrain.max_steps = 1\n");
    stdout(&deepicp(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]));
    let out = stdout(&deepicp(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        ckpt.to_str().unwrap(),
    ]));
    assert!(out.starts_with("train steps=2 "), "{out}");
    assert!(dir.path().join("model.ckpt.config").is_file());
    let log = std::fs::read_to_string(dir.path().join("model.ckpt.log")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // the same cloud on both sides with an identity prior
    let cloud = data.join("velodyne/0000_source.bin");
    let reg = stdout(&deepicp(&[
        "register",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--source",
        cloud.to_str().unwrap(),
        "--target",
        cloud.to_str().unwrap(),
        "--prior",
        "0 0 0 0 0 0",
        "--truth",
        "0 0 0 0 0 0",
        "--bidirectional",
    ]));
    let mut lines = reg.lines();
    let pose: Vec<f64> = lines.next().unwrap()["transform ".len()..]
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(pose.len(), 12);
    let errors: Vec<f64> = lines.next().unwrap().split_whitespace().skip(1).step_by(2).map(|v| v.parse().unwrap()).collect();
    // an untrained network stays within its search window
    assert!(errors[1] <= 1.2 * 3f64.sqrt() + 1e-9, "{reg}");

    let ply = dir.path().join("kp.ply");
    let target = data.join("velodyne/0000_target.bin");
    let common = [
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--source",
        cloud.to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
        "--prior",
        "0.1 -0.2 0 0.5 0 -1",
    ];
    let mut args = vec!["export", "--what", "keypoints", "--out", ply.to_str().unwrap()];
    args.extend(common);
    stdout(&deepicp(&args));
    let (exported, columns) = deepicp_cli::ply::read_ply(&ply).unwrap();
    assert_eq!(exported, read_frame_bin(&cloud).unwrap());
    assert_eq!(columns[0].values.iter().filter(|v| **v == 1.0).count(), 16);

    let vols = dir.path().join("vols");
    let mut args = vec!["export", "--what", "probs", "--out", vols.to_str().unwrap()];
    args.extend(common);
    stdout(&deepicp(&args));
    let files = std::fs::read_dir(&vols).unwrap().count();
    assert_eq!(files, 32);
    let bytes = std::fs::read(vols.join("front_000.dprb")).unwrap();
    assert_eq!(&bytes[..4], b"DPRB");
    assert_eq!(bytes.len(), 4 + 12 + 24 + 4 * 343);
}

#[test]
fn eval_icp_matches_the_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let csv = dir.path().join("icp.csv");
    let cfg_path = write_config(dir.path(), "scene.count = 3\n");
    stdout(&deepicp(&["synth", "--config", &cfg_path, "--out", data.to_str().unwrap()]));
    stdout(&deepicp(&[
        "eval",
        "--method",
        "icp",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &cfg_path,
        "--csv",
        csv.to_str().unwrap(),
    ]));

    let cfg = Config::read(Path::new(&cfg_path)).unwrap();
    let pairs: Vec<EvalPair> = synth_scenes(&cfg.scene(), 3)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            // frames are stored as f32
            let round = |c: &deepicp_core::PointCloud| {
                deepicp_cli::frame::parse_frame(&deepicp_cli::frame::encode_frame(c), Path::new("mem")).unwrap()
            };
            EvalPair {
                id: format!("{i:04}"),
                source: round(&s.source),
                target: round(&s.target),
                prior: perturb_seeded(&s.ground_truth, &cfg.perturb(), 777 + i as u64).unwrap(),
                ground_truth: s.ground_truth,
            }
        })
        .collect();
    let report = evaluate("icp", &pairs, |p| {
        icp_point2point(&p.source, &p.target, &p.prior, &cfg.icp()).map(|o| o.transform)
    })
    .unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), report.to_csv());
}
