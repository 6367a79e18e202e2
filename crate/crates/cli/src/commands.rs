//! The command implementations behind the `deepicp` binary. Each returns the
//! text it prints on success.

use std::fmt::Write as _;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use deepicp_bench::{evaluate, icp_point2point, synth_scenes, EvalPair, EvalReport};
use deepicp_core::{PointCloud, RegistrationError, RigidTransform};
use deepicp_net::cascade::{cascade_infer, CascadeOptions, RegistrationResult};
use deepicp_net::cpg::write_probability_volume;
use deepicp_net::model::DeepIcp;
use deepicp_net::train::{render_log, split_indices, train, TrainSample};

use crate::config::Config;
use crate::dataset::{eval_pairs, load_dataset, read_cloud, write_synthetic};
use crate::model_io::{load_model, save_model};
use crate::ply::{write_ply, Column};
use crate::poses::{format_pose, parse_pose_line, parse_six_dof};
use crate::{CliError, Result};

fn config_or_default(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::read)
}

pub fn synth(config: Option<&Path>, out: &Path) -> Result<String> {
    let cfg = config_or_default(config)?;
    let scenes = synth_scenes(&cfg.scene(), cfg.int("scene.count"))?;
    let pairs = write_synthetic(out, &scenes)?;
    let points: usize = scenes.iter().map(|s| s.source.len() + s.target.len()).sum();
    Ok(format!(
        "synth pairs={} mean_points={} dir={}\n",
        pairs.len(),
        points / (2 * scenes.len().max(1)),
        out.display()
    ))
}

/// Registration with the learned network.
pub fn register_clouds(
    model: &mut DeepIcp,
    source: PointCloud,
    target: PointCloud,
    prior: &RigidTransform,
    options: CascadeOptions,
) -> Result<RegistrationResult> {
    let s = model.prepare(source)?;
    let t = model.prepare(target)?;
    Ok(cascade_infer(model, &s, &t, prior, options)?)
}

fn deepicp_report(model: &mut DeepIcp, pairs: &[EvalPair], options: CascadeOptions) -> Result<EvalReport> {
    Ok(evaluate("deepicp", pairs, |p| {
        register_clouds(model, p.source.clone(), p.target.clone(), &p.prior, options).map(|r| r.transform)
    })?)
}

fn report_text(report: &EvalReport) -> String {
    format!("{}{}", report.render_table(), report.to_csv())
}

pub fn train_command(data: &Path, config: Option<&Path>, out: &Path) -> Result<String> {
    let cfg = config_or_default(config)?;
    let train_cfg = cfg.train()?;
    let pairs = load_dataset(data, &cfg)?;
    if pairs.len() < 2 {
        return Err(CliError::Usage(format!("{} holds {} pairs, need at least 2", data.display(), pairs.len())));
    }
    let mut model = DeepIcp::new(cfg.model()?)?;
    let (train_idx, val_idx) = split_indices(pairs.len(), train_cfg.train_fraction, train_cfg.seed);
    let samples: Vec<TrainSample> = train_idx
        .iter()
        .map(|&i| {
            let (s, t) = pairs[i].load()?;
            Ok(TrainSample {
                id: pairs[i].id.clone(),
                source: model.prepare(s)?,
                target: model.prepare(t)?,
                ground_truth: pairs[i].ground_truth,
            })
        })
        .collect::<Result<_>>()?;
    let outcome = train(&mut model, &samples, &train_cfg, |e| {
        if e.step % 100 == 0 {
            eprintln!("{}", e.to_line());
        }
    })?;
    save_model(&model, &cfg, out)?;
    let log_path = PathBuf::from(format!("{}.log", out.display()));
    std::fs::write(&log_path, render_log(&outcome.history())).map_err(|e| CliError::io(&log_path, e))?;

    let val_pairs: Vec<_> = val_idx.iter().map(|&i| pairs[i].clone()).collect();
    let problems = eval_pairs(&val_pairs, &cfg)?;
    let report = deepicp_report(&mut model, &problems, CascadeOptions::default())?;
    let prior = EvalReport::from_entries(
        "prior",
        problems
            .iter()
            .map(|p| (p.id.clone(), RegistrationError::between(&p.prior, &p.ground_truth)))
            .collect(),
    )?;
    Ok(format!(
        "train steps={} checkpoint={} log={}\n{}{}",
        outcome.history().len(),
        out.display(),
        log_path.display(),
        prior.render_table(),
        report.render_table()
    ))
}

/// Six numbers `tx ty tz roll pitch yaw` or a twelve-number pose.
pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    if text.split_whitespace().count() == 12 {
        return Ok(parse_pose_line(text, 1, Path::new("<argument>"))?.transform);
    }
    parse_six_dof(text)
}

fn transform_lines(estimate: &RigidTransform, truth: Option<&RigidTransform>) -> String {
    let mut out = format!("transform {}\n", format_pose(estimate));
    if let Some(t) = truth {
        let e = RegistrationError::between(estimate, t);
        let _ = writeln!(out, "angular_deg {:.9} translational_m {:.9}", e.angular, e.translational);
    }
    out
}

pub struct RegisterArgs<'a> {
    pub checkpoint: &'a Path,
    pub source: &'a Path,
    pub target: &'a Path,
    pub prior: &'a str,
    pub truth: Option<&'a str>,
    pub options: CascadeOptions,
}

pub fn register(args: &RegisterArgs<'_>) -> Result<String> {
    let prior = parse_transform(args.prior)?;
    let truth = args.truth.map(parse_transform).transpose()?;
    let (mut model, _) = load_model(args.checkpoint)?;
    let r = register_clouds(&mut model, read_cloud(args.source)?, read_cloud(args.target)?, &prior, args.options)?;
    let mut out = transform_lines(&r.transform, truth.as_ref());
    let _ = writeln!(out, "correspondences {}", r.correspondences.len());
    Ok(out)
}

pub fn icp(source: &Path, target: &Path, prior: &str, truth: Option<&str>, config: Option<&Path>) -> Result<String> {
    let cfg = config_or_default(config)?;
    let prior = parse_transform(prior)?;
    let truth = truth.map(parse_transform).transpose()?;
    let outcome = icp_point2point(&read_cloud(source)?, &read_cloud(target)?, &prior, &cfg.icp())?;
    let mut out = transform_lines(&outcome.transform, truth.as_ref());
    let _ = writeln!(out, "iterations {} converged {}", outcome.iterations, outcome.converged);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DeepIcp,
    Icp,
}

pub fn eval(
    data: &Path,
    method: Method,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    csv: Option<&Path>,
) -> Result<String> {
    let (report, _) = eval_report(data, method, checkpoint, config)?;
    match csv {
        Some(path) => {
            std::fs::write(path, report.to_csv()).map_err(|e| CliError::io(path, e))?;
            Ok(report.render_table())
        }
        None => Ok(report_text(&report)),
    }
}

/// The report `eval` prints, with the configuration it used. Without
/// `--config` the checkpoint's sidecar (or the defaults) supplies priors.
pub fn eval_report(
    data: &Path,
    method: Method,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
) -> Result<(EvalReport, Config)> {
    let mut model = match (method, checkpoint) {
        (Method::DeepIcp, None) => return Err(CliError::Usage("--method deepicp needs --ckpt".into())),
        (Method::DeepIcp, Some(path)) => Some(load_model(path)?),
        (Method::Icp, _) => None,
    };
    let cfg = match (config, &model) {
        (Some(path), _) => Config::read(path)?,
        (None, Some((_, side))) => side.clone(),
        (None, None) => Config::default(),
    };
    let problems = eval_pairs(&load_dataset(data, &cfg)?, &cfg)?;
    let report = match model.as_mut() {
        Some((m, _)) => deepicp_report(m, &problems, CascadeOptions::default())?,
        None => evaluate("icp", &problems, |p| {
            icp_point2point(&p.source, &p.target, &p.prior, &cfg.icp()).map(|o| o.transform)
        })?,
    };
    Ok((report, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Export {
    Keypoints,
    Probs,
}

pub struct ExportArgs<'a> {
    pub what: Export,
    pub checkpoint: &'a Path,
    pub source: &'a Path,
    pub target: &'a Path,
    pub prior: &'a str,
    pub out: &'a Path,
}

/// Keypoints: the source cloud as PLY with `keypoint` (0/1) and `weight`
/// columns from the front stage. Probabilities: one `.dprb` volume per
/// keypoint and stage in the output directory.
pub fn export(args: &ExportArgs<'_>) -> Result<String> {
    let prior = parse_transform(args.prior)?;
    let (mut model, _) = load_model(args.checkpoint)?;
    let source = read_cloud(args.source)?;
    let r = register_clouds(&mut model, source.clone(), read_cloud(args.target)?, &prior, CascadeOptions::default())?;
    match args.what {
        Export::Keypoints => {
            let front = &r.forward.front;
            let mut flag = vec![0.0; source.len()];
            let mut weight = vec![0.0; source.len()];
            for (k, &i) in front.keypoint_indices.iter().enumerate() {
                flag[i] = 1.0;
                weight[i] = front.correspondences.weights[k];
            }
            let columns = [
                Column {
                    name: "keypoint".into(),
                    values: flag,
                },
                Column {
                    name: "weight".into(),
                    values: weight,
                },
            ];
            write_ply(&source, &columns, args.out)?;
            Ok(format!("export keypoints={} file={}\n", front.keypoint_indices.len(), args.out.display()))
        }
        Export::Probs => {
            std::fs::create_dir_all(args.out).map_err(|e| CliError::io(args.out, e))?;
            let mut files = 0;
            for report in std::iter::once(&r.forward.front).chain(r.forward.back.as_ref()) {
                let extents = model.config.cpg.grid.extents(report.stage.grid_kind())?;
                let c: usize = extents.iter().product();
                for (k, probs) in report.probabilities.chunks(c).enumerate() {
                    let path = args.out.join(format!("{}_{k:03}.dprb", report.stage.prefix()));
                    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
                    write_probability_volume(&mut BufWriter::new(file), extents, &report.centers[k], probs)
                        .map_err(|e| CliError::io(&path, e))?;
                    files += 1;
                }
            }
            Ok(format!("export volumes={files} dir={}\n", args.out.display()))
        }
    }
}
