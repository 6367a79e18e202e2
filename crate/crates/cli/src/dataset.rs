//! On-disk datasets.
//!
//! Two layouts are recognized under a root directory:
//! - pair lists (`pairs.txt`), written by `synth`: one line per pair,
//!   `id source target` followed by the twelve ground-truth numbers, with
//!   frame paths relative to the root;
//! - pose sequences (`poses.txt` plus `velodyne/NNNNNN.bin`), from which
//!   pairs are enumerated by frame interval and distance.

use std::path::{Path, PathBuf};

use deepicp_bench::{perturb_seeded, EvalPair, Scene};
use deepicp_core::{PointCloud, RigidTransform};

use crate::config::Config;
use crate::frame::{read_frame_bin, write_frame_bin};
use crate::pairs::enumerate_pairs;
use crate::ply::read_ply;
use crate::poses::{format_pose, parse_pose_line, read_poses};
use crate::{CliError, Result};

pub const PAIR_LIST: &str = "pairs.txt";
pub const POSE_FILE: &str = "poses.txt";
pub const FRAME_DIR: &str = "velodyne";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub ground_truth: RigidTransform,
}

impl DatasetPair {
    pub fn load(&self) -> Result<(PointCloud, PointCloud)> {
        Ok((read_cloud(&self.source)?, read_cloud(&self.target)?))
    }
}

/// Reads a `.ply` export or a frame binary (anything else).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        Ok(read_ply(path)?.0)
    } else {
        read_frame_bin(path)
    }
}

/// Writes scenes as frame binaries plus a pair list.
pub fn write_synthetic(root: &Path, scenes: &[Scene]) -> Result<Vec<DatasetPair>> {
    let frames = root.join(FRAME_DIR);
    std::fs::create_dir_all(&frames).map_err(|e| CliError::io(&frames, e))?;
    let mut list = String::from("# id source target ground-truth(row-major 3x4)\n");
    let mut pairs = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("{i:04}");
        let rel_s = format!("{FRAME_DIR}/{id}_source.bin");
        let rel_t = format!("{FRAME_DIR}/{id}_target.bin");
        write_frame_bin(&scene.source, &root.join(&rel_s))?;
        write_frame_bin(&scene.target, &root.join(&rel_t))?;
        list.push_str(&format!("{id} {rel_s} {rel_t} {}\n", format_pose(&scene.ground_truth)));
        pairs.push(DatasetPair {
            id,
            source: root.join(rel_s),
            target: root.join(rel_t),
            ground_truth: scene.ground_truth,
        });
    }
    let path = root.join(PAIR_LIST);
    std::fs::write(&path, list).map_err(|e| CliError::io(&path, e))?;
    Ok(pairs)
}

fn parse_pair_list(root: &Path, path: &Path) -> Result<Vec<DatasetPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut words = line.splitn(4, char::is_whitespace);
        let (Some(id), Some(s), Some(t), Some(rest)) = (words.next(), words.next(), words.next(), words.next()) else {
            return Err(CliError::malformed(path, format!("line {}: expected `id source target pose`", i + 1)));
        };
        let pose = parse_pose_line(rest, i + 1, path)?;
        pairs.push(DatasetPair {
            id: id.to_string(),
            source: root.join(s),
            target: root.join(t),
            ground_truth: pose.transform,
        });
    }
    Ok(pairs)
}

/// Pairs under `root` in either layout.
pub fn load_dataset(root: &Path, config: &Config) -> Result<Vec<DatasetPair>> {
    let list = root.join(PAIR_LIST);
    if list.is_file() {
        return parse_pair_list(root, &list);
    }
    let poses_path = root.join(POSE_FILE);
    if !poses_path.is_file() {
        return Err(CliError::Usage(format!(
            "{} has neither {PAIR_LIST} nor {POSE_FILE}",
            root.display()
        )));
    }
    let poses: Vec<RigidTransform> = read_poses(&poses_path)?.into_iter().map(|p| p.transform).collect();
    let frame = |i: usize| root.join(FRAME_DIR).join(format!("{i:06}.bin"));
    let pairs = enumerate_pairs(
        &poses,
        config.int("pairs.frame_interval"),
        config.float("pairs.max_distance"),
    );
    Ok(pairs
        .into_iter()
        .map(|p| DatasetPair {
            id: format!("{:06}-{:06}", p.source, p.target),
            source: frame(p.source),
            target: frame(p.target),
            ground_truth: p.ground_truth,
        })
        .collect())
}

/// Evaluation problems: pair `i` gets the prior drawn with seed
/// `perturb.seed + i`.
pub fn eval_pairs(pairs: &[DatasetPair], config: &Config) -> Result<Vec<EvalPair>> {
    let base = config.seed("perturb.seed");
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (source, target) = p.load()?;
            Ok(EvalPair {
                id: p.id.clone(),
                source,
                target,
                prior: perturb_seeded(&p.ground_truth, &config.perturb(), base + i as u64)?,
                ground_truth: p.ground_truth,
            })
        })
        .collect()
}
