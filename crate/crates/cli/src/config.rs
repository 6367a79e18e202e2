//! Flat `key = value` configuration with `#` comments. Every key has a
//! default; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use deepicp_bench::{IcpConfig, PerturbConfig, SceneConfig};
use deepicp_net::model::DeepIcpConfig;
use deepicp_net::train::TrainConfig;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    Preset,
}

struct Key {
    name: &'static str,
    default: &'static str,
    kind: Kind,
    doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> Key {
    Key {
        name,
        default,
        kind,
        doc,
    }
}

const KEYS: &[Key] = &[
    key("model.preset", "toy", Kind::Preset, "network size: `toy` (a few thousand points) or `full`"),
    key("model.keypoints", "0", Kind::Int, "keypoints per stage; 0 keeps the preset's value"),
    key("model.seed", "0", Kind::Int, "parameter initialization seed"),
    key("loss.alpha", "0.6", Kind::Float, "weight of the generated-point loss against the pose loss"),
    key("train.learning_rate", "0.01", Kind::Float, "base learning rate"),
    key("train.decay_rate", "0.7", Kind::Float, "learning-rate factor per decay period"),
    key("train.decay_steps", "10000", Kind::Int, "decay period in steps"),
    key("train.max_epochs", "200", Kind::Int, "epochs per stage"),
    key("train.max_steps", "0", Kind::Int, "steps per stage; 0 runs max_epochs full epochs"),
    key("train.train_fraction", "0.8", Kind::Float, "fraction of pairs used for training"),
    key("train.cascade", "true", Kind::Bool, "train the back stage after the front stage"),
    key("train.seed", "0", Kind::Int, "shuffling, augmentation and dropout seed"),
    key("perturb.translation_range", "1.0", Kind::Float, "per-axis prior translation noise, meters"),
    key("perturb.rotation_range_deg", "1.0", Kind::Float, "per-axis prior rotation noise, degrees"),
    key("perturb.seed", "777", Kind::Int, "seed of evaluation priors; pair i uses seed + i"),
    key("scene.count", "50", Kind::Int, "number of synthetic pairs"),
    key("scene.seed", "0", Kind::Int, "seed of the first synthetic pair"),
    key("scene.extent", "32.0", Kind::Float, "side of the ground patch, meters"),
    key("scene.ground_density", "0.75", Kind::Float, "ground samples per square meter"),
    key("scene.surface_density", "8.0", Kind::Float, "object surface samples per square meter"),
    key("scene.poles", "6", Kind::Int, "pole count"),
    key("scene.boxes", "5", Kind::Int, "box count"),
    key("scene.trees", "4", Kind::Int, "tree count"),
    key("scene.dynamic_clusters", "2", Kind::Int, "car-sized boxes that move between frames"),
    key("scene.dynamic_displacement", "1.5", Kind::Float, "maximum displacement of moving boxes, meters"),
    key("scene.jitter", "0.02", Kind::Float, "per-point noise standard deviation, meters"),
    key("scene.viewpoint_translation", "2.0", Kind::Float, "maximum horizontal sensor motion, meters"),
    key("scene.viewpoint_yaw", "5.0", Kind::Float, "maximum yaw change, degrees"),
    key("scene.viewpoint_tilt", "1.0", Kind::Float, "maximum roll and pitch change, degrees"),
    key("icp.max_iter", "50", Kind::Int, "iteration cap"),
    key("icp.tolerance", "1e-6", Kind::Float, "stop when an update moves less than this"),
    key("icp.max_pair_dist", "2.0", Kind::Float, "pairs farther apart are rejected, meters"),
    key("pairs.frame_interval", "30", Kind::Int, "source frame spacing in pose sequences"),
    key("pairs.max_distance", "5.0", Kind::Float, "targets within this distance of a source, meters"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

fn check(key: &Key, value: &str) -> std::result::Result<(), String> {
    let ok = match key.kind {
        Kind::Float => value.parse::<f64>().map(|v| v.is_finite()).unwrap_or(false),
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Preset => matches!(value, "toy" | "full"),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("`{value}` is not a valid value for {}", key.name))
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: String| CliError::malformed(path, format!("line {}: {what}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, found `{line}`")))?;
            config.set(k.trim(), v.trim()).map_err(|e| bad(e.to_string()))?;
        }
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key = KEYS
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| CliError::Config(format!("unknown key `{name}`")))?;
        check(key, value).map_err(CliError::Config)?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    fn raw(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).expect("every key has a default")
    }

    pub fn float(&self, name: &str) -> f64 {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn int(&self, name: &str) -> usize {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.raw(name).parse().expect("validated on set")
    }

    pub fn flag(&self, name: &str) -> bool {
        self.raw(name) == "true"
    }

    /// Every key with its value and documentation, parseable by [`Config::parse`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "# {} (default {})", k.doc, k.default);
            let _ = writeln!(out, "{} = {}", k.name, self.raw(k.name));
        }
        out
    }

    pub fn model(&self) -> Result<DeepIcpConfig> {
        let mut m = match self.raw("model.preset") {
            "toy" => DeepIcpConfig::toy(),
            _ => DeepIcpConfig::default(),
        };
        let kp = self.int("model.keypoints");
        if kp > 0 {
            m.weighting.keypoints = kp;
        }
        m.seed = self.seed("model.seed");
        m.loss.alpha = self.float("loss.alpha");
        m.validate()?;
        Ok(m)
    }

    pub fn perturb(&self) -> PerturbConfig {
        PerturbConfig {
            translation_range: self.float("perturb.translation_range"),
            rotation_range_deg: self.float("perturb.rotation_range_deg"),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let steps = self.int("train.max_steps");
        let t = TrainConfig {
            learning_rate: self.float("train.learning_rate"),
            decay_rate: self.float("train.decay_rate"),
            decay_steps: self.int("train.decay_steps"),
            max_epochs: self.int("train.max_epochs"),
            max_steps: (steps > 0).then_some(steps),
            perturb: self.perturb(),
            train_fraction: self.float("train.train_fraction"),
            seed: self.seed("train.seed"),
            cascade: self.flag("train.cascade"),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.seed("scene.seed"),
            extent: self.float("scene.extent"),
            ground_density: self.float("scene.ground_density"),
            surface_density: self.float("scene.surface_density"),
            poles: self.int("scene.poles"),
            boxes: self.int("scene.boxes"),
            trees: self.int("scene.trees"),
            dynamic_clusters: self.int("scene.dynamic_clusters"),
            dynamic_displacement: self.float("scene.dynamic_displacement"),
            jitter: self.float("scene.jitter"),
            viewpoint_translation: self.float("scene.viewpoint_translation"),
            viewpoint_yaw: self.float("scene.viewpoint_yaw"),
            viewpoint_tilt: self.float("scene.viewpoint_tilt"),
        }
    }

    pub fn icp(&self) -> IcpConfig {
        IcpConfig {
            max_iter: self.int("icp.max_iter"),
            tolerance: self.float("icp.tolerance"),
            max_pair_dist: self.float("icp.max_pair_dist"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_section() {
        let c = Config::default();
        assert_eq!(c.model().unwrap(), DeepIcpConfig::toy());
        let t = c.train().unwrap();
        assert_eq!((t.learning_rate, t.decay_rate, t.decay_steps, t.max_epochs), (0.01, 0.7, 10_000, 200));
        assert_eq!(t.max_steps, None);
        assert_eq!(c.scene(), SceneConfig::default());
        assert_eq!(c.icp(), IcpConfig::default());
        assert_eq!(c.perturb(), PerturbConfig::default());
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# experiment\nloss.alpha = 1.0  # pure point loss\n\ntrain.max_steps=25\nmodel.keypoints = 8\n";
        let c = Config::parse(text, Path::new("c.cfg")).unwrap();
        assert_eq!(c.model().unwrap().loss.alpha, 1.0);
        assert_eq!(c.model().unwrap().weighting.keypoints, 8);
        assert_eq!(c.train().unwrap().max_steps, Some(25));
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_line() {
        let err = Config::parse("loss.alpha = 0.5\nlos.alpha = 0.5\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("los.alpha"), "{err}");
        assert!(Config::parse("train.cascade = yes", Path::new("c")).is_err());
        assert!(Config::parse("scene.poles = -1", Path::new("c")).is_err());
        assert!(Config::parse("just words", Path::new("c")).is_err());
        assert!(Config::parse("loss.alpha = 2", Path::new("c")).unwrap().model().is_err());
    }

    #[test]
    fn render_parses_back() {
        let mut c = Config::default();
        c.set("scene.count", "7").unwrap();
        c.set("model.preset", "full").unwrap();
        assert_eq!(Config::parse(&c.render(), Path::new("c")).unwrap(), c);
    }
}
