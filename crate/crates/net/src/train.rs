//! Staged training: the front stage with the shared extractor first, then
//! the back stage with everything else frozen.

use std::fmt::Write as _;

use deepicp_autodiff::{Adam, AdamConfig, Graph};
use deepicp_bench::{perturb, PerturbConfig};
use deepicp_core::RigidTransform;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::loss::{combined_loss, ground_truth_targets, loss1, loss2};
use crate::model::{DeepIcp, PreparedCloud, Stage};
use crate::{Mode, NetError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub max_epochs: usize,
    /// Optimizer steps per stage; `None` runs `max_epochs` full epochs.
    pub max_steps: Option<usize>,
    pub perturb: PerturbConfig,
    /// Fraction of pairs used for training; the rest validate.
    pub train_fraction: f64,
    pub seed: u64,
    /// Train the back stage after the front stage.
    pub cascade: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            decay_rate: 0.7,
            decay_steps: 10_000,
            max_epochs: 200,
            max_steps: None,
            perturb: PerturbConfig::default(),
            train_fraction: 0.8,
            seed: 0,
            cascade: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.decay_rate > 0.0) || self.decay_steps == 0 {
            return Err(NetError::Config(
                "learning rate, decay rate and decay steps must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(NetError::Config(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        self.perturb
            .validate()
            .map_err(|e| NetError::Config(e.to_string()))
    }

    /// `lr · decay^(step / decay_steps)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }
}

/// One training pair with cached geometry.
pub struct TrainSample {
    pub id: String,
    pub source: PreparedCloud,
    pub target: PreparedCloud,
    pub ground_truth: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
}

impl LogEntry {
    /// `stage step lr loss loss1 loss2`, whitespace separated.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {:.6e} {:.9} {:.9} {:.9}",
            self.stage.prefix(),
            self.step,
            self.lr,
            self.loss,
            self.loss1,
            self.loss2
        )
    }
}

pub fn render_log(entries: &[LogEntry]) -> String {
    let mut out = String::from("# stage step lr loss loss1 loss2\n");
    for e in entries {
        let _ = writeln!(out, "{}", e.to_line());
    }
    out
}

/// Deterministic shuffled split of `n` items into (train, validation)
/// index lists, both non-empty when `n ≥ 2`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cut = ((n as f64) * train_fraction).round() as usize;
    if n >= 2 {
        cut = cut.clamp(1, n - 1);
    }
    let validation = order.split_off(cut.min(n));
    (order, validation)
}

/// Trains one stage; the other parameters stay frozen. `on_step` sees every
/// log entry as it is produced.
pub fn train_stage(
    model: &mut DeepIcp,
    samples: &[TrainSample],
    config: &TrainConfig,
    stage: Stage,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<Vec<LogEntry>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(NetError::InvalidArgument("training set is empty".into()));
    }
    let stage_seed = config.seed ^ if stage == Stage::Back { 0xbac4 } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stage_seed ^ 0xd509);

    for prefix in ["fe.", "front.", "back."] {
        model.store.set_frozen(prefix, true);
    }
    match stage {
        Stage::Front => {
            model.store.set_frozen("fe.", false);
            model.store.set_frozen("front.", false);
        }
        Stage::Back => model.store.set_frozen("back.", false),
    }

    let total_steps = config
        .max_steps
        .unwrap_or(config.max_epochs * samples.len());
    let mut adam = Adam::new(AdamConfig::default());
    let mut history = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    'epochs: for _ in 0..config.max_epochs.max(1) {
        order.shuffle(&mut rng);
        for &i in &order {
            if step >= total_steps {
                break 'epochs;
            }
            let sample = &samples[i];
            let prior = perturb(&sample.ground_truth, &config.perturb, &mut rng)
                .map_err(|e| NetError::Config(e.to_string()))?;
            let lr = config.learning_rate_at(step);
            let entry = train_step(
                model,
                sample,
                &prior,
                stage,
                lr,
                step,
                &mut adam,
                &mut dropout_rng,
            )?;
            on_step(&entry);
            history.push(entry);
            step += 1;
        }
        if config.max_steps.is_none() && step >= total_steps {
            break;
        }
    }
    for prefix in ["fe.", "front.", "back."] {
        model.store.set_frozen(prefix, false);
    }
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut DeepIcp,
    sample: &TrainSample,
    prior: &RigidTransform,
    stage: Stage,
    lr: f64,
    step: usize,
    adam: &mut Adam,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LogEntry> {
    let mut g = Graph::new();
    let (out, alpha_cfg) = match stage {
        Stage::Front => {
            let mut mode = Mode::Train(dropout_rng);
            let fs = model.features(&mut g, &sample.source, &mut mode)?;
            let ft = model.features(&mut g, &sample.target, &mut mode)?;
            let out = model.stage(
                &mut g,
                Stage::Front,
                &sample.source,
                fs,
                &sample.target,
                ft,
                prior,
                true,
            )?;
            (out, model.config.loss)
        }
        Stage::Back => {
            let fs = model.features(&mut g, &sample.source, &mut Mode::Infer)?;
            let ft = model.features(&mut g, &sample.target, &mut Mode::Infer)?;
            let front = model.stage(
                &mut g,
                Stage::Front,
                &sample.source,
                fs,
                &sample.target,
                ft,
                prior,
                false,
            )?;
            let front_estimate = front.transform(&g)?;
            let out = model.stage(
                &mut g,
                Stage::Back,
                &sample.source,
                fs,
                &sample.target,
                ft,
                &front_estimate,
                true,
            )?;
            (out, model.config.loss)
        }
    };
    let truth = ground_truth_targets(&sample.ground_truth, &out.keypoints.positions);
    let l1 = loss1(&mut g, out.generated, &truth)?;
    let l2 = loss2(&mut g, &out.pose, &out.keypoints.positions, &truth)?;
    let loss = combined_loss(&mut g, l1, l2, &alpha_cfg)?;
    let (lv, l1v, l2v) = (g.value(loss).item(), g.value(l1).item(), g.value(l2).item());
    if !lv.is_finite() {
        return Err(NetError::NonFiniteLoss {
            step,
            snapshot: format!(
                "stage {} sample {} loss1 {l1v} loss2 {l2v} prior translation {:?} empty windows {}",
                stage.prefix(),
                sample.id,
                prior.translation().as_slice(),
                out.empty_windows
            ),
        });
    }
    model.store.zero_grads();
    g.backward(loss, &mut model.store)?;
    adam.step(&mut model.store, lr);
    Ok(LogEntry {
        stage,
        step,
        lr,
        loss: lv,
        loss1: l1v,
        loss2: l2v,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub front: Vec<LogEntry>,
    pub back: Vec<LogEntry>,
}

impl TrainOutcome {
    pub fn history(&self) -> Vec<LogEntry> {
        self.front.iter().chain(&self.back).copied().collect()
    }
}

/// Front stage, then (if configured) the back stage with the front frozen.
pub fn train(
    model: &mut DeepIcp,
    samples: &[TrainSample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    let front = train_stage(model, samples, config, Stage::Front, &mut on_step)?;
    let back = if config.cascade {
        train_stage(model, samples, config, Stage::Back, &mut on_step)?
    } else {
        Vec::new()
    };
    Ok(TrainOutcome { front, back })
}
