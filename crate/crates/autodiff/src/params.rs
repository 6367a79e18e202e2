use std::collections::BTreeMap;

use rand::Rng;

use crate::{AutodiffError, Result, Tensor};

#[derive(Debug, Clone)]
struct Entry {
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
    frozen: bool,
}

/// Named tensors with gradient accumulators, iterated in name order.
///
/// Non-trainable entries (batch-norm running statistics) live here too so a
/// checkpoint captures the full model state.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

/// Running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        let grad = vec![0.0; value.len()];
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad,
                trainable,
                frozen: false,
            },
        );
        Ok(())
    }

    /// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::filled(shape, value), true)
    }

    /// Registers `<prefix>.running_mean` (zeros) and `<prefix>.running_var` (ones).
    pub fn insert_running_stats(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        )?;
        self.insert(
            &format!("{prefix}.running_var"),
            Tensor::filled(&[channels], 1.0),
            false,
        )
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self
                .value(&format!("{prefix}.running_mean"))?
                .data()
                .to_vec(),
            var: self
                .value(&format!("{prefix}.running_var"))?
                .data()
                .to_vec(),
        })
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats) -> Result<()> {
        self.value_mut(&format!("{prefix}.running_mean"))?
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.value_mut(&format!("{prefix}.running_var"))?
            .data_mut()
            .copy_from_slice(&stats.var);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.entry(name).map(|e| e.grad.as_slice())
    }

    /// Trainable and not currently frozen.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries
            .get(name)
            .is_some_and(|e| e.trainable && !e.frozen)
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        for (a, b) in e.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// `(name, value, grad)` of every trainable, unfrozen parameter.
    pub(crate) fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &[f64])> {
        self.entries
            .iter_mut()
            .filter(|(_, e)| e.trainable && !e.frozen)
            .map(|(n, e)| (n.as_str(), &mut e.value, e.grad.as_slice()))
    }

    /// Overwrites values by name from `(name, tensor)` pairs; every stored
    /// entry must be supplied with a matching shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in values {
            let e = self.entries.get_mut(&name).ok_or_else(|| {
                AutodiffError::Checkpoint(format!("checkpoint has unknown parameter `{name}`"))
            })?;
            if e.value.shape() != t.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint {:?}",
                    e.value.shape(),
                    t.shape()
                )));
            }
            e.value = t;
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "checkpoint supplies {seen} of {} parameters",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }
}
