use std::fmt::{Display, Write as _};

use deepicp_core::{PointCloud, RegistrationError, RigidTransform};

use crate::{BenchError, Result};

/// One registration problem with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub source: PointCloud,
    pub target: PointCloud,
    pub prior: RigidTransform,
    pub ground_truth: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub entries: Vec<(String, RegistrationError)>,
    pub mean_angular: f64,
    pub max_angular: f64,
    pub mean_translational: f64,
    pub max_translational: f64,
}

impl EvalReport {
    /// Aggregates per-pair errors. Sums run over sorted values so the result
    /// does not depend on the order of `entries`.
    pub fn from_entries(method: &str, entries: Vec<(String, RegistrationError)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(BenchError::EmptyEvaluation);
        }
        let stats = |values: Vec<f64>| {
            let mut v = values;
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (mean, *v.last().expect("non-empty"))
        };
        let (mean_angular, max_angular) = stats(entries.iter().map(|e| e.1.angular).collect());
        let (mean_translational, max_translational) = stats(entries.iter().map(|e| e.1.translational).collect());
        Ok(Self {
            method: method.to_string(),
            entries,
            mean_angular,
            max_angular,
            mean_translational,
            max_translational,
        })
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "method", "pairs", "ang mean(°)", "ang max(°)", "trans mean(m)", "trans max(m)"
        );
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
            self.method,
            self.entries.len(),
            self.mean_angular,
            self.max_angular,
            self.mean_translational,
            self.max_translational
        );
        out
    }

    /// `method,pair,angular_deg,translational_m` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,pair,angular_deg,translational_m\n");
        for (id, err) in &self.entries {
            let _ = writeln!(out, "{},{},{:.9},{:.9}", self.method, id, err.angular, err.translational);
        }
        out
    }
}

/// Runs `method` on every pair and aggregates the errors against ground
/// truth. The first failing pair aborts the evaluation.
pub fn evaluate<F, E>(method_label: &str, pairs: &[EvalPair], mut method: F) -> Result<EvalReport>
where
    F: FnMut(&EvalPair) -> std::result::Result<RigidTransform, E>,
    E: Display,
{
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let estimate = method(pair).map_err(|e| BenchError::Method {
            id: pair.id.clone(),
            reason: e.to_string(),
        })?;
        entries.push((pair.id.clone(), RegistrationError::between(&estimate, &pair.ground_truth)));
    }
    EvalReport::from_entries(method_label, entries)
}
