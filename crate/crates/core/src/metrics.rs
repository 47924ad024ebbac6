//! Per-run learning curves and their CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "iter,transition_samples,objective,mean_return,stderr_return";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub transition_samples: u64,
    pub objective: f64,
    pub mean_return: f64,
    pub stderr_return: f64,
    /// Mean diagonal of the estimated noise covariance per demonstrator;
    /// empty for methods without expertise parameters.
    pub expertise: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
}

/// Shortest round-trip representation; `NaN` for missing values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:?}")
    }
}

impl RunMetrics {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.iter,
                r.transition_samples,
                fmt_f64(r.objective),
                fmt_f64(r.mean_return),
                fmt_f64(r.stderr_return)
            );
        }
        s
    }

    /// `iter,k,mean_diag` rows; header only when no expertise is tracked.
    pub fn expertise_csv(&self) -> String {
        let mut s = String::from("iter,k,mean_diag\n");
        for r in &self.rows {
            for (k, v) in r.expertise.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", r.iter, k + 1, fmt_f64(*v));
            }
        }
        s
    }
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TrainStatus {
    Completed,
    /// The objective became non-finite; parameters are the last finite ones.
    Diverged { iter: usize, reason: String },
}
