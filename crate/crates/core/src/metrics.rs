//! Evaluation metrics (A_t, A_avg, PD, HAcc) and report serialization.
//!
//! Accuracies are stored as fractions in [0,1]; the rendered table shows
//! percentages with one decimal.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    /// Top-1 accuracy over all seen classes (sample-weighted).
    pub acc: f64,
    /// Mean per-class accuracy over base-task classes.
    pub base_acc: f64,
    /// Mean per-class accuracy over classes of tasks t > 0; absent after
    /// the base task.
    pub new_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub per_task: Vec<TaskMetrics>,
    pub a_avg: f64,
    pub pd: f64,
    pub hacc: Option<f64>,
}

/// Arithmetic mean of the per-task accuracies.
pub fn a_avg(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(CoreError::contract("a_avg of empty list"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Performance dropping rate A_0 - A_T.
pub fn pd(a0: f64, a_t: f64) -> f64 {
    a0 - a_t
}

/// Harmonic accuracy 2*A_o*A_n / (A_o + A_n); defined as 0 at 0/0.
pub fn hacc(a_o: f64, a_n: f64) -> f64 {
    if a_o + a_n == 0.0 {
        0.0
    } else {
        2.0 * a_o * a_n / (a_o + a_n)
    }
}

impl MetricsReport {
    pub fn from_task_metrics(
        seed: u64,
        config_hash: String,
        per_task: Vec<TaskMetrics>,
    ) -> Result<Self> {
        if per_task.is_empty() {
            return Err(CoreError::contract("report needs at least the base task"));
        }
        let accs: Vec<f64> = per_task.iter().map(|t| t.acc).collect();
        let a_avg = a_avg(&accs)?;
        let pd = pd(accs[0], *accs.last().unwrap());
        let last = per_task.last().unwrap();
        let hacc = last.new_acc.map(|an| hacc(last.base_acc, an));
        Ok(MetricsReport {
            seed,
            config_hash,
            per_task,
            a_avg,
            pd,
            hacc,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,acc,base_acc,new_acc\n");
        for t in &self.per_task {
            let new = t.new_acc.map_or(String::new(), |v| format!("{v}"));
            out.push_str(&format!("{},{},{},{}\n", t.task, t.acc, t.base_acc, new));
        }
        out
    }

    /// Human-readable table, percentages at one decimal.
    pub fn render_table(&self) -> String {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        let mut out = String::new();
        out.push_str("task  A_t    A_o    A_n\n");
        for t in &self.per_task {
            out.push_str(&format!(
                "{:<5} {:<6} {:<6} {}\n",
                t.task,
                pct(t.acc),
                pct(t.base_acc),
                t.new_acc.map_or("-".to_string(), pct),
            ));
        }
        out.push_str(&format!(
            "A_avg {}  PD {}  HAcc {}\n",
            pct(self.a_avg),
            pct(self.pd),
            self.hacc.map_or("-".to_string(), pct),
        ));
        out
    }
}

/// Write report.json and curve.csv into `out_dir`.
pub fn emit(report: &MetricsReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("curve.csv");
    std::fs::write(&json_path, report.to_json())?;
    std::fs::write(&csv_path, report.to_csv())?;
    Ok((json_path, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, RootSeed};

    #[test]
    fn a_avg_on_published_accuracy_row() {
        let row = [92.2, 90.7, 90.0, 88.7, 88.7, 88.2, 88.2, 87.8, 86.7];
        let avg = a_avg(&row).unwrap();
        assert!((avg - 89.0).abs() <= 0.05, "avg={avg}");
        assert!((pd(row[0], row[8]) - 5.5).abs() <= 0.05);
    }

    #[test]
    fn a_avg_edge_cases() {
        assert_eq!(a_avg(&[0.42]).unwrap(), 0.42);
        assert!((a_avg(&[0.7, 0.7, 0.7]).unwrap() - 0.7).abs() < 1e-12);
        assert!(a_avg(&[]).is_err());
    }

    #[test]
    fn pd_displayed_value_arithmetic() {
        assert_eq!(pd(0.5, 0.5), 0.0);
        // displayed-value arithmetic: 94.2 - 67.1 = 27.1 (tables may round)
        assert!((pd(94.2, 67.1) - 27.1).abs() < 1e-9);
        assert_eq!(pd(0.3, 0.4), -pd(0.4, 0.3));
    }

    #[test]
    fn hacc_identities() {
        assert!((hacc(0.6, 0.6) - 0.6).abs() < 1e-12);
        assert_eq!(hacc(0.9, 0.0), 0.0);
        assert_eq!(hacc(0.0, 0.0), 0.0);
        assert!((hacc(0.9, 0.8) - 0.8471).abs() < 5e-5);
    }

    #[test]
    fn hacc_harmonic_mean_inequality_property() {
        let mut s = RootSeed(3).stream(&[tag::SPLIT, 99]);
        for _ in 0..1000 {
            let a = s.uniform(0.0, 1.0);
            let b = s.uniform(0.0, 1.0);
            let h = hacc(a, b);
            // harmonic-mean sandwich: min <= H <= arithmetic mean
            assert!(h >= a.min(b) - 1e-12);
            assert!(h <= (a + b) / 2.0 + 1e-12);
            // equality with the arithmetic mean only at a == b
            if (a - b).abs() > 1e-3 {
                assert!(h < (a + b) / 2.0);
            }
            if (a - b).abs() < 1e-15 {
                assert!((h - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn a_avg_bounded_and_permutation_invariant() {
        let mut s = RootSeed(4).stream(&[tag::SPLIT, 98]);
        for _ in 0..100 {
            let xs: Vec<f64> = (0..7).map(|_| s.uniform(0.0, 1.0)).collect();
            let avg = a_avg(&xs).unwrap();
            let lo = xs.iter().cloned().fold(f64::MAX, f64::min);
            let hi = xs.iter().cloned().fold(f64::MIN, f64::max);
            assert!(avg >= lo - 1e-12 && avg <= hi + 1e-12);
            let mut rev = xs.clone();
            rev.reverse();
            assert!((a_avg(&rev).unwrap() - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn report_roundtrip_and_csv_shape() {
        let per_task = vec![
            TaskMetrics {
                task: 0,
                acc: 0.9,
                base_acc: 0.9,
                new_acc: None,
            },
            TaskMetrics {
                task: 1,
                acc: 0.85,
                base_acc: 0.88,
                new_acc: Some(0.7),
            },
        ];
        let r = MetricsReport::from_task_metrics(5, "abc".into(), per_task).unwrap();
        assert!((r.a_avg - 0.875).abs() < 1e-12);
        assert!((r.pd - 0.05).abs() < 1e-12);
        assert!((r.hacc.unwrap() - hacc(0.88, 0.7)).abs() < 1e-12);
        let parsed: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed.per_task, r.per_task);
        assert!((parsed.a_avg - r.a_avg).abs() < 1e-12);
        assert!((parsed.pd - r.pd).abs() < 1e-12);
        // parse -> emit is a fixed point, which is what file determinism needs
        assert_eq!(parsed.to_json(), serde_json::from_str::<MetricsReport>(&parsed.to_json()).map(|p| p.to_json()).unwrap());
        // header + one row per task
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    #[test]
    fn degenerate_single_task_report() {
        let r = MetricsReport::from_task_metrics(
            1,
            "h".into(),
            vec![TaskMetrics {
                task: 0,
                acc: 0.8,
                base_acc: 0.8,
                new_acc: None,
            }],
        )
        .unwrap();
        assert_eq!(r.pd, 0.0);
        assert!(r.hacc.is_none());
        assert_eq!(r.a_avg, 0.8);
    }

    #[test]
    fn emit_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricsReport::from_task_metrics(
            2,
            "h".into(),
            vec![TaskMetrics {
                task: 0,
                acc: 0.5,
                base_acc: 0.5,
                new_acc: None,
            }],
        )
        .unwrap();
        let (j1, c1) = emit(&r, &dir.path().join("a")).unwrap();
        let (j2, c2) = emit(&r, &dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(j1).unwrap(), std::fs::read(j2).unwrap());
        assert_eq!(std::fs::read(c1).unwrap(), std::fs::read(c2).unwrap());
    }
}
