//! Evaluation reports: per-class accuracy, confusion, gates and model cost.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub id: String,
    pub g_s: f64,
    pub g_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Percent correct per true class; `None` when the class has no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Percent correct over all samples (confusion trace over total).
    pub average_accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
    /// Percent correct of each enabled stream on its own.
    pub stream_accuracy: BTreeMap<String, f64>,
    pub gates: Vec<GateRecord>,
    /// Per-sample FLOPs.
    pub flops: u64,
    pub params: u64,
}

impl EvalReport {
    pub fn from_predictions(class_names: &[String], labels: &[usize], preds: &[usize], flops: u64, params: u64) -> Self {
        let c = class_names.len();
        let mut confusion = vec![vec![0usize; c]; c];
        for (&y, &p) in labels.iter().zip(preds) {
            confusion[y][p] += 1;
        }
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| 100.0 * row[i] as f64 / n as f64)
            })
            .collect();
        let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
        let average_accuracy = if labels.is_empty() { 0.0 } else { 100.0 * trace as f64 / labels.len() as f64 };
        Self {
            class_names: class_names.to_vec(),
            per_class_accuracy,
            average_accuracy,
            confusion,
            samples: labels.len(),
            stream_accuracy: BTreeMap::new(),
            gates: Vec::new(),
            flops,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Mean gate pair over the reported samples.
    pub fn mean_gates(&self) -> Option<[f64; 2]> {
        let n = self.gates.len();
        (n > 0).then(|| {
            let (s, r) = self.gates.iter().fold((0.0, 0.0), |(s, r), g| (s + g.g_s, r + g.g_r));
            [s / n as f64, r / n as f64]
        })
    }

    /// One-row table: per-class accuracy, average, FLOPs and parameters.
    pub fn table(&self) -> String {
        let mut head: Vec<String> = self.class_names.clone();
        head.extend(["Avg.", "FLOPs", "Params."].map(String::from));
        let mut row: Vec<String> = self
            .per_class_accuracy
            .iter()
            .map(|a| a.map_or("-".to_string(), |a| format!("{a:.2}")))
            .collect();
        row.push(format!("{:.2}", self.average_accuracy));
        row.push(human(self.flops as f64));
        row.push(human(self.params as f64));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            format!("| {} |", parts.join(" | "))
        };
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        let mut out = String::new();
        writeln!(out, "{}", line(&head)).unwrap();
        writeln!(out, "|-{}-|", rule.join("-|-")).unwrap();
        writeln!(out, "{}", line(&row)).unwrap();
        out
    }
}

fn human(x: f64) -> String {
    match x {
        x if x >= 1e9 => format!("{:.2}G", x / 1e9),
        x if x >= 1e6 => format!("{:.2}M", x / 1e6),
        x if x >= 1e3 => format!("{:.2}K", x / 1e3),
        x => format!("{x}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        ["QR Code", "Cash", "Evade", "Swipe", "Tap"].map(String::from).to_vec()
    }

    #[test]
    fn accuracy_matches_trace() {
        let r = EvalReport::from_predictions(&names(), &[0, 0, 1, 3, 4, 4], &[0, 1, 1, 3, 3, 4], 1_500_000, 2_000);
        assert!((r.average_accuracy - 400.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.per_class_accuracy[2], None);
        assert_eq!(r.per_class_accuracy[0], Some(50.0));
        let t = r.table();
        let head: Vec<&str> = t.lines().next().unwrap().split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
        assert_eq!(head, ["QR Code", "Cash", "Evade", "Swipe", "Tap", "Avg.", "FLOPs", "Params."]);
        assert!(t.contains("1.50M") && t.contains("2.00K"));
    }

    #[test]
    fn json_round_trip_is_byte_equal() {
        let mut r = EvalReport::from_predictions(&names(), &[0, 1, 2], &[0, 2, 2], 10, 20);
        r.gates.push(GateRecord { id: "a".into(), g_s: 0.1 + 0.2, g_r: 1.0 - (0.1 + 0.2) });
        let s = r.to_json();
        assert_eq!(EvalReport::from_json(&s).unwrap().to_json(), s);
    }
}
