use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("accuracy undefined: no images")]
    NoImages,
    #[error("detection rate undefined: no CG images")]
    NoPositives,
}

/// Confusion counts with CG as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub n_tp: usize,
    pub n_tn: usize,
    pub n_fp: usize,
    pub n_fn: usize,
}

impl Confusion {
    pub fn from_decisions(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (truth, predicted) in pairs {
            match (truth, predicted) {
                (Label::Cg, Label::Cg) => c.n_tp += 1,
                (Label::Natural, Label::Natural) => c.n_tn += 1,
                (Label::Natural, Label::Cg) => c.n_fp += 1,
                (Label::Cg, Label::Natural) => c.n_fn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.n_tp + self.n_tn + self.n_fp + self.n_fn
    }

    /// `(TP + TN) / N`.
    pub fn accuracy(&self) -> Result<f64, MetricError> {
        match self.total() {
            0 => Err(MetricError::NoImages),
            n => Ok((self.n_tp + self.n_tn) as f64 / n as f64),
        }
    }

    /// `TP / (TP + FN)`.
    pub fn detection_rate(&self) -> Result<f64, MetricError> {
        match self.n_tp + self.n_fn {
            0 => Err(MetricError::NoPositives),
            p => Ok(self.n_tp as f64 / p as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Before => "before",
            Phase::After => "after",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub label: Label,
    pub score: f64,
    pub predicted: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub phase: Phase,
    pub detector: String,
    #[serde(flatten)]
    pub counts: Confusion,
    pub accuracy: f64,
    pub detection_rate: f64,
    pub note: String,
    pub scores: Vec<ImageScore>,
}

impl MetricsReport {
    /// Builds a report from per-image scores; both metrics must be defined.
    pub fn from_scores(
        scenario: &str,
        phase: Phase,
        detector: &str,
        note: &str,
        scores: Vec<ImageScore>,
    ) -> Result<Self, MetricError> {
        let counts = Confusion::from_decisions(scores.iter().map(|s| (s.label, s.predicted)));
        Ok(MetricsReport {
            scenario: scenario.to_string(),
            phase,
            detector: detector.to_string(),
            accuracy: counts.accuracy()?,
            detection_rate: counts.detection_rate()?,
            counts,
            note: note.to_string(),
            scores,
        })
    }
}

pub const CSV_HEADER: &str = "scenario,phase,detector,n_tp,n_tn,n_fp,n_fn,accuracy,detection_rate";

/// One CSV row per report; numbers use the same shortest round-trip form as the JSON.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let c = r.counts;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.phase,
            r.detector,
            c.n_tp,
            c.n_tn,
            c.n_fp,
            c.n_fn,
            serde_json::to_string(&r.accuracy).unwrap(),
            serde_json::to_string(&r.detection_rate).unwrap()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios() {
        let c = Confusion { n_tp: 5, n_tn: 5, n_fp: 0, n_fn: 0 };
        assert_eq!((c.accuracy(), c.detection_rate()), (Ok(1.0), Ok(1.0)));
        let c = Confusion { n_tp: 0, n_tn: 0, n_fp: 4, n_fn: 6 };
        assert_eq!((c.accuracy(), c.detection_rate()), (Ok(0.0), Ok(0.0)));
        assert_eq!(Confusion::default().accuracy(), Err(MetricError::NoImages));
        assert_eq!(Confusion { n_tn: 3, ..Default::default() }.detection_rate(), Err(MetricError::NoPositives));
    }

    #[test]
    fn csv_matches_json_numbers() {
        let scores = vec![
            ImageScore { id: "a".into(), label: Label::Cg, score: 0.2, predicted: Label::Cg },
            ImageScore { id: "b".into(), label: Label::Cg, score: 0.7, predicted: Label::Natural },
            ImageScore { id: "c".into(), label: Label::Natural, score: 0.7, predicted: Label::Natural },
        ];
        let r = MetricsReport::from_scores("1", Phase::After, "flda", "", scores).unwrap();
        let json: serde_json::Value = serde_json::to_value(&r).unwrap();
        let csv = reports_csv(&[r]);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[7], json["accuracy"].to_string());
        assert_eq!(row[8], json["detection_rate"].to_string());
        assert_eq!(json["n_fn"], 1);
    }
}
