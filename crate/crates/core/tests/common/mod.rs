//! Independent recounts shared by the eval and acceptance targets.

#![allow(dead_code)]

use naturalize_core::eval::{reports_csv, ImageScore, MetricsReport, Phase};
use naturalize_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Accuracy and detection rate recounted from per-image labels and decisions.
pub fn recount(scores: &[ImageScore]) -> (f64, f64) {
    let mut correct = 0u32;
    let mut cg = 0u32;
    let mut caught = 0u32;
    for s in scores {
        if s.label == s.predicted {
            correct += 1;
        }
        if s.label == Label::Cg {
            cg += 1;
            if s.predicted == Label::Cg {
                caught += 1;
            }
        }
    }
    (correct as f64 / scores.len() as f64, caught as f64 / cg as f64)
}

/// True when the report's numbers, and their JSON and CSV renderings, equal the recount exactly.
pub fn report_matches_recount(r: &MetricsReport) -> bool {
    let (acc, det) = recount(&r.scores);
    let json: serde_json::Value = serde_json::to_value(r).unwrap();
    let csv = reports_csv(std::slice::from_ref(r));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    r.accuracy == acc
        && r.detection_rate == det
        && json["accuracy"].as_f64() == Some(acc)
        && json["detection_rate"].as_f64() == Some(det)
        && row[7].parse::<f64>().ok() == Some(acc)
        && row[8].parse::<f64>().ok() == Some(det)
}

/// Random labeled scores thresholded at a random cut, with at least one CG image.
pub fn random_scores(seed: u64) -> Vec<ImageScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..300);
    let threshold: f64 = rng.random();
    let mut v: Vec<ImageScore> = (0..n)
        .map(|i| {
            let label = if rng.random_bool(0.5) { Label::Cg } else { Label::Natural };
            let score: f64 = rng.random();
            let predicted = if score >= threshold { Label::Natural } else { Label::Cg };
            ImageScore { id: format!("img{i}"), label, score, predicted }
        })
        .collect();
    if v.iter().all(|s| s.label == Label::Natural) {
        v[0].label = Label::Cg;
    }
    v
}

/// Runs `configs` random confusion configurations; returns how many matched.
pub fn metric_oracle(configs: u64) -> u64 {
    (0..configs)
        .filter(|&seed| {
            let scores = random_scores(seed);
            let r = MetricsReport::from_scores("oracle", Phase::After, "random", "", scores).unwrap();
            report_matches_recount(&r)
        })
        .count() as u64
}
