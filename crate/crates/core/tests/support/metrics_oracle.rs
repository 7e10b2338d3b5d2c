//! First-principles recounts of the evaluation metrics, test-only.
//! Everything here is written as a direct transcription of the rate
//! definitions, with no shared code or cleverness, so disagreement
//! with the library implicates the library.

#![allow(dead_code)]

use psmmlab_core::metrics::{PadLabel, ScoredSample};

pub fn naive_apcer(samples: &[ScoredSample], threshold: f64) -> f64 {
    let attacks: Vec<_> = samples.iter().filter(|s| s.label == PadLabel::Attack).collect();
    let accepted = attacks.iter().filter(|s| s.score >= threshold).count();
    accepted as f64 / attacks.len() as f64
}

pub fn naive_bpcer(samples: &[ScoredSample], threshold: f64) -> f64 {
    let bona = samples.iter().filter(|s| s.label == PadLabel::BonaFide).count();
    let rejected = samples
        .iter()
        .filter(|s| s.label == PadLabel::BonaFide && s.score < threshold)
        .count();
    rejected as f64 / bona as f64
}

pub fn naive_tpr(samples: &[ScoredSample], threshold: f64) -> f64 {
    let bona = samples.iter().filter(|s| s.label == PadLabel::BonaFide).count();
    let accepted = samples
        .iter()
        .filter(|s| s.label == PadLabel::BonaFide && s.score >= threshold)
        .count();
    accepted as f64 / bona as f64
}

/// Max per-instrument APCER; first name in ascending order wins ties.
pub fn naive_worst_pai(samples: &[ScoredSample], threshold: f64) -> (f64, String) {
    let mut names: Vec<String> = samples
        .iter()
        .filter(|s| s.label == PadLabel::Attack)
        .map(|s| s.pai.clone().unwrap_or_else(|| "untagged".to_string()))
        .collect();
    names.sort();
    names.dedup();
    let mut best: Option<(f64, String)> = None;
    for name in names {
        let group: Vec<_> = samples
            .iter()
            .filter(|s| {
                s.label == PadLabel::Attack
                    && s.pai.clone().unwrap_or_else(|| "untagged".to_string()) == name
            })
            .collect();
        let accepted = group.iter().filter(|s| s.score >= threshold).count();
        let rate = accepted as f64 / group.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| rate > *b) {
            best = Some((rate, name));
        }
    }
    best.expect("at least one attack")
}

/// Candidate thresholds: one above every score, then each distinct
/// score descending.
pub fn naive_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut out = vec![f64::INFINITY];
    out.extend(scores);
    out
}

pub fn naive_roc(samples: &[ScoredSample]) -> Vec<(f64, f64, f64)> {
    naive_thresholds(samples)
        .into_iter()
        .map(|t| (t, naive_apcer(samples, t), naive_tpr(samples, t)))
        .collect()
}

pub fn naive_tpr_at_fpr(samples: &[ScoredSample], target: f64) -> f64 {
    naive_roc(samples)
        .into_iter()
        .filter(|&(_, fpr, _)| fpr <= target)
        .map(|(_, _, tpr)| tpr)
        .fold(0.0, f64::max)
}

/// (threshold, fpr, fnr, eer); ties go to the lower threshold.
pub fn naive_eer(samples: &[ScoredSample]) -> (f64, f64, f64, f64) {
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for (t, fpr, tpr) in naive_roc(samples) {
        if t.is_infinite() {
            continue;
        }
        let fnr = 1.0 - tpr;
        let diff = (fpr - fnr).abs();
        let keep = match &best {
            None => true,
            Some((_, bf, bn, _)) => diff <= (bf - bn).abs(),
        };
        if keep {
            best = Some((t, fpr, fnr, (fpr + fnr) / 2.0));
        }
    }
    best.expect("nonempty samples")
}

pub fn sample(score: f64, bona: bool, pai: Option<&str>) -> ScoredSample {
    ScoredSample {
        score,
        label: if bona { PadLabel::BonaFide } else { PadLabel::Attack },
        pai: pai.map(str::to_string),
        sub_protocol: None,
    }
}
