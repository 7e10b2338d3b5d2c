//! Presentation attack detection metrics.
//!
//! Scores are bona fide likelihoods. A sample is accepted (classified
//! bona fide) iff `score >= threshold`; ties fall on the accept side.
//!
//! APCER = attacks accepted / attacks (optionally the worst single PAI
//! group), BPCER = bona fide rejected / bona fide, ACER = their mean.
//! ROC points sweep the distinct scores descending with a leading
//! above-max sentinel at (0, 0); TPR at an FPR budget is the best TPR
//! among points with FPR <= target (step function, no interpolation);
//! EER picks the distinct-score threshold minimizing |FPR - FNR|, ties
//! resolved toward the lower threshold.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadLabel {
    BonaFide,
    Attack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: PadLabel,
    /// Attack instrument tag for per-PAI grouping (print, replay, ...).
    pub pai: Option<String>,
    pub sub_protocol: Option<String>,
}

impl ScoredSample {
    pub fn new(score: f64, label: PadLabel) -> ScoredSample {
        ScoredSample { score, label, pai: None, sub_protocol: None }
    }

    pub fn with_pai(score: f64, label: PadLabel, pai: &str) -> ScoredSample {
        ScoredSample { score, label, pai: Some(pai.to_string()), sub_protocol: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    Empty,
    NoBonaFide,
    NoAttacks,
    NonFiniteScore,
    BadTarget(f64),
    /// Report rows must agree on the protocol family.
    MixedProtocols { a: String, b: String },
    Parse(String),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Empty => write!(f, "no samples"),
            MetricsError::NoBonaFide => write!(f, "no bona fide samples"),
            MetricsError::NoAttacks => write!(f, "no attack samples"),
            MetricsError::NonFiniteScore => write!(f, "non-finite score"),
            MetricsError::BadTarget(t) => write!(f, "FPR target {t} outside [0, 1]"),
            MetricsError::MixedProtocols { a, b } => {
                write!(f, "sub-protocols {a} and {b} belong to different protocols")
            }
            MetricsError::Parse(line) => write!(f, "unparseable report line {line:?}"),
        }
    }
}

impl core::error::Error for MetricsError {}

fn validate(samples: &[ScoredSample]) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    Ok(())
}

/// Fraction of attacks accepted at the threshold.
pub fn apcer(samples: &[ScoredSample], threshold: f64) -> Result<f64, MetricsError> {
    validate(samples)?;
    let mut total = 0usize;
    let mut accepted = 0usize;
    for s in samples {
        if s.label == PadLabel::Attack {
            total += 1;
            if s.score >= threshold {
                accepted += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::NoAttacks);
    }
    Ok(accepted as f64 / total as f64)
}

/// Worst per-PAI APCER: the maximum acceptance rate over attack
/// instrument groups; returns the offending group tag. Untagged attacks
/// form their own group.
pub fn apcer_worst_pai(
    samples: &[ScoredSample],
    threshold: f64,
) -> Result<(f64, String), MetricsError> {
    validate(samples)?;
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in samples {
        if s.label == PadLabel::Attack {
            let key = s.pai.as_deref().unwrap_or("untagged");
            let e = groups.entry(key).or_insert((0, 0));
            e.0 += 1;
            if s.score >= threshold {
                e.1 += 1;
            }
        }
    }
    if groups.is_empty() {
        return Err(MetricsError::NoAttacks);
    }
    let mut worst = (-1.0, "");
    for (tag, (total, accepted)) in &groups {
        let rate = *accepted as f64 / *total as f64;
        if rate > worst.0 {
            worst = (rate, tag);
        }
    }
    Ok((worst.0, worst.1.to_string()))
}

/// Fraction of bona fide samples rejected at the threshold.
pub fn bpcer(samples: &[ScoredSample], threshold: f64) -> Result<f64, MetricsError> {
    validate(samples)?;
    let mut total = 0usize;
    let mut rejected = 0usize;
    for s in samples {
        if s.label == PadLabel::BonaFide {
            total += 1;
            if s.score < threshold {
                rejected += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::NoBonaFide);
    }
    Ok(rejected as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApcerMode {
    Pooled,
    WorstPai,
}

/// `(apcer + bpcer) / 2` at the threshold.
pub fn acer(samples: &[ScoredSample], threshold: f64, mode: ApcerMode) -> Result<f64, MetricsError> {
    let a = match mode {
        ApcerMode::Pooled => apcer(samples, threshold)?,
        ApcerMode::WorstPai => apcer_worst_pai(samples, threshold)?.0,
    };
    let b = bpcer(samples, threshold)?;
    Ok((a + b) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    /// Attacks accepted at this threshold (false positive rate).
    pub fpr: f64,
    /// Bona fide accepted at this threshold (true positive rate).
    pub tpr: f64,
}

/// ROC swept over the distinct scores in descending order, preceded by
/// an above-max sentinel pinned at (0, 0). The final point is (1, 1).
pub fn roc_points(samples: &[ScoredSample]) -> Result<Vec<RocPoint>, MetricsError> {
    validate(samples)?;
    let n_bona = samples.iter().filter(|s| s.label == PadLabel::BonaFide).count();
    let n_attack = samples.len() - n_bona;
    if n_bona == 0 {
        return Err(MetricsError::NoBonaFide);
    }
    if n_attack == 0 {
        return Err(MetricsError::NoAttacks);
    }
    let mut order: Vec<(f64, PadLabel)> = samples.iter().map(|s| (s.score, s.label)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::with_capacity(order.len() + 1);
    points.push(RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 });
    let mut acc_bona = 0usize;
    let mut acc_attack = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].0;
        while i < order.len() && order[i].0 == threshold {
            match order[i].1 {
                PadLabel::BonaFide => acc_bona += 1,
                PadLabel::Attack => acc_attack += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: acc_attack as f64 / n_attack as f64,
            tpr: acc_bona as f64 / n_bona as f64,
        });
    }
    Ok(points)
}

/// Best TPR among operating points with FPR within the budget.
pub fn tpr_at_fpr(samples: &[ScoredSample], target: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&target) || !target.is_finite() {
        return Err(MetricsError::BadTarget(target));
    }
    let points = roc_points(samples)?;
    Ok(points
        .iter()
        .filter(|p| p.fpr <= target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
    /// `(fpr + fnr) / 2` at the selected threshold.
    pub eer: f64,
}

/// Threshold among the distinct scores minimizing |FPR - FNR|; ties go
/// to the lower threshold.
pub fn eer(samples: &[ScoredSample]) -> Result<EerPoint, MetricsError> {
    let points = roc_points(samples)?;
    let mut best: Option<EerPoint> = None;
    for p in points.iter().skip(1) {
        let fnr = 1.0 - p.tpr;
        let diff = math::abs(p.fpr - fnr);
        let candidate =
            EerPoint { threshold: p.threshold, fpr: p.fpr, fnr, eer: (p.fpr + fnr) / 2.0 };
        match &best {
            Some(b) if math::abs(b.fpr - b.fnr) < diff => {}
            // `<=` keeps the later (lower) threshold on ties.
            _ => best = Some(candidate),
        }
    }
    best.ok_or(MetricsError::Empty)
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n = 1).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    Ok((mean, math::sqrt(ss / (n - 1.0))))
}

// ---- evaluation reports ----------------------------------------------

/// Metrics of one sub-protocol at a fixed decision threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SubReport {
    pub sub_protocol: String,
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub eer: f64,
    /// `(fpr_target, tpr)` pairs.
    pub tpr_at: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subs: Vec<SubReport>,
    /// (mean, std) over sub-protocols.
    pub apcer_agg: (f64, f64),
    pub bpcer_agg: (f64, f64),
    pub acer_agg: (f64, f64),
}

pub fn sub_report(
    sub_protocol: &str,
    samples: &[ScoredSample],
    threshold: f64,
    fpr_targets: &[f64],
    mode: ApcerMode,
) -> Result<SubReport, MetricsError> {
    let a = match mode {
        ApcerMode::Pooled => apcer(samples, threshold)?,
        ApcerMode::WorstPai => apcer_worst_pai(samples, threshold)?.0,
    };
    let b = bpcer(samples, threshold)?;
    let e = eer(samples)?;
    let mut tpr_at = Vec::new();
    for &t in fpr_targets {
        tpr_at.push((t, tpr_at_fpr(samples, t)?));
    }
    Ok(SubReport {
        sub_protocol: sub_protocol.to_string(),
        threshold,
        apcer: a,
        bpcer: b,
        acer: (a + b) / 2.0,
        eer: e.eer,
        tpr_at,
    })
}

impl EvalReport {
    /// Aggregates sub-protocol rows; all rows must share the protocol
    /// family (the part before the underscore).
    pub fn from_subs(mut subs: Vec<SubReport>) -> Result<EvalReport, MetricsError> {
        if subs.is_empty() {
            return Err(MetricsError::Empty);
        }
        subs.sort_by(|a, b| a.sub_protocol.cmp(&b.sub_protocol));
        let family = |s: &str| s.split('_').next().unwrap_or(s).to_string();
        let first = family(&subs[0].sub_protocol);
        for s in &subs[1..] {
            if family(&s.sub_protocol) != first {
                return Err(MetricsError::MixedProtocols {
                    a: subs[0].sub_protocol.clone(),
                    b: s.sub_protocol.clone(),
                });
            }
        }
        let apcers: Vec<f64> = subs.iter().map(|s| s.apcer).collect();
        let bpcers: Vec<f64> = subs.iter().map(|s| s.bpcer).collect();
        let acers: Vec<f64> = subs.iter().map(|s| s.acer).collect();
        Ok(EvalReport {
            apcer_agg: aggregate(&apcers)?,
            bpcer_agg: aggregate(&bpcers)?,
            acer_agg: aggregate(&acers)?,
            subs,
        })
    }
}

/// Machine format: one `key=value` line group per sub-protocol, then the
/// aggregate lines. Rates are fractions, not percents.
pub fn format_keyvalue(report: &EvalReport) -> String {
    let mut out = String::new();
    for s in &report.subs {
        out.push_str(&format!(
            "sub={} threshold={} apcer={} bpcer={} acer={} eer={}",
            s.sub_protocol, s.threshold, s.apcer, s.bpcer, s.acer, s.eer
        ));
        for (t, v) in &s.tpr_at {
            out.push_str(&format!(" tpr_at_{t}={v}"));
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "agg apcer_mean={} apcer_std={} bpcer_mean={} bpcer_std={} acer_mean={} acer_std={}\n",
        report.apcer_agg.0,
        report.apcer_agg.1,
        report.bpcer_agg.0,
        report.bpcer_agg.1,
        report.acer_agg.0,
        report.acer_agg.1
    ));
    out
}

/// Parses the output of [`format_keyvalue`].
pub fn parse_keyvalue(text: &str) -> Result<EvalReport, MetricsError> {
    let mut subs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("agg ") {
            continue;
        }
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| MetricsError::Parse(line.to_string()))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<f64, MetricsError> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| MetricsError::Parse(line.to_string()))
        };
        let sub = fields
            .get("sub")
            .ok_or_else(|| MetricsError::Parse(line.to_string()))?;
        let mut tpr_at = Vec::new();
        for (k, v) in &fields {
            if let Some(t) = k.strip_prefix("tpr_at_") {
                let target: f64 =
                    t.parse().map_err(|_| MetricsError::Parse(line.to_string()))?;
                let tpr: f64 =
                    v.parse().map_err(|_| MetricsError::Parse(line.to_string()))?;
                tpr_at.push((target, tpr));
            }
        }
        tpr_at.sort_by(|a, b| a.0.total_cmp(&b.0));
        subs.push(SubReport {
            sub_protocol: sub.to_string(),
            threshold: get("threshold")?,
            apcer: get("apcer")?,
            bpcer: get("bpcer")?,
            acer: get("acer")?,
            eer: get("eer")?,
            tpr_at,
        });
    }
    EvalReport::from_subs(subs)
}

/// Human format: one row per sub-protocol plus a mean +/- std footer,
/// rates in percent.
pub fn format_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("sub        APCER(%)   BPCER(%)   ACER(%)    EER(%)\n");
    for s in &report.subs {
        out.push_str(&format!(
            "{:<10} {:<10.2} {:<10.2} {:<10.2} {:<10.2}\n",
            s.sub_protocol,
            s.apcer * 100.0,
            s.bpcer * 100.0,
            s.acer * 100.0,
            s.eer * 100.0
        ));
    }
    out.push_str(&format!(
        "{:<10} {:<10} {:<10} {:<10}\n",
        "mean+/-std",
        format!("{:.1}+/-{:.1}", report.apcer_agg.0 * 100.0, report.apcer_agg.1 * 100.0),
        format!("{:.1}+/-{:.1}", report.bpcer_agg.0 * 100.0, report.bpcer_agg.1 * 100.0),
        format!("{:.1}+/-{:.1}", report.acer_agg.0 * 100.0, report.acer_agg.1 * 100.0)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn bona(score: f64) -> ScoredSample {
        ScoredSample::new(score, PadLabel::BonaFide)
    }

    fn attack(score: f64) -> ScoredSample {
        ScoredSample::new(score, PadLabel::Attack)
    }

    #[test]
    fn rates_match_hand_counts() {
        let s = vec![bona(0.9), bona(0.8), bona(0.3), attack(0.7), attack(0.2)];
        assert!((apcer(&s, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((bpcer(&s, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((acer(&s, 0.5, ApcerMode::Pooled).unwrap() - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_ties_accept() {
        let s = vec![bona(0.5), attack(0.5)];
        assert_eq!(apcer(&s, 0.5).unwrap(), 1.0);
        assert_eq!(bpcer(&s, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn worst_pai_takes_the_maximum_group() {
        let s = vec![
            bona(0.9),
            ScoredSample::with_pai(0.8, PadLabel::Attack, "print"),
            ScoredSample::with_pai(0.1, PadLabel::Attack, "print"),
            ScoredSample::with_pai(0.2, PadLabel::Attack, "replay"),
            ScoredSample::with_pai(0.3, PadLabel::Attack, "replay"),
        ];
        // At 0.5: print accepts 1/2, replay 0/2; pooled 1/4.
        let (rate, tag) = apcer_worst_pai(&s, 0.5).unwrap();
        assert_eq!(tag, "print");
        assert!((rate - 0.5).abs() < 1e-15);
        assert!((apcer(&s, 0.5).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn missing_classes_are_rejected() {
        assert_eq!(apcer(&[bona(0.5)], 0.5), Err(MetricsError::NoAttacks));
        assert_eq!(bpcer(&[attack(0.5)], 0.5), Err(MetricsError::NoBonaFide));
        assert_eq!(apcer(&[], 0.5), Err(MetricsError::Empty));
        assert_eq!(
            apcer(&[bona(f64::NAN), attack(0.1)], 0.5),
            Err(MetricsError::NonFiniteScore)
        );
    }

    #[test]
    fn roc_starts_at_origin_and_ends_at_one_one() {
        let s = vec![bona(0.9), bona(0.7), attack(0.8), attack(0.1)];
        let pts = roc_points(&s).unwrap();
        assert_eq!(pts[0], RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 });
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // Monotone in both coordinates.
        for w in pts.windows(2) {
            assert!(w[1].fpr >= w[0].fpr);
            assert!(w[1].tpr >= w[0].tpr);
            assert!(w[1].threshold < w[0].threshold);
        }
        // Distinct thresholds: 0.9, 0.8, 0.7, 0.1.
        assert_eq!(pts.len(), 5);
    }

    #[test]
    fn tpr_at_fpr_is_a_step_function() {
        let s = vec![bona(0.9), bona(0.7), attack(0.8), attack(0.1)];
        assert_eq!(tpr_at_fpr(&s, 0.0).unwrap(), 0.5);
        assert_eq!(tpr_at_fpr(&s, 0.49).unwrap(), 0.5);
        assert_eq!(tpr_at_fpr(&s, 0.5).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&s, 1.0).unwrap(), 1.0);
        assert!(matches!(tpr_at_fpr(&s, 1.5), Err(MetricsError::BadTarget(_))));
        assert!(matches!(tpr_at_fpr(&s, -0.1), Err(MetricsError::BadTarget(_))));
    }

    #[test]
    fn eer_hand_case_balances_rates() {
        let s = vec![bona(0.4), bona(0.8), attack(0.2), attack(0.6)];
        let e = eer(&s).unwrap();
        assert_eq!(e.threshold, 0.6);
        assert_eq!(e.fpr, 0.5);
        assert_eq!(e.fnr, 0.5);
        assert_eq!(e.eer, 0.5);
    }

    #[test]
    fn eer_tie_takes_the_lower_threshold() {
        // Perfectly separated: thresholds 0.9 and 0.8 both give
        // fpr = fnr = 0; the lower (0.8) must win.
        let s = vec![bona(0.9), bona(0.8), attack(0.2)];
        let e = eer(&s).unwrap();
        assert_eq!(e.threshold, 0.8);
        assert_eq!(e.eer, 0.0);
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let (m, s) = aggregate(&[0.5, 4.8, 1.2]).unwrap();
        assert!((m - 6.5 / 3.0).abs() < 1e-12);
        assert!((s - 2.3072).abs() < 5e-5, "std = {s}");
        let (m2, s2) = aggregate(&[0.6, 4.4, 1.5]).unwrap();
        assert!((m2 - 6.5 / 3.0).abs() < 1e-12);
        assert!((s2 - 1.9858).abs() < 5e-5, "std = {s2}");
        assert_eq!(aggregate(&[3.25]).unwrap(), (3.25, 0.0));
        assert_eq!(aggregate(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn report_aggregates_and_roundtrips() {
        let s1 = vec![bona(0.9), bona(0.6), attack(0.4), attack(0.2)];
        let s2 = vec![bona(0.8), bona(0.3), attack(0.7), attack(0.1)];
        let r1 = sub_report("4_1", &s1, 0.5, &[0.01, 0.5], ApcerMode::Pooled).unwrap();
        let r2 = sub_report("4_2", &s2, 0.5, &[0.01, 0.5], ApcerMode::Pooled).unwrap();
        let report = EvalReport::from_subs(vec![r2.clone(), r1.clone()]).unwrap();
        // Sorted by sub-protocol id.
        assert_eq!(report.subs[0].sub_protocol, "4_1");
        let text = format_keyvalue(&report);
        let parsed = parse_keyvalue(&text).unwrap();
        assert_eq!(parsed, report);
        assert!(format_table(&report).contains("4_2"));
    }

    #[test]
    fn mixed_protocol_families_are_rejected() {
        let s = vec![bona(0.9), attack(0.1)];
        let r1 = sub_report("1_1", &s, 0.5, &[], ApcerMode::Pooled).unwrap();
        let r2 = sub_report("2_1", &s, 0.5, &[], ApcerMode::Pooled).unwrap();
        assert!(matches!(
            EvalReport::from_subs(vec![r1, r2]),
            Err(MetricsError::MixedProtocols { .. })
        ));
    }

    #[test]
    fn score_rank_invariance() {
        // Metrics depend on score order, not values: a monotone remap
        // leaves every rate unchanged when the threshold is remapped too.
        let s = vec![bona(0.9), bona(0.4), attack(0.6), attack(0.1)];
        let remap = |v: f64| 2.0 * v * v + 1.0;
        let s2: Vec<ScoredSample> = s
            .iter()
            .map(|x| ScoredSample::new(remap(x.score), x.label))
            .collect();
        for thr in [0.05, 0.4, 0.6, 0.9, 0.95] {
            assert_eq!(apcer(&s, thr).unwrap(), apcer(&s2, remap(thr)).unwrap());
            assert_eq!(bpcer(&s, thr).unwrap(), bpcer(&s2, remap(thr)).unwrap());
        }
        assert_eq!(eer(&s).unwrap().eer, eer(&s2).unwrap().eer);
    }
}
