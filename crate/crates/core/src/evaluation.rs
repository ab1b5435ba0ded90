//! Threshold-moving and detection metrics.
//!
//! The F1-maximising threshold is chosen on the evaluated scores themselves,
//! so reports are labelled `oracle-threshold`: an optimistic evaluation
//! convention, not a deployable decision rule.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Label;
use crate::error::{Error, Result};

pub const THRESHOLD_MODE: &str = "oracle-threshold";

fn check_classes(labels: &[Label]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| l.is_anomalous()).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::DegenerateLabels("anomalous"));
    }
    if neg == 0 {
        return Err(Error::DegenerateLabels("normal"));
    }
    Ok((pos, neg))
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Candidate thresholds: a sentinel below the minimum, midpoints between
/// consecutive distinct scores, and a sentinel above the maximum (ascending).
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(lo - 1.0 - lo.abs());
    for w in sorted.windows(2) {
        let mid = w[0] + (w[1] - w[0]) / 2.0;
        out.push(if mid > w[0] { mid } else { w[1] });
    }
    out.push(hi + 1.0 + hi.abs());
    out
}

/// F1-maximising threshold; ties go to the smaller threshold.
pub fn threshold_max_f1(scores: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::data("scores and labels differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    let (pos, _) = check_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let candidates = candidate_thresholds(scores);

    // Sweep ascending: everything at or above the threshold is predicted anomalous.
    let (mut tp, mut fp) = (pos, scores.len() - pos);
    let mut k = 0;
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &theta in &candidates {
        while k < idx.len() && scores[idx[k]] < theta {
            if labels[idx[k]].is_anomalous() {
                tp -= 1;
            } else {
                fp -= 1;
            }
            k += 1;
        }
        let f1 = f1_from(tp, fp, pos - tp);
        if f1 > best.1 {
            best = (theta, f1);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub mcc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = f1_from(tp, fp, fn_);
        let (tp_, fp_, tn_, fn__) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
        let denom = (tp_ + fp_) * (tp_ + fn__) * (tn_ + fp_) * (tn_ + fn__);
        let mcc = if denom == 0.0 {
            0.0
        } else {
            (tp_ * tn_ - fp_ * fn__) / denom.sqrt()
        };
        Metrics {
            tp,
            fp,
            tn,
            fn_,
            mcc,
            precision,
            recall,
            f1,
        }
    }
}

/// Confusion counts and derived metrics with `score >= theta` predicted anomalous.
pub fn confusion_and_metrics(scores: &[f64], labels: &[Label], theta: f64) -> Metrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, l) in scores.iter().zip(labels) {
        match (s >= theta, l.is_anomalous()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Metrics::from_counts(tp, fp, tn, fn_)
}

/// Mann-Whitney statistic with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k].is_anomalous()).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision over a descending sweep, tied scores forming one step.
pub fn auprc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, _) = check_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            group_tp += labels[idx[j]].is_anomalous() as usize;
            j += 1;
        }
        tp += group_tp;
        seen += j - i;
        if group_tp > 0 {
            ap += (group_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Seeded fair coin per sequence.
pub fn random_detector(n: usize, seed: u64) -> Vec<Label> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random_bool(0.5) { Label::Anomalous } else { Label::Normal })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub seq_id: String,
    pub score: f64,
    pub label: Label,
    pub predicted: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub threshold: f64,
    pub metrics: Metrics,
    pub auprc: f64,
    pub auroc: f64,
    pub snapshot: Vec<(String, String)>,
}

impl ScoreReport {
    pub fn build(
        ids: &[String],
        scores: &[f64],
        labels: &[Label],
        snapshot: Vec<(String, String)>,
    ) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::data("ids and scores differ in length"));
        }
        let (threshold, _) = threshold_max_f1(scores, labels)?;
        let metrics = confusion_and_metrics(scores, labels, threshold);
        let rows = ids
            .iter()
            .zip(scores)
            .zip(labels)
            .map(|((id, &score), &label)| ScoreRow {
                seq_id: id.clone(),
                score,
                label,
                predicted: if score >= threshold { Label::Anomalous } else { Label::Normal },
            })
            .collect();
        Ok(ScoreReport {
            rows,
            threshold,
            metrics,
            auprc: auprc(scores, labels)?,
            auroc: auroc(scores, labels)?,
            snapshot,
        })
    }

    fn header_lines(&self, out: &mut String) {
        for (k, v) in &self.snapshot {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# threshold_mode={THRESHOLD_MODE}");
        let _ = writeln!(out, "# threshold={:e}", self.threshold);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        self.header_lines(&mut out);
        out.push_str("seq_id,score,label,predicted\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:e},{},{}", r.seq_id, r.score, r.label, r.predicted);
        }
        out
    }

    /// `key = value` summary.
    pub fn metrics_text(&self) -> String {
        let m = &self.metrics;
        let mut out = String::new();
        for (k, v) in &self.snapshot {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "threshold_mode = {THRESHOLD_MODE}");
        let _ = writeln!(out, "threshold = {:e}", self.threshold);
        for (k, v) in [("tp", m.tp), ("fp", m.fp), ("tn", m.tn), ("fn", m.fn_)] {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in [
            ("mcc", m.mcc),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("auprc", self.auprc),
            ("auroc", self.auroc),
        ] {
            let _ = writeln!(out, "{k} = {v:.6}");
        }
        out
    }
}

/// Plain score file: `seq_id,score,label` rows after optional `#` lines.
pub fn scores_to_csv(ids: &[String], scores: &[f64], labels: &[Label], snapshot: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in snapshot {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str("seq_id,score,label\n");
    for ((id, s), l) in ids.iter().zip(scores).zip(labels) {
        let _ = writeln!(out, "{id},{s:e},{l}");
    }
    out
}

pub type ScoreTable = (Vec<String>, Vec<f64>, Vec<Label>);

pub fn scores_from_csv(text: &str) -> Result<ScoreTable> {
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut header_seen = false;
    for (no, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line.starts_with("seq_id,") {
                continue;
            }
        }
        let bad = || Error::data(format!("score file line {}: malformed row {line:?}", no + 1));
        let mut f = line.split(',');
        let id = f.next().ok_or_else(bad)?;
        let score: f64 = f.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let label = f.next().and_then(|s| Label::from_digit(s).ok()).ok_or_else(bad)?;
        ids.push(id.to_owned());
        scores.push(score);
        labels.push(label);
    }
    Ok((ids, scores, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lab(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&b| if b == 1 { Label::Anomalous } else { Label::Normal }).collect()
    }

    fn brute_max_f1(scores: &[f64], labels: &[Label]) -> f64 {
        let mut best = 0.0f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.push(f64::INFINITY);
        for &t in &thresholds {
            best = best.max(confusion_and_metrics(scores, labels, t).f1);
        }
        best
    }

    #[test]
    fn threshold_simple() {
        let (t, f1) = threshold_max_f1(&[0.1, 0.2, 0.9], &lab(&[0, 0, 1])).unwrap();
        assert!(t > 0.2 && t < 0.9);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn threshold_all_equal() {
        let (t, f1) = threshold_max_f1(&[0.5; 4], &lab(&[0, 1, 0, 0])).unwrap();
        assert!(t < 0.5);
        assert!((f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn threshold_inverted() {
        let scores = [0.9, 0.8, 0.1, 0.05];
        let labels = lab(&[0, 0, 1, 1]);
        let (_, f1) = threshold_max_f1(&scores, &labels).unwrap();
        assert_eq!(f1, brute_max_f1(&scores, &labels));
    }

    #[test]
    fn degenerate_labels() {
        assert_eq!(
            threshold_max_f1(&[0.1, 0.2], &lab(&[0, 0])).unwrap_err().to_string(),
            Error::DegenerateLabels("anomalous").to_string()
        );
        assert!(matches!(auroc(&[0.1], &lab(&[1])), Err(Error::DegenerateLabels("normal"))));
        assert!(auprc(&[0.1], &lab(&[0])).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = Metrics::from_counts(3, 1, 5, 1);
        assert!((m.mcc - 14.0 / 24.0).abs() < 1e-15);
        assert_eq!((m.precision, m.recall, m.f1), (0.75, 0.75, 0.75));
        let m = Metrics::from_counts(1, 0, 1, 0);
        assert_eq!((m.mcc, m.f1), (1.0, 1.0));
        let m = Metrics::from_counts(0, 0, 5, 2);
        assert_eq!(m.mcc, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &lab(&[1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &lab(&[1, 0, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &lab(&[1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.7, 0.1], &lab(&[0, 0, 0, 1])).unwrap(), 0.25);
    }

    #[test]
    fn random_detector_fair() {
        assert_eq!(random_detector(100, 4), random_detector(100, 4));
        let draws = random_detector(100_000, 1);
        let frac = draws.iter().filter(|l| l.is_anomalous()).count() as f64 / 1e5;
        assert!((frac - 0.5).abs() <= 0.01, "{frac}");
        assert_eq!(random_detector(1, 0).len(), 1);
    }

    #[test]
    fn report_roundtrip() {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let scores = [0.1, 0.7, 0.3, 0.9];
        let labels = lab(&[0, 1, 0, 1]);
        let rep = ScoreReport::build(&ids, &scores, &labels, vec![("seed".into(), "1".into())]).unwrap();
        assert_eq!(rep.metrics.f1, 1.0);
        assert!(rep.to_csv().contains("threshold_mode=oracle-threshold"));
        assert!(rep.metrics_text().contains("auroc = 1.000000"));
        let csv = scores_to_csv(&ids, &scores, &labels, &[]);
        let (i2, s2, l2) = scores_from_csv(&csv).unwrap();
        assert_eq!((i2, s2, l2), (ids, scores.to_vec(), labels));
    }

    proptest! {
        #[test]
        fn max_f1_matches_brute_force(
            pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.25).collect();
            let mut labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Anomalous } else { Label::Normal }).collect();
            labels[0] = Label::Anomalous;
            labels[1] = Label::Normal;
            let (t, f1) = threshold_max_f1(&scores, &labels).unwrap();
            prop_assert!((f1 - brute_max_f1(&scores, &labels)).abs() < 1e-12);
            prop_assert_eq!(confusion_and_metrics(&scores, &labels, t).f1, f1);
        }

        #[test]
        fn monotone_transform_invariance(
            pairs in prop::collection::vec((-50i32..50, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 10.0).collect();
            let mut labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Anomalous } else { Label::Normal }).collect();
            labels[0] = Label::Anomalous;
            labels[1] = Label::Normal;
            let moved: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
            prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&moved, &labels).unwrap());
            prop_assert_eq!(threshold_max_f1(&scores, &labels).unwrap().1, threshold_max_f1(&moved, &labels).unwrap().1);
            let m = confusion_and_metrics(&scores, &labels, 0.0);
            prop_assert!((-1.0..=1.0).contains(&m.mcc) && (0.0..=1.0).contains(&m.f1));
        }
    }
}
