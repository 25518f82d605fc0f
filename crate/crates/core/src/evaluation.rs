//! Event-based error rate and F1 under the onset-only condition.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::postproc::{AnnotationSet, EventAnnotation};

pub const DEFAULT_COLLAR: f64 = 0.5;

/// Outcome of matching one clip's references against its predictions.
/// Indices refer to the input slices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_refs: Vec<usize>,
    pub unmatched_preds: Vec<usize>,
}

/// One-to-one matching where a prediction may pair with a reference when
/// their onsets differ by at most `collar` seconds. Offsets are ignored.
///
/// References are visited in onset order and each tries its candidates
/// nearest-onset first. When the nearest candidate is already taken, the
/// holder is asked to move to another candidate (an augmenting path), so the
/// number of pairs is always the maximum possible.
pub fn match_events(refs: &[EventAnnotation], preds: &[EventAnnotation], collar: f64) -> MatchResult {
    let mut ref_order: Vec<usize> = (0..refs.len()).collect();
    ref_order.sort_by(|&a, &b| refs[a].onset.total_cmp(&refs[b].onset).then(a.cmp(&b)));
    let candidates: Vec<Vec<usize>> = (0..refs.len())
        .map(|r| {
            let mut c: Vec<usize> = (0..preds.len())
                .filter(|&p| (preds[p].onset - refs[r].onset).abs() <= collar)
                .collect();
            c.sort_by(|&a, &b| {
                let da = (preds[a].onset - refs[r].onset).abs();
                let db = (preds[b].onset - refs[r].onset).abs();
                da.total_cmp(&db).then(preds[a].onset.total_cmp(&preds[b].onset)).then(a.cmp(&b))
            });
            c
        })
        .collect();

    fn augment(r: usize, cand: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &p in &cand[r] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if owner[p].is_none_or(|o| augment(o, cand, owner, seen)) {
                owner[p] = Some(r);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; preds.len()];
    for &r in &ref_order {
        let mut seen = vec![false; preds.len()];
        augment(r, &candidates, &mut owner, &mut seen);
    }

    let mut pairs: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(p, o)| o.map(|r| (r, p))).collect();
    pairs.sort_unstable();
    let matched_refs: BTreeSet<usize> = pairs.iter().map(|&(r, _)| r).collect();
    MatchResult {
        unmatched_refs: (0..refs.len()).filter(|r| !matched_refs.contains(r)).collect(),
        unmatched_preds: (0..preds.len()).filter(|&p| owner[p].is_none()).collect(),
        pairs,
    }
}

/// Counts accumulated over clips for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub n_ref: usize,
    pub n_pred: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, m: &MatchResult) {
        let tp = m.pairs.len();
        self.tp += tp;
        self.fn_ += m.unmatched_refs.len();
        self.fp += m.unmatched_preds.len();
        self.n_ref += tp + m.unmatched_refs.len();
        self.n_pred += tp + m.unmatched_preds.len();
    }

    /// `(FN + FP) / N_ref`; `None` when there are no references.
    pub fn error_rate(&self) -> Option<f64> {
        (self.n_ref > 0).then(|| (self.fn_ + self.fp) as f64 / self.n_ref as f64)
    }

    /// `2·TP / (2·TP + FP + FN)`, 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: String,
    pub counts: Counts,
    pub error_rate: Option<f64>,
    pub f1: f64,
}

/// Aggregates per-clip matches of one class (micro-averaged).
pub fn score(label: &str, matches: &[MatchResult]) -> ClassReport {
    let mut counts = Counts::default();
    for m in matches {
        counts.add(m);
    }
    ClassReport {
        label: label.to_string(),
        counts,
        error_rate: counts.error_rate(),
        f1: counts.f1(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Unweighted mean over classes with a defined error rate.
    pub average_error_rate: Option<f64>,
    /// Unweighted mean over all classes.
    pub average_f1: f64,
}

/// Scores detections against references, class by class, over the union of
/// files in both sets.
pub fn evaluate(refs: &AnnotationSet, dets: &AnnotationSet, collar: f64) -> EvalReport {
    let labels: BTreeSet<&str> = refs.values().chain(dets.values()).flatten().map(|e| e.label.as_str()).collect();
    let files: BTreeSet<&String> = refs.keys().chain(dets.keys()).collect();
    let empty = Vec::new();
    let classes: Vec<ClassReport> = labels
        .iter()
        .map(|&label| {
            let matches: Vec<MatchResult> = files
                .iter()
                .map(|f| {
                    let pick = |set: &AnnotationSet| -> Vec<EventAnnotation> {
                        set.get(*f).unwrap_or(&empty).iter().filter(|e| e.label == label).cloned().collect()
                    };
                    match_events(&pick(refs), &pick(dets), collar)
                })
                .collect();
            score(label, &matches)
        })
        .collect();
    let ers: Vec<f64> = classes.iter().filter_map(|c| c.error_rate).collect();
    EvalReport {
        average_error_rate: (!ers.is_empty()).then(|| ers.iter().sum::<f64>() / ers.len() as f64),
        average_f1: if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|c| c.f1).sum::<f64>() / classes.len() as f64
        },
        classes,
    }
}

fn fmt_er(er: Option<f64>) -> String {
    er.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"))
}

impl EvalReport {
    /// Restricts the report to one class, recomputing the average.
    pub fn only(&self, label: &str) -> EvalReport {
        let classes: Vec<ClassReport> = self.classes.iter().filter(|c| c.label == label).cloned().collect();
        let first = classes.first();
        EvalReport {
            average_error_rate: first.and_then(|c| c.error_rate),
            average_f1: first.map_or(0.0, |c| c.f1),
            classes,
        }
    }

    /// Tab-separated table, one row per class plus `average`. ER has two
    /// decimals, F1 is a percentage with one; `NA` marks an undefined ER.
    pub fn to_table(&self) -> String {
        let mut out = String::from("class\tNref\tNpred\tTP\tFP\tFN\tER\tF1\tER|F1\n");
        let mut total = Counts::default();
        for c in &self.classes {
            let k = c.counts;
            total.n_ref += k.n_ref;
            total.n_pred += k.n_pred;
            total.tp += k.tp;
            total.fp += k.fp;
            total.fn_ += k.fn_;
            let (er, f1) = (fmt_er(c.error_rate), format!("{:.1}", 100.0 * c.f1));
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{er}\t{f1}\t{er}|{f1}", c.label, k.n_ref, k.n_pred, k.tp, k.fp, k.fn_);
        }
        let (er, f1) = (fmt_er(self.average_error_rate), format!("{:.1}", 100.0 * self.average_f1));
        let _ = writeln!(
            out,
            "average\t{}\t{}\t{}\t{}\t{}\t{er}\t{f1}\t{er}|{f1}",
            total.n_ref, total.n_pred, total.tp, total.fp, total.fn_
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(onset: f64) -> EventAnnotation {
        EventAnnotation::new("x", onset, onset + 1.0).unwrap()
    }

    #[test]
    fn collar_examples() {
        assert_eq!(match_events(&[ev(5.0)], &[ev(5.3)], 0.5).pairs, vec![(0, 0)]);
        let m = match_events(&[ev(5.0)], &[ev(5.6)], 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!((m.unmatched_refs.len(), m.unmatched_preds.len()), (1, 1));
        assert_eq!(match_events(&[ev(1.0)], &[], 0.5).unmatched_refs, vec![0]);
    }

    #[test]
    fn nearest_first_can_be_undone() {
        // Pure nearest-first gives the 0.7 prediction to the first reference
        // and leaves the second one unmatched.
        let m = match_events(&[ev(0.4), ev(1.1)], &[ev(0.0), ev(0.7)], 0.5);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!(m.unmatched_refs.is_empty() && m.unmatched_preds.is_empty());
    }

    #[test]
    fn hand_computed_scores() {
        let perfect = score("x", &[match_events(&[ev(1.0)], &[ev(1.0)], 0.5)]);
        assert_eq!((perfect.error_rate, perfect.f1), (Some(0.0), 1.0));
        let miss = score("x", &[match_events(&[ev(1.0)], &[ev(3.0)], 0.5)]);
        assert_eq!((miss.error_rate, miss.f1), (Some(2.0), 0.0));
        let half = score("x", &[match_events(&[ev(1.0), ev(4.0)], &[ev(1.2)], 0.5)]);
        assert_eq!(half.error_rate, Some(0.5));
        assert!((half.f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = score("x", &[match_events(&[], &[ev(1.0)], 0.5)]);
        assert_eq!(none.error_rate, None);
    }

    #[test]
    fn table_layout() {
        let mut refs = AnnotationSet::new();
        refs.insert("a.wav".into(), vec![ev(1.0)]);
        let report = evaluate(&refs, &refs, 0.5);
        let text = report.to_table();
        assert!(text.contains("x\t1\t1\t1\t0\t0\t0.00\t100.0\t0.00|100.0"));
        assert!(text.lines().last().unwrap().starts_with("average\t"));
        let empty = evaluate(&refs, &AnnotationSet::new(), 0.5);
        assert_eq!((empty.average_error_rate, empty.average_f1), (Some(1.0), 0.0));
    }
}
