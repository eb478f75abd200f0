//! Attack quality metrics: F1 variants, Efficiency, Concealability,
//! Successfulness, and the best-iteration selection rule.
//!
//! Efficiency measures how badly the target classifier does on attacked
//! inputs; Concealability measures how badly the discriminator does at
//! telling attacked inputs from clean ones; Successfulness is their harmonic
//! mean, so an attack only scores well by doing both at once.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::error::{Error, Result};
use crate::models::TrainedClassifier;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// F1 of class 1 only (discriminator convention).
    BinaryPos1,
    /// Unweighted mean of per-class F1; absent classes contribute 0.
    Macro,
}

/// Standard F1 from label vectors. The macro mean runs over every class
/// present in either vector; a class with predictions but no support (or
/// support but no correct predictions) contributes 0.
pub fn f1(y_true: &[usize], y_pred: &[usize], averaging: Averaging) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::EmptyInput("f1"));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(
            "f1",
            format!("{} predictions", y_true.len()),
            format!("{}", y_pred.len()),
        ));
    }
    let n_classes = y_true.iter().chain(y_pred).max().unwrap() + 1;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let class_f1 = |c: usize| -> f64 {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        }
    };
    match averaging {
        Averaging::BinaryPos1 => Ok(if n_classes > 1 { class_f1(1) } else { 0.0 }),
        Averaging::Macro => {
            // tp + fp + fn > 0 exactly when class c occurs in either vector.
            let classes: Vec<usize> = (0..n_classes)
                .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
                .collect();
            let total: f64 = classes.iter().map(|&c| class_f1(c)).sum();
            Ok(total / classes.len() as f64)
        }
    }
}

/// E = 1 - macro-F1 of the target on the attacked inputs.
pub fn efficiency(target: &TrainedClassifier, x_adv: &Tensor, y_true: &[usize]) -> Result<f64> {
    let preds = target.predict_labels(x_adv)?;
    Ok(1.0 - f1(y_true, &preds, Averaging::Macro)?)
}

/// Score > 0.5 means "attacked"; exactly 0.5 counts as clean.
pub fn threshold_scores(scores: &[f64]) -> Vec<usize> {
    scores.iter().map(|&s| usize::from(s > 0.5)).collect()
}

/// C = 1 - class-1 F1 of the discriminator on a balanced set built from the
/// clean rows (label 0) followed by their attacked versions (label 1).
pub fn concealability(disc: &TrainedClassifier, x_clean: &Tensor, x_adv: &Tensor) -> Result<f64> {
    if x_clean.shape() != x_adv.shape() {
        return Err(Error::shape(
            "concealability",
            format!("{:?}", x_clean.shape()),
            format!("{:?}", x_adv.shape()),
        ));
    }
    let n = x_clean.shape()[0];
    let scores_clean = disc.attacked_scores(x_clean)?;
    let scores_adv = disc.attacked_scores(x_adv)?;
    let mut y_true = vec![0usize; n];
    y_true.extend(std::iter::repeat(1).take(n));
    let mut scores = scores_clean;
    scores.extend(scores_adv);
    let y_pred = threshold_scores(&scores);
    Ok(1.0 - f1(&y_true, &y_pred, Averaging::BinaryPos1)?)
}

/// S = 2CE / (C + E), the harmonic mean; 0 when both inputs are 0.
pub fn successfulness(c: f64, e: f64) -> Result<f64> {
    for (name, v) in [("concealability", c), ("efficiency", e)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::MetricOutOfRange(format!("{name} = {v}")));
        }
    }
    if c + e == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * c * e / (c + e))
    }
}

/// Metrics for one attack iteration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub efficiency: f64,
    pub concealability: f64,
    pub successfulness: f64,
}

impl IterationRecord {
    pub fn new(iteration: usize, efficiency: f64, concealability: f64) -> Result<Self> {
        Ok(Self {
            iteration,
            efficiency,
            concealability,
            successfulness: successfulness(concealability, efficiency)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionReason {
    /// Best S among iterations at or past the attack's floor.
    IterationFloor,
    /// Qualified early by exceeding 0.9 Efficiency.
    EfficiencyEscape,
    /// Nothing qualified; the last iteration was reported instead.
    FloorUnmet,
}

impl SelectionReason {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionReason::IterationFloor => "iteration-floor",
            SelectionReason::EfficiencyEscape => "efficiency-escape",
            SelectionReason::FloorUnmet => "floor-unmet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub reason: SelectionReason,
}

/// Minimum iteration count before an attack's metrics are comparable.
pub fn iteration_floor(kind: AttackKind) -> usize {
    match kind {
        AttackKind::Ifgsm | AttackKind::Pgd => 40,
        AttackKind::Simba => 1300,
        AttackKind::Sgm => 400,
    }
}

/// Pick the iteration to report: the highest Successfulness among rows that
/// reached the floor or exceeded 0.9 Efficiency, earliest on ties. If no row
/// qualifies the last row is returned, flagged `FloorUnmet`.
pub fn select_best_iteration(rows: &[IterationRecord], floor: usize) -> Result<Selection> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("select_best_iteration"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        if row.iteration < floor && row.efficiency <= 0.9 {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, s)) => row.successfulness > s,
        };
        if better {
            best = Some((i, row.successfulness));
        }
    }
    match best {
        Some((index, _)) => {
            let reason = if rows[index].iteration >= floor {
                SelectionReason::IterationFloor
            } else {
                SelectionReason::EfficiencyEscape
            };
            Ok(Selection { index, reason })
        }
        None => Ok(Selection {
            index: rows.len() - 1,
            reason: SelectionReason::FloorUnmet,
        }),
    }
}

/// Per-iteration rows plus the selected row for one attack run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<IterationRecord>,
    pub selection: Selection,
}

impl MetricsReport {
    pub fn build(rows: Vec<IterationRecord>, kind: AttackKind) -> Result<Self> {
        let selection = select_best_iteration(&rows, iteration_floor(kind))?;
        Ok(Self { rows, selection })
    }

    pub fn selected(&self) -> &IterationRecord {
        &self.rows[self.selection.index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent oracle: brute-force confusion-matrix counts, then the
    /// canonical F1 = 2tp / (2tp + fp + fn).
    fn oracle_f1(y_true: &[usize], y_pred: &[usize], avg: Averaging) -> f64 {
        let single = |c: usize| {
            let tp = y_true
                .iter()
                .zip(y_pred)
                .filter(|(&t, &p)| t == c && p == c)
                .count();
            let fp = y_true
                .iter()
                .zip(y_pred)
                .filter(|(&t, &p)| t != c && p == c)
                .count();
            let fneg = y_true
                .iter()
                .zip(y_pred)
                .filter(|(&t, &p)| t == c && p != c)
                .count();
            if 2 * tp + fp + fneg == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            }
        };
        match avg {
            Averaging::BinaryPos1 => single(1),
            Averaging::Macro => {
                let mut classes: Vec<usize> = y_true.iter().chain(y_pred).copied().collect();
                classes.sort_unstable();
                classes.dedup();
                classes.iter().map(|&c| single(c)).sum::<f64>() / classes.len() as f64
            }
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let y = vec![0, 1, 2, 1, 0];
        assert_eq!(f1(&y, &y, Averaging::Macro).unwrap(), 1.0);
        let b = vec![0, 1, 1, 0];
        assert_eq!(f1(&b, &b, Averaging::BinaryPos1).unwrap(), 1.0);
    }

    #[test]
    fn binary_all_wrong_scores_zero() {
        let y_true = vec![0, 1, 0, 1];
        let y_pred = vec![1, 0, 1, 0];
        assert_eq!(f1(&y_true, &y_pred, Averaging::BinaryPos1).unwrap(), 0.0);
        assert_eq!(f1(&y_true, &y_pred, Averaging::Macro).unwrap(), 0.0);
    }

    #[test]
    fn one_class_degenerate_scores_one() {
        let y = vec![0, 0, 0];
        assert_eq!(f1(&y, &y, Averaging::Macro).unwrap(), 1.0);
    }

    #[test]
    fn f1_matches_confusion_matrix_oracle() {
        let mut rng = crate::rng::rng_from(5, 1);
        for case in 0..200 {
            let n_classes = rng.gen_range(2..5);
            let n = rng.gen_range(1..40);
            let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            for avg in [Averaging::Macro, Averaging::BinaryPos1] {
                let got = f1(&y_true, &y_pred, avg).unwrap();
                let want = oracle_f1(&y_true, &y_pred, avg);
                assert_eq!(got, want, "case {case}: {y_true:?} vs {y_pred:?}");
            }
        }
    }

    #[test]
    fn f1_rejects_bad_input() {
        assert!(matches!(
            f1(&[], &[], Averaging::Macro),
            Err(Error::EmptyInput(_))
        ));
        assert!(f1(&[0, 1], &[0], Averaging::Macro).is_err());
    }

    #[test]
    fn successfulness_identities() {
        assert_eq!(successfulness(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(successfulness(0.0, 0.7).unwrap(), 0.0);
        assert_eq!(successfulness(0.0, 0.0).unwrap(), 0.0);
        for a in [0.1, 0.5, 0.9] {
            assert!((successfulness(a, a).unwrap() - a).abs() < 1e-15);
        }
        let s1 = successfulness(0.3, 0.8).unwrap();
        let s2 = successfulness(0.8, 0.3).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn successfulness_of_table_means() {
        let s = successfulness(0.239, 0.861).unwrap();
        assert!((s - 0.3742).abs() < 1e-4, "got {s}");
        // Exact formula value for the same inputs.
        assert!((s - 2.0 * 0.239 * 0.861 / (0.239 + 0.861)).abs() < 1e-15);
    }

    #[test]
    fn successfulness_rejects_out_of_range() {
        assert!(successfulness(-0.1, 0.5).is_err());
        assert!(successfulness(0.5, 1.2).is_err());
    }

    #[test]
    fn threshold_breaks_ties_toward_clean() {
        assert_eq!(threshold_scores(&[0.5, 0.500001, 0.49, 1.0]), vec![0, 1, 0, 1]);
    }

    fn row(iteration: usize, e: f64, c: f64) -> IterationRecord {
        IterationRecord::new(iteration, e, c).unwrap()
    }

    #[test]
    fn floors_match_attack_kinds() {
        assert_eq!(iteration_floor(AttackKind::Ifgsm), 40);
        assert_eq!(iteration_floor(AttackKind::Pgd), 40);
        assert_eq!(iteration_floor(AttackKind::Simba), 1300);
        assert_eq!(iteration_floor(AttackKind::Sgm), 400);
    }

    #[test]
    fn monotone_curve_selects_last_row() {
        let rows: Vec<IterationRecord> = (1..=100)
            .map(|i| row(i, i as f64 / 200.0, i as f64 / 150.0))
            .collect();
        let sel = select_best_iteration(&rows, 40).unwrap();
        assert_eq!(sel.index, 99);
        assert_eq!(sel.reason, SelectionReason::IterationFloor);
        // Exhaustive scan over qualified rows agrees.
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.iteration >= 40)
            .max_by(|a, b| a.1.successfulness.total_cmp(&b.1.successfulness))
            .unwrap()
            .0;
        assert_eq!(sel.index, best);
    }

    #[test]
    fn high_efficiency_escapes_the_floor() {
        let rows = vec![row(1, 0.95, 0.5)];
        let sel = select_best_iteration(&rows, 40).unwrap();
        assert_eq!(sel.index, 0);
        assert_eq!(sel.reason, SelectionReason::EfficiencyEscape);
    }

    #[test]
    fn unmet_floor_returns_last_row_flagged() {
        let rows = vec![row(1, 0.2, 0.3), row(2, 0.4, 0.5)];
        let sel = select_best_iteration(&rows, 40).unwrap();
        assert_eq!(sel.index, 1);
        assert_eq!(sel.reason, SelectionReason::FloorUnmet);
    }

    #[test]
    fn ties_break_toward_earliest_iteration() {
        let rows = vec![row(40, 0.5, 0.5), row(41, 0.5, 0.5), row(42, 0.5, 0.5)];
        let sel = select_best_iteration(&rows, 40).unwrap();
        assert_eq!(sel.index, 0);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(matches!(
            select_best_iteration(&[], 40),
            Err(Error::EmptyInput(_))
        ));
    }
}
