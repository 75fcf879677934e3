//! Criteria-level metrics, trial-level aggregation, stratified reports and
//! PCA projection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ec_parser::{Phase, Polarity};
use crate::error::{Error, Result};
use crate::matcher::{MatchLabel, NUM_CLASSES};
use crate::tensor::{argmax, dot, norm};

pub const THRESHOLDS: [f64; 4] = [0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriteriaMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub auroc_micro: Option<f64>,
    pub auprc_micro: Option<f64>,
}

/// Mann-Whitney AUROC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision. Tied scores enter the ranking together.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| positive[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Accuracy of the argmax prediction plus micro-averaged AUROC and AUPRC over
/// the flattened (pair, class) scores. The ranking metrics are absent when
/// fewer than two distinct labels occur.
pub fn criteria_metrics(predictions: &[(Vec<f64>, MatchLabel)]) -> Result<CriteriaMetrics> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let mut correct = 0usize;
    let mut scores = Vec::with_capacity(predictions.len() * NUM_CLASSES);
    let mut positive = Vec::with_capacity(predictions.len() * NUM_CLASSES);
    let mut distinct = [false; NUM_CLASSES];
    for (probs, label) in predictions {
        if probs.len() != NUM_CLASSES {
            return Err(Error::DimMismatch {
                context: "class probabilities",
                expected: NUM_CLASSES,
                actual: probs.len(),
            });
        }
        if argmax(probs) == label.index() {
            correct += 1;
        }
        distinct[label.index()] = true;
        for (k, &s) in probs.iter().enumerate() {
            scores.push(s);
            positive.push(k == label.index());
        }
    }
    let ranking = distinct.iter().filter(|&&d| d).count() >= 2;
    Ok(CriteriaMetrics {
        n: predictions.len(),
        accuracy: correct as f64 / predictions.len() as f64,
        auroc_micro: if ranking { auroc(&scores, &positive).ok() } else { None },
        auprc_micro: if ranking {
            average_precision(&scores, &positive).ok()
        } else {
            None
        },
    })
}

/// Label a criterion must receive for the patient to qualify.
pub fn required_label(polarity: Polarity) -> MatchLabel {
    match polarity {
        Polarity::Inclusion => MatchLabel::Match,
        Polarity::Exclusion => MatchLabel::Mismatch,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub polarity: Polarity,
    pub criterion_index: usize,
    pub predicted: MatchLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMatchResult {
    pub patient_id: String,
    pub trial_id: String,
    pub criteria: Vec<CriterionVerdict>,
    pub fraction_correct: f64,
    /// `(threshold, matched)` in threshold order.
    pub matched_at: Vec<(f64, bool)>,
}

impl TrialMatchResult {
    pub fn matched(&self, threshold: f64) -> Option<bool> {
        self.matched_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|(_, m)| *m)
    }
}

/// Fraction of all criteria predicted with their required label, and whether
/// that fraction reaches each threshold.
pub fn aggregate_trial(
    patient_id: &str,
    trial_id: &str,
    criteria: Vec<CriterionVerdict>,
    thresholds: &[f64],
) -> Result<TrialMatchResult> {
    if criteria.is_empty() {
        return Err(Error::NoCriteria(trial_id.to_string()));
    }
    let n = criteria.len();
    let correct = criteria
        .iter()
        .filter(|c| c.predicted == required_label(c.polarity))
        .count();
    let matched_at = thresholds
        .iter()
        .map(|&t| (t, correct as f64 >= t * n as f64 - 1e-9))
        .collect();
    Ok(TrialMatchResult {
        patient_id: patient_id.to_string(),
        trial_id: trial_id.to_string(),
        criteria,
        fraction_correct: correct as f64 / n as f64,
        matched_at,
    })
}

/// Threshold key as used in JSON reports.
pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

/// Share of results matched at each threshold.
pub fn trial_accuracy_by_threshold(results: &[&TrialMatchResult], thresholds: &[f64]) -> BTreeMap<String, f64> {
    thresholds
        .iter()
        .map(|&t| {
            let hits = results.iter().filter(|r| r.matched(t) == Some(true)).count();
            let acc = if results.is_empty() {
                0.0
            } else {
                hits as f64 / results.len() as f64
            };
            (threshold_key(t), acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordLength {
    Short,
    Medium,
    Long,
}

impl RecordLength {
    pub fn of(num_visits: usize) -> RecordLength {
        match num_visits {
            0 | 1 => RecordLength::Short,
            2 | 3 => RecordLength::Medium,
            _ => RecordLength::Long,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordLength::Short => "short",
            RecordLength::Medium => "medium",
            RecordLength::Long => "long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub group: String,
    pub n: usize,
    pub accuracy_by_threshold: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub record_length: Vec<StratumRow>,
    pub phase: Vec<StratumRow>,
    pub cohort: Vec<StratumRow>,
}

/// Per-result context needed for stratification.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumKeys {
    pub num_visits: usize,
    pub phase: Option<Phase>,
    pub cohort: Option<String>,
}

fn rows(groups: Vec<(String, Vec<&TrialMatchResult>)>, thresholds: &[f64]) -> Vec<StratumRow> {
    groups
        .into_iter()
        .map(|(group, members)| StratumRow {
            group,
            n: members.len(),
            accuracy_by_threshold: trial_accuracy_by_threshold(&members, thresholds),
        })
        .collect()
}

/// Trial-level accuracy grouped by record length (1 / 2-3 / 4+ visits), by
/// trial phase and by cohort tag. All three length buckets are always
/// reported, empty ones with `n = 0`.
pub fn stratified_report(
    results: &[TrialMatchResult],
    keys: impl Fn(&TrialMatchResult) -> StratumKeys,
    thresholds: &[f64],
) -> StratifiedReport {
    let mut by_length: BTreeMap<RecordLength, Vec<&TrialMatchResult>> = [
        (RecordLength::Short, vec![]),
        (RecordLength::Medium, vec![]),
        (RecordLength::Long, vec![]),
    ]
    .into_iter()
    .collect();
    let mut by_phase: BTreeMap<String, Vec<&TrialMatchResult>> = BTreeMap::new();
    let mut by_cohort: BTreeMap<String, Vec<&TrialMatchResult>> = BTreeMap::new();
    for r in results {
        let k = keys(r);
        by_length.entry(RecordLength::of(k.num_visits)).or_default().push(r);
        let phase = k.phase.map_or("unspecified", Phase::as_str).to_string();
        by_phase.entry(phase).or_default().push(r);
        if let Some(c) = k.cohort {
            by_cohort.entry(c).or_default().push(r);
        }
    }
    StratifiedReport {
        record_length: rows(
            by_length.into_iter().map(|(k, v)| (k.as_str().to_string(), v)).collect(),
            thresholds,
        ),
        phase: rows(by_phase.into_iter().collect(), thresholds),
        cohort: rows(by_cohort.into_iter().collect(), thresholds),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub points: Vec<Vec<f64>>,
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Set when fewer than `k` components carry variance; the missing ones
    /// are zero vectors.
    pub rank_deficient: bool,
}

const POWER_MAX_ITERS: usize = 20_000;
const POWER_TOL: f64 = 1e-13;

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Projects mean-centred `vectors` onto the top-`k` principal directions,
/// found by power iteration with deflation.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<PcaProjection> {
    let n = vectors.len();
    if n < k + 1 {
        return Err(Error::InvalidInput(format!("PCA needs at least {} vectors, got {n}", k + 1)));
    }
    let dim = vectors[0].len();
    if k > dim {
        return Err(Error::InvalidInput(format!("cannot take {k} components of {dim}-d data")));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimMismatch {
            context: "PCA input",
            expected: dim,
            actual: v.len(),
        });
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for v in &centred {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += v[i] * v[j] / (n - 1) as f64;
            }
        }
    }
    let scale = (0..dim).map(|i| cov[i][i]).sum::<f64>().max(1.0);
    let mut deflated = cov.clone();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut rank_deficient = false;
    for c in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + ((i * 7 + c * 13) % 11) as f64 / 11.0).collect();
        orthogonalize(&mut v, &components);
        let mut found = false;
        for _ in 0..POWER_MAX_ITERS {
            let nv = norm(&v);
            if nv < 1e-300 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            let mut w = mat_vec(&deflated, &v);
            orthogonalize(&mut w, &components);
            let nw = norm(&w);
            if nw <= 1e-12 * scale {
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            found = true;
            if diff < POWER_TOL {
                break;
            }
        }
        let lambda = if found { dot(&v, &mat_vec(&cov, &v)) } else { 0.0 };
        if !found || lambda <= 1e-12 * scale {
            rank_deficient = true;
            components.push(vec![0.0; dim]);
            eigenvalues.push(0.0);
            continue;
        }
        for i in 0..dim {
            for j in 0..dim {
                deflated[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let points = centred
        .iter()
        .map(|x| components.iter().map(|c| dot(x, c)).collect())
        .collect();
    Ok(PcaProjection {
        points,
        components,
        eigenvalues,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation_and_ties() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.5, 0.2], &[true, true]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn average_precision_of_a_perfect_ranking() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    }

    #[test]
    fn single_label_has_no_ranking_metrics() {
        let preds = vec![(vec![0.6, 0.3, 0.1], MatchLabel::Match); 3];
        let m = criteria_metrics(&preds).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.auroc_micro.is_none() && m.auprc_micro.is_none());
    }

    #[test]
    fn buckets() {
        assert_eq!(RecordLength::of(1), RecordLength::Short);
        assert_eq!(RecordLength::of(3), RecordLength::Medium);
        assert_eq!(RecordLength::of(4), RecordLength::Long);
    }

    #[test]
    fn no_criteria() {
        assert!(matches!(
            aggregate_trial("p", "t", vec![], &THRESHOLDS),
            Err(Error::NoCriteria(_))
        ));
    }
}
