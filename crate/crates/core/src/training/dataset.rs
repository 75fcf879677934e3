//! Labelled (patient, criterion) pairs and patient-level splits.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ec_parser::{Polarity, Trial};
use crate::error::{Error, Result};
use crate::matcher::MatchLabel;
use crate::memory::Patient;

pub const TEST_FRACTION: f64 = 0.3;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Enrollment {
    pub patient_id: String,
    pub trial_id: String,
}

/// Identifies one criterion of one trial.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CriterionRef {
    pub trial_id: String,
    pub polarity: Polarity,
    #[serde(rename = "criterion_index")]
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub patient_id: String,
    #[serde(flatten)]
    pub criterion: CriterionRef,
    pub label: MatchLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<LabeledPair>,
    pub train_patients: BTreeSet<String>,
    pub validation_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
}

impl Dataset {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        if self.train_patients.contains(patient_id) {
            Some(Split::Train)
        } else if self.validation_patients.contains(patient_id) {
            Some(Split::Validation)
        } else if self.test_patients.contains(patient_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn pairs_in(&self, split: Split) -> Vec<&LabeledPair> {
        self.pairs
            .iter()
            .filter(|p| self.split_of(&p.patient_id) == Some(split))
            .collect()
    }
}

fn pick<'a, T, R: Rng>(items: &'a [T], rng: &mut R) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.gen_range(0..items.len())])
    }
}

/// Builds labelled pairs from enrollments.
///
/// Every enrollment contributes its trial's inclusion criteria as `match` and
/// exclusion criteria as `mismatch`. For every criterion of every trial with
/// at least one enrollment, one enrolled patient is drawn and paired with one
/// inclusion and one exclusion criterion from trials that patient is not
/// enrolled in; both pairs are labelled `unknown`. Patients are then split
/// 30% test and the rest 90/10 train/validation.
pub fn make_dataset(
    patients: &[Patient],
    trials: &[Trial],
    enrollments: &[Enrollment],
    seed: u64,
) -> Result<Dataset> {
    if trials.len() < 2 {
        return Err(Error::InsufficientTrials(trials.len()));
    }
    let trial_by_id: HashMap<&str, &Trial> = trials.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let patient_ids: HashSet<&str> = patients.iter().map(|p| p.patient_id.as_str()).collect();

    let mut seen = HashSet::new();
    let mut enrolled_in: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut enrolled_patients: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut pairs = Vec::new();
    for en in enrollments {
        if !seen.insert(en) {
            continue;
        }
        let trial = *trial_by_id
            .get(en.trial_id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("enrollment references unknown trial {}", en.trial_id)))?;
        if !patient_ids.contains(en.patient_id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "enrollment references unknown patient {}",
                en.patient_id
            )));
        }
        if trial.num_criteria() == 0 {
            return Err(Error::NoCriteria(trial.trial_id.clone()));
        }
        enrolled_in
            .entry(en.patient_id.as_str())
            .or_default()
            .insert(trial.trial_id.as_str());
        enrolled_patients
            .entry(trial.trial_id.as_str())
            .or_default()
            .push(en.patient_id.as_str());
        for c in trial.criteria() {
            let label = match c.polarity {
                Polarity::Inclusion => MatchLabel::Match,
                Polarity::Exclusion => MatchLabel::Mismatch,
            };
            pairs.push(LabeledPair {
                patient_id: en.patient_id.clone(),
                criterion: CriterionRef {
                    trial_id: trial.trial_id.clone(),
                    polarity: c.polarity,
                    index: c.index,
                },
                label,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in trials {
        let Some(members) = enrolled_patients.get(trial.trial_id.as_str()) else {
            continue;
        };
        for _ in 0..trial.num_criteria() {
            let patient = *pick(members, &mut rng).expect("trial has enrollments");
            let own = &enrolled_in[patient];
            for polarity in [Polarity::Inclusion, Polarity::Exclusion] {
                let has = |t: &&Trial| match polarity {
                    Polarity::Inclusion => !t.inclusion.is_empty(),
                    Polarity::Exclusion => !t.exclusion.is_empty(),
                };
                let mut candidates: Vec<&Trial> = trials
                    .iter()
                    .filter(|t| !own.contains(t.trial_id.as_str()) && has(t))
                    .collect();
                if candidates.is_empty() {
                    candidates = trials
                        .iter()
                        .filter(|t| t.trial_id != trial.trial_id && has(t))
                        .collect();
                }
                let Some(other) = pick(&candidates, &mut rng) else {
                    tracing::warn!(trial = %trial.trial_id, %polarity, "no other trial to sample an unknown criterion from");
                    continue;
                };
                let pool = match polarity {
                    Polarity::Inclusion => &other.inclusion,
                    Polarity::Exclusion => &other.exclusion,
                };
                let c = pick(pool, &mut rng).expect("candidate has criteria of this polarity");
                pairs.push(LabeledPair {
                    patient_id: patient.to_string(),
                    criterion: CriterionRef {
                        trial_id: other.trial_id.clone(),
                        polarity,
                        index: c.index,
                    },
                    label: MatchLabel::Unknown,
                });
            }
        }
    }

    let mut order: Vec<&str> = patients.iter().map(|p| p.patient_id.as_str()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed);
    split_rng.set_stream(1);
    order.shuffle(&mut split_rng);
    let n_test = (order.len() as f64 * TEST_FRACTION).round() as usize;
    let rest = order.len() - n_test;
    let n_val = (rest as f64 * VALIDATION_FRACTION).round() as usize;
    let to_set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    Ok(Dataset {
        pairs,
        test_patients: to_set(&order[..n_test]),
        validation_patients: to_set(&order[n_test..n_test + n_val]),
        train_patients: to_set(&order[n_test + n_val..]),
    })
}
