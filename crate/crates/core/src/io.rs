//! JSON-lines ingestion formats and dataset directory layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ec_parser::{build_trial, Phase, Trial};
use crate::error::{Error, Result};
use crate::memory::{Demographics, Gender, Patient, Visit};
use crate::taxonomy::{load_taxonomy, CodeType, TaxonomySet};

pub const PATIENTS_FILE: &str = "patients.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const ENROLLMENTS_FILE: &str = "enrollments.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

pub fn taxonomy_file(code_type: CodeType) -> String {
    format!("taxonomy_{}.csv", code_type.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: f64,
    pub gender: String,
    pub visits: Vec<Visit>,
}

impl From<&Patient> for PatientRecord {
    fn from(p: &Patient) -> Self {
        PatientRecord {
            patient_id: p.patient_id.clone(),
            age: p.demographics.age,
            gender: p.demographics.gender.as_str().to_string(),
            visits: p.visits.clone(),
        }
    }
}

impl From<PatientRecord> for Patient {
    fn from(r: PatientRecord) -> Self {
        Patient {
            patient_id: r.patient_id,
            visits: r.visits,
            demographics: Demographics {
                age: r.age,
                gender: Gender::parse(&r.gender),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub phase: Option<String>,
    pub eligibility_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
}

impl TrialRecord {
    pub fn to_trial(&self, strict: bool) -> Result<Trial> {
        let phase = self.phase.as_deref().and_then(Phase::parse);
        let mut trial = build_trial(&self.trial_id, phase, &self.eligibility_text, strict)?;
        trial.cohort = self.cohort.clone();
        Ok(trial)
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_patients(path: &Path) -> Result<Vec<Patient>> {
    let records: Vec<PatientRecord> = read_jsonl(path)?;
    let patients: Vec<Patient> = records.into_iter().map(Patient::from).collect();
    for p in &patients {
        p.validate()?;
    }
    Ok(patients)
}

pub fn load_trials(path: &Path, strict: bool) -> Result<Vec<Trial>> {
    let records: Vec<TrialRecord> = read_jsonl(path)?;
    records.iter().map(|r| r.to_trial(strict)).collect()
}

pub fn load_taxonomies(dir: &Path) -> Result<TaxonomySet> {
    let load = |ct| load_taxonomy(&dir.join(taxonomy_file(ct)), ct);
    Ok(TaxonomySet {
        diagnosis: load(CodeType::Diagnosis)?,
        medication: load(CodeType::Medication)?,
        procedure: load(CodeType::Procedure)?,
    })
}

pub fn save_taxonomies(dir: &Path, taxonomies: &TaxonomySet) -> Result<()> {
    for ct in CodeType::ALL {
        taxonomies.get(ct).save(&dir.join(taxonomy_file(ct)))?;
    }
    Ok(())
}

/// Input locations of a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub taxonomy_dir: PathBuf,
    pub patients: PathBuf,
    pub trials: PathBuf,
    pub enrollments: PathBuf,
    pub labels: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            taxonomy_dir: dir.to_path_buf(),
            patients: dir.join(PATIENTS_FILE),
            trials: dir.join(TRIALS_FILE),
            enrollments: dir.join(ENROLLMENTS_FILE),
            labels: dir.join(LABELS_FILE),
        }
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
