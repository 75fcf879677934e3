//! Parameter-independent caches shared by training, evaluation and the CLI.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::ec_parser::{Criterion, Trial};
use crate::error::{Error, Result};
use crate::matcher::MatchPrediction;
use crate::memory::{patient_levels, ConceptTable, Demographics, MemoryState, Patient, VisitLevels};
use crate::model::{LossSettings, ModelParams, PairEvaluation, PairInput};
use crate::taxonomy::{MissingCodePolicy, TaxonomySet};
use crate::text_encoder::{EncoderBackend, TokenEmbeddingMatrix};
use crate::training::dataset::{CriterionRef, LabeledPair};

struct PatientEntry {
    levels: Vec<VisitLevels>,
    demographics: Demographics,
    num_visits: usize,
}

/// Token matrices for every criterion and visit-level concept embeddings for
/// every patient, computed once from the frozen text encoder.
pub struct PreparedCorpus {
    patients: HashMap<String, PatientEntry>,
    criteria: HashMap<CriterionRef, TokenEmbeddingMatrix>,
    embed_dim: usize,
}

pub fn criterion_ref(c: &Criterion) -> CriterionRef {
    CriterionRef {
        trial_id: c.trial_id.clone(),
        polarity: c.polarity,
        index: c.index,
    }
}

impl PreparedCorpus {
    pub fn build(
        taxonomies: &TaxonomySet,
        encoder: &EncoderBackend,
        patients: &[Patient],
        trials: &[Trial],
        policy: MissingCodePolicy,
    ) -> Result<Self> {
        let concepts = ConceptTable::build(taxonomies, encoder)?;
        let mut patient_map = HashMap::with_capacity(patients.len());
        for p in patients {
            p.validate()?;
            let entry = PatientEntry {
                levels: patient_levels(taxonomies, &concepts, p, policy)?,
                demographics: p.demographics,
                num_visits: p.visits.len(),
            };
            if patient_map.insert(p.patient_id.clone(), entry).is_some() {
                return Err(Error::InvalidInput(format!("duplicate patient id {}", p.patient_id)));
            }
        }
        let mut criteria = HashMap::new();
        for t in trials {
            for c in t.criteria() {
                criteria.insert(criterion_ref(c), encoder.encode_tokens(&c.tokens)?);
            }
        }
        Ok(PreparedCorpus {
            patients: patient_map,
            criteria,
            embed_dim: encoder.embed_dim(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn visits(&self, patient_id: &str) -> Result<&[VisitLevels]> {
        self.patients
            .get(patient_id)
            .map(|p| p.levels.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("unknown patient {patient_id}")))
    }

    pub fn demographics(&self, patient_id: &str) -> Result<&Demographics> {
        self.patients
            .get(patient_id)
            .map(|p| &p.demographics)
            .ok_or_else(|| Error::InvalidInput(format!("unknown patient {patient_id}")))
    }

    pub fn num_visits(&self, patient_id: &str) -> Option<usize> {
        self.patients.get(patient_id).map(|p| p.num_visits)
    }

    pub fn tokens(&self, criterion: &CriterionRef) -> Result<&TokenEmbeddingMatrix> {
        self.criteria.get(criterion).ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown criterion {} {} {}",
                criterion.trial_id, criterion.polarity, criterion.index
            ))
        })
    }

    pub fn pair_input(&self, pair: &LabeledPair) -> Result<PairInput<'_>> {
        Ok(PairInput {
            tokens: self.tokens(&pair.criterion)?,
            visits: self.visits(&pair.patient_id)?,
            demographics: self.demographics(&pair.patient_id)?,
            polarity: pair.criterion.polarity,
            label: pair.label,
        })
    }

    /// Memory state per distinct patient among `patient_ids`.
    pub fn memories<'a>(
        &self,
        params: &ModelParams,
        patient_ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<HashMap<&'a str, MemoryState>> {
        let mut ids: Vec<&str> = patient_ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_par_iter()
            .map(|id| Ok((id, params.encode_memory(self.visits(id)?)?)))
            .collect()
    }

    /// Predictions for `(patient, criterion)` queries, reusing each patient's
    /// memory and each criterion's embedding.
    pub fn predict_many(
        &self,
        params: &ModelParams,
        queries: &[(&str, &CriterionRef)],
    ) -> Result<Vec<MatchPrediction>> {
        let memories = self.memories(params, queries.iter().map(|(p, _)| *p))?;
        let mut crits: Vec<&CriterionRef> = queries.iter().map(|(_, c)| *c).collect();
        crits.sort_unstable();
        crits.dedup();
        let embeddings: HashMap<&CriterionRef, Vec<f64>> = crits
            .into_par_iter()
            .map(|c| Ok((c, params.encode_criterion(self.tokens(c)?)?)))
            .collect::<Result<_>>()?;
        queries
            .par_iter()
            .map(|(p, c)| params.matcher.predict(&memories[p], self.demographics(p)?, &embeddings[c]))
            .collect()
    }

    /// Per-pair predictions and loss terms.
    pub fn evaluate_pairs(
        &self,
        params: &ModelParams,
        pairs: &[&LabeledPair],
        settings: &LossSettings,
    ) -> Result<Vec<PairEvaluation>> {
        let queries: Vec<(&str, &CriterionRef)> = pairs
            .iter()
            .map(|p| (p.patient_id.as_str(), &p.criterion))
            .collect();
        let preds = self.predict_many(params, &queries)?;
        preds
            .into_iter()
            .zip(pairs)
            .map(|(pred, pair)| crate::model::score_prediction(pred, pair.criterion.polarity, pair.label, settings))
            .collect()
    }
}
