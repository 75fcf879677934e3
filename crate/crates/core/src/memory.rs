//! Taxonomy-guided patient memory.
//!
//! Twelve slots, one per (code type, taxonomy level). At every visit the codes
//! of each type are lifted to their ancestors, the concept embeddings at each
//! level are max-pooled, and the pooled vector drives one erase/add update of
//! the matching slot:
//!
//! ```text
//! erase = sigmoid(W_e g + b_e)
//! add   = tanh(W_a g + b_a)
//! m     = m * (1 - erase) + add
//! ```
//!
//! The gate parameters are shared by all slots. Slots start at zero and a
//! slot whose (type, level) never appears stays zero.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{join, Linear, Parameters};
use crate::taxonomy::{CodeType, MissingCodePolicy, TaxonomySet, TAXONOMY_DEPTH};
use crate::tensor::{sigmoid, Tensor};
use crate::text_encoder::EncoderBackend;

pub const NUM_SLOTS: usize = CodeType::ALL.len() * TAXONOMY_DEPTH;

/// Flat slot index for `(code_type, level)`, `level` in `1..=TAXONOMY_DEPTH`.
pub fn slot_index(code_type: CodeType, level: usize) -> usize {
    debug_assert!((1..=TAXONOMY_DEPTH).contains(&level));
    code_type.index() * TAXONOMY_DEPTH + level - 1
}

/// Inverse of [`slot_index`].
pub fn slot_of(index: usize) -> (CodeType, usize) {
    (CodeType::ALL[index / TAXONOMY_DEPTH], index % TAXONOMY_DEPTH + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub t: i64,
    #[serde(rename = "dx", default)]
    pub diagnoses: Vec<String>,
    #[serde(rename = "rx", default)]
    pub medications: Vec<String>,
    #[serde(rename = "px", default)]
    pub procedures: Vec<String>,
}

impl Visit {
    pub fn codes(&self, code_type: CodeType) -> &[String] {
        match code_type {
            CodeType::Diagnosis => &self.diagnoses,
            CodeType::Medication => &self.medications,
            CodeType::Procedure => &self.procedures,
        }
    }

    pub fn num_codes(&self) -> usize {
        self.diagnoses.len() + self.medications.len() + self.procedures.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
    Other,
}

impl Gender {
    pub fn parse(s: &str) -> Gender {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Gender::Male,
            "f" | "female" => Gender::Female,
            _ => Gender::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Other => "other",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demographics {
    pub age: f64,
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub demographics: Demographics,
}

impl Patient {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidInput(format!("patient {}: {why}", self.patient_id)));
        if self.visits.is_empty() {
            return bad("no visits");
        }
        if self.visits.windows(2).any(|w| w[0].t >= w[1].t) {
            return bad("visit ordinals must be strictly increasing");
        }
        if self.visits.iter().any(|v| v.num_codes() == 0) {
            return bad("visit without codes");
        }
        if !self.demographics.age.is_finite() || self.demographics.age < 0.0 {
            return bad("age must be finite and non-negative");
        }
        Ok(())
    }

    /// Every leaf code of `code_type` across all visits.
    pub fn codes(&self, code_type: CodeType) -> impl Iterator<Item = &str> {
        self.visits
            .iter()
            .flat_map(move |v| v.codes(code_type).iter().map(String::as_str))
    }
}

/// Concept embeddings for every node of every taxonomy, computed once.
#[derive(Debug, Clone)]
pub struct ConceptTable {
    embed_dim: usize,
    vectors: HashMap<(CodeType, String), Vec<f64>>,
}

impl ConceptTable {
    pub fn build(taxonomies: &TaxonomySet, encoder: &EncoderBackend) -> Result<Self> {
        let mut vectors = HashMap::new();
        for ct in CodeType::ALL {
            for node in taxonomies.get(ct).nodes() {
                let v = encoder.concept_embedding(&node.description)?;
                vectors.insert((ct, node.node_id.clone()), v);
            }
        }
        Ok(ConceptTable {
            embed_dim: encoder.embed_dim(),
            vectors,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn get(&self, code_type: CodeType, node_id: &str) -> Option<&[f64]> {
        self.vectors
            .get(&(code_type, node_id.to_string()))
            .map(Vec::as_slice)
    }
}

/// Pooled per-level embeddings of one visit, indexed by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitLevels {
    pub slots: Vec<Option<Vec<f64>>>,
}

/// For each code type in the visit and each level, the elementwise max of the
/// concept embeddings of the codes' ancestors at that level.
pub fn visit_level_embeddings(
    taxonomies: &TaxonomySet,
    concepts: &ConceptTable,
    visit: &Visit,
    policy: MissingCodePolicy,
) -> Result<VisitLevels> {
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; NUM_SLOTS];
    for ct in CodeType::ALL {
        let tax = taxonomies.get(ct);
        for code in visit.codes(ct) {
            let chain = match tax.ancestor_chain(code) {
                Ok(chain) => chain,
                Err(e @ (Error::UnknownCode(_) | Error::NotALeaf(_))) => match policy {
                    MissingCodePolicy::Error => return Err(e),
                    MissingCodePolicy::SkipWithWarning => {
                        tracing::warn!(code = code.as_str(), code_type = %ct, "skipping unresolvable code");
                        continue;
                    }
                },
                Err(e) => return Err(e),
            };
            for (depth, node) in chain.iter().enumerate() {
                let v = concepts
                    .get(ct, node)
                    .ok_or_else(|| Error::UnknownCode((*node).to_string()))?;
                let slot = &mut slots[slot_index(ct, depth + 1)];
                match slot {
                    None => *slot = Some(v.to_vec()),
                    Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a = a.max(*b)),
                }
            }
        }
    }
    Ok(VisitLevels { slots })
}

/// Level embeddings for every visit of a patient, in visit order.
pub fn patient_levels(
    taxonomies: &TaxonomySet,
    concepts: &ConceptTable,
    patient: &Patient,
    policy: MissingCodePolicy,
) -> Result<Vec<VisitLevels>> {
    patient
        .visits
        .iter()
        .map(|v| visit_level_embeddings(taxonomies, concepts, v, policy))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub slots: Vec<Vec<f64>>,
}

impl MemoryState {
    pub fn zeros(mem_dim: usize) -> Self {
        MemoryState {
            slots: vec![vec![0.0; mem_dim]; NUM_SLOTS],
        }
    }

    pub fn mem_dim(&self) -> usize {
        self.slots[0].len()
    }

    pub fn slot(&self, code_type: CodeType, level: usize) -> &[f64] {
        &self.slots[slot_index(code_type, level)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryParams {
    pub erase: Linear,
    pub add: Linear,
}

impl MemoryParams {
    pub fn init<R: Rng>(embed_dim: usize, mem_dim: usize, rng: &mut R) -> Self {
        MemoryParams {
            erase: Linear::init(embed_dim, mem_dim, rng),
            add: Linear::init(embed_dim, mem_dim, rng),
        }
    }

    pub fn zeros(embed_dim: usize, mem_dim: usize) -> Self {
        MemoryParams {
            erase: Linear::zeros(embed_dim, mem_dim),
            add: Linear::zeros(embed_dim, mem_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MemoryParams::zeros(self.embed_dim(), self.mem_dim())
    }

    pub fn embed_dim(&self) -> usize {
        self.erase.input_dim()
    }

    pub fn mem_dim(&self) -> usize {
        self.erase.output_dim()
    }
}

impl Parameters for MemoryParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.erase.collect(&join(prefix, "erase"), out);
        self.add.collect(&join(prefix, "add"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.erase.collect_mut(&join(prefix, "erase"), out);
        self.add.collect_mut(&join(prefix, "add"), out);
    }
}

/// `(erase, add)` gate activations for a concept embedding.
pub fn gates(params: &MemoryParams, concept: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("gate input", params.embed_dim(), concept.len())?;
    let erase = params.erase.forward(concept).into_iter().map(sigmoid).collect();
    let add = params.add.forward(concept).into_iter().map(f64::tanh).collect();
    Ok((erase, add))
}

/// `m * (1 - erase) + add`.
pub fn apply_update(slot: &[f64], erase: &[f64], add: &[f64]) -> Result<Vec<f64>> {
    check_dim("erase gate", slot.len(), erase.len())?;
    check_dim("add gate", slot.len(), add.len())?;
    Ok(slot
        .iter()
        .zip(erase)
        .zip(add)
        .map(|((m, e), a)| m * (1.0 - e) + a)
        .collect())
}

struct UpdateRecord {
    slot: usize,
    visit: usize,
    before: Vec<f64>,
    erase: Vec<f64>,
    add: Vec<f64>,
}

/// Memory forward pass over precomputed visit levels, with the trace needed
/// for backpropagation through the visit sequence.
pub struct MemoryForward {
    pub state: MemoryState,
    updates: Vec<UpdateRecord>,
}

pub fn encode_levels(params: &MemoryParams, visits: &[VisitLevels]) -> Result<MemoryForward> {
    let mut state = MemoryState::zeros(params.mem_dim());
    let mut updates = Vec::new();
    for (vi, visit) in visits.iter().enumerate() {
        for (slot, g) in visit.slots.iter().enumerate() {
            let Some(g) = g else { continue };
            let (erase, add) = gates(params, g)?;
            let next = apply_update(&state.slots[slot], &erase, &add)?;
            let before = std::mem::replace(&mut state.slots[slot], next);
            updates.push(UpdateRecord {
                slot,
                visit: vi,
                before,
                erase,
                add,
            });
        }
    }
    Ok(MemoryForward { state, updates })
}

/// Backpropagates `dL/dslots` (final state) into the gate parameters.
pub fn backward_levels(
    params: &MemoryParams,
    visits: &[VisitLevels],
    fwd: &MemoryForward,
    dslots: &[Vec<f64>],
    grad: &mut MemoryParams,
) {
    let mut dm: Vec<Vec<f64>> = dslots.to_vec();
    for rec in fwd.updates.iter().rev() {
        let g = visits[rec.visit].slots[rec.slot]
            .as_deref()
            .expect("recorded update has an input");
        let d_after = &dm[rec.slot];
        let d_erase_pre: Vec<f64> = d_after
            .iter()
            .zip(&rec.before)
            .zip(&rec.erase)
            .map(|((d, m), e)| -d * m * e * (1.0 - e))
            .collect();
        let d_add_pre: Vec<f64> = d_after
            .iter()
            .zip(&rec.add)
            .map(|(d, a)| d * (1.0 - a * a))
            .collect();
        params.erase.backward(g, &d_erase_pre, &mut grad.erase);
        params.add.backward(g, &d_add_pre, &mut grad.add);
        let d_before: Vec<f64> = d_after
            .iter()
            .zip(&rec.erase)
            .map(|(d, e)| d * (1.0 - e))
            .collect();
        dm[rec.slot] = d_before;
    }
}

/// Runs every visit of `patient` through the memory, starting from zero.
pub fn encode_patient(
    taxonomies: &TaxonomySet,
    concepts: &ConceptTable,
    params: &MemoryParams,
    patient: &Patient,
    policy: MissingCodePolicy,
) -> Result<MemoryState> {
    patient.validate()?;
    check_dim("concept embedding", params.embed_dim(), concepts.embed_dim())?;
    let levels = patient_levels(taxonomies, concepts, patient, policy)?;
    Ok(encode_levels(params, &levels)?.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_memory_update_is_add() {
        let m = apply_update(&[0.0, 0.0], &[0.3, 0.9], &[0.5, -0.25]).unwrap();
        assert_eq!(m, vec![0.5, -0.25]);
    }

    #[test]
    fn full_erase_without_add_clears() {
        let m = apply_update(&[4.0, -2.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_update() {
        let m = apply_update(&[2.0, -1.0], &[0.5, 0.25], &[1.0, 1.0]).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-12);
        assert!((m[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn update_dim_mismatch() {
        assert!(matches!(
            apply_update(&[0.0], &[0.1, 0.2], &[0.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn zero_gates() {
        let p = MemoryParams::zeros(3, 2);
        let (e, a) = gates(&p, &[0.0; 3]).unwrap();
        assert_eq!(e, vec![0.5, 0.5]);
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_erase_gate() {
        let mut p = MemoryParams::zeros(1, 1);
        p.erase.bias.data_mut()[0] = 40.0;
        let (e, _) = gates(&p, &[0.0]).unwrap();
        assert!((1.0 - e[0]).abs() < 1e-6);
    }

    #[test]
    fn gates_reject_wrong_dim() {
        let p = MemoryParams::zeros(3, 2);
        assert!(gates(&p, &[0.0; 2]).is_err());
    }

    #[test]
    fn slot_indexing_round_trips() {
        for i in 0..NUM_SLOTS {
            let (ct, level) = slot_of(i);
            assert_eq!(slot_index(ct, level), i);
        }
    }

    #[test]
    fn patient_validation() {
        let visit = |t| Visit {
            t,
            diagnoses: vec!["x".into()],
            medications: vec![],
            procedures: vec![],
        };
        let mut p = Patient {
            patient_id: "p".into(),
            visits: vec![visit(1), visit(2)],
            demographics: Demographics {
                age: 40.0,
                gender: Gender::Female,
            },
        };
        assert!(p.validate().is_ok());
        p.visits = vec![visit(2), visit(2)];
        assert!(p.validate().is_err());
        p.visits = vec![];
        assert!(p.validate().is_err());
    }
}
