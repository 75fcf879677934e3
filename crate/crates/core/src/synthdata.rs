//! Seeded synthetic taxonomies, patients, trials and ground truth.
//!
//! Every trial owns one "topic" root in one primary taxonomy, cycling through
//! diagnosis, medication and procedure. Concept criteria point at nodes
//! inside the topic root: inclusion criteria at any level, exclusion criteria
//! at levels 2-4 in subtrees unrelated to any inclusion concept. A patient is
//! generated for one target trial: its codes come from the topic root only,
//! cover every inclusion concept and avoid the exclusion subtrees. Node
//! descriptions repeat their root's word, so a criterion shares that word
//! with every code of the same topic.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ec_parser::{render_eligibility, Phase, Polarity, Trial};
use crate::error::{Error, Result};
use crate::io::{save_taxonomies, write_jsonl, PatientRecord, TrialRecord, ENROLLMENTS_FILE, LABELS_FILE, PATIENTS_FILE, TRIALS_FILE};
use crate::matcher::MatchLabel;
use crate::memory::{Demographics, Gender, Patient, Visit};
use crate::taxonomy::{CodeType, Taxonomy, TaxonomyNode, TaxonomySet, TAXONOMY_DEPTH};
use crate::training::dataset::{CriterionRef, Enrollment, LabeledPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub n_trials: usize,
    /// Level-1 nodes per taxonomy; must be at least `n_trials`.
    pub roots_per_type: usize,
    /// Children of every internal node.
    pub branching: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub codes_per_visit_min: usize,
    pub codes_per_visit_max: usize,
    pub inclusion_min: usize,
    pub inclusion_max: usize,
    pub exclusion_min: usize,
    pub exclusion_max: usize,
    /// Probability that a criterion is about age or gender.
    pub demographic_rate: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_patients: 200,
            n_trials: 20,
            roots_per_type: 24,
            branching: 3,
            visits_min: 1,
            visits_max: 5,
            codes_per_visit_min: 1,
            codes_per_visit_max: 3,
            inclusion_min: 4,
            inclusion_max: 6,
            exclusion_min: 4,
            exclusion_max: 6,
            demographic_rate: 0.1,
            max_retries: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_patients == 0 || self.n_trials == 0 {
            return bad("n_patients and n_trials must be at least 1");
        }
        if self.roots_per_type < self.n_trials {
            return bad("roots_per_type must be at least n_trials");
        }
        if self.branching < 2 {
            return bad("branching must be at least 2");
        }
        for (lo, hi, what) in [
            (self.visits_min, self.visits_max, "visits"),
            (self.codes_per_visit_min, self.codes_per_visit_max, "codes per visit"),
            (self.inclusion_min, self.inclusion_max, "inclusion criteria"),
            (self.exclusion_min, self.exclusion_max, "exclusion criteria"),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{what} range must satisfy 1 <= min <= max")));
            }
        }
        if !(0.0..1.0).contains(&self.demographic_rate) {
            return bad("demographic_rate must lie in [0, 1)");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}

/// What a synthetic criterion is about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Concept { code_type: CodeType, node_id: String },
    AgeAtLeast { years: u32 },
    AgeAbove { years: u32 },
    Gender { gender: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCriterion {
    #[serde(flatten)]
    pub criterion: CriterionRef,
    pub condition: Condition,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub taxonomies: TaxonomySet,
    pub patients: Vec<Patient>,
    pub trial_records: Vec<TrialRecord>,
    pub trials: Vec<Trial>,
    pub criteria: Vec<SynthCriterion>,
    pub enrollments: Vec<Enrollment>,
    /// Oracle label of every (patient, criterion) pair.
    pub labels: Vec<LabeledPair>,
}

/// Whether some code of the patient has `node_id` on its ancestor chain.
pub fn covers(patient: &Patient, taxonomies: &TaxonomySet, code_type: CodeType, node_id: &str) -> Result<bool> {
    let tax = taxonomies.get(code_type);
    if !tax.contains(node_id) {
        return Err(Error::UnknownConcept(node_id.to_string()));
    }
    for code in patient.codes(code_type) {
        if tax.ancestor_chain(code)?.contains(&node_id) {
            return Ok(true);
        }
    }
    Ok(false)
}

fn holds(patient: &Patient, taxonomies: &TaxonomySet, condition: &Condition) -> Result<bool> {
    let d = &patient.demographics;
    Ok(match condition {
        Condition::Concept { code_type, node_id } => covers(patient, taxonomies, *code_type, node_id)?,
        Condition::AgeAtLeast { years } => d.age >= *years as f64,
        Condition::AgeAbove { years } => d.age > *years as f64,
        Condition::Gender { gender } => d.gender == Gender::parse(gender),
    })
}

/// Inclusion: `match` if the condition holds, else `unknown`. Exclusion:
/// `mismatch` if it does not hold, else `unknown`.
pub fn oracle_match(patient: &Patient, criterion: &SynthCriterion, taxonomies: &TaxonomySet) -> Result<MatchLabel> {
    let h = holds(patient, taxonomies, &criterion.condition)?;
    Ok(match (criterion.criterion.polarity, h) {
        (Polarity::Inclusion, true) => MatchLabel::Match,
        (Polarity::Exclusion, false) => MatchLabel::Mismatch,
        _ => MatchLabel::Unknown,
    })
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

const LEVEL_NOUNS: [[&str; TAXONOMY_DEPTH]; 3] = [
    ["disorders", "disease", "syndrome", "condition"],
    ["agents", "class", "preparation", "tablets"],
    ["procedures", "surgery", "technique", "intervention"],
];

fn inclusion_templates(ct: CodeType) -> &'static [&'static str] {
    match ct {
        CodeType::Diagnosis => &["diagnosed with {}", "history of {}", "confirmed {}"],
        CodeType::Medication => &["currently receiving {}", "treated with {}"],
        CodeType::Procedure => &["underwent {}", "prior {}"],
    }
}

fn exclusion_templates(ct: CodeType) -> &'static [&'static str] {
    match ct {
        CodeType::Diagnosis => &["no history of {}", "patients with {} are not eligible"],
        CodeType::Medication => &["must not have received {}", "no prior treatment with {}"],
        CodeType::Procedure => &["no prior {}", "must not have undergone {}"],
    }
}

fn type_prefix(ct: CodeType) -> char {
    match ct {
        CodeType::Diagnosis => 'D',
        CodeType::Medication => 'M',
        CodeType::Procedure => 'P',
    }
}

fn fresh_word<R: Rng>(rng: &mut R, used: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

struct TypeTree {
    taxonomy: Taxonomy,
    roots: Vec<String>,
    children: HashMap<String, Vec<String>>,
}

impl TypeTree {
    fn build<R: Rng>(ct: CodeType, config: &SynthConfig, rng: &mut R, used: &mut HashSet<String>) -> Result<Self> {
        let nouns = LEVEL_NOUNS[ct.index()];
        let mut nodes = Vec::new();
        let mut roots = Vec::new();
        let mut children: HashMap<String, Vec<String>> = HashMap::new();
        for r in 0..config.roots_per_type {
            let root_word = fresh_word(rng, used);
            let root_id = format!("{}{:02}", type_prefix(ct), r);
            nodes.push(TaxonomyNode {
                node_id: root_id.clone(),
                level: 1,
                parent_id: None,
                description: format!("{root_word} {}", nouns[0]),
                code_type: ct,
            });
            roots.push(root_id.clone());
            let mut frontier = vec![root_id];
            for level in 2..=TAXONOMY_DEPTH {
                let mut next = Vec::new();
                for parent in &frontier {
                    for i in 0..config.branching {
                        let word = fresh_word(rng, used);
                        let id = format!("{parent}.{i}");
                        nodes.push(TaxonomyNode {
                            node_id: id.clone(),
                            level: level as u8,
                            parent_id: Some(parent.clone()),
                            description: format!("{word} {root_word} {}", nouns[level - 1]),
                            code_type: ct,
                        });
                        children.entry(parent.clone()).or_default().push(id.clone());
                        next.push(id);
                    }
                }
                frontier = next;
            }
        }
        Ok(TypeTree {
            taxonomy: Taxonomy::from_nodes(ct, nodes)?,
            roots,
            children,
        })
    }

    /// A uniformly random descent from `root` to `level`.
    fn descend<R: Rng>(&self, root: &str, level: usize, rng: &mut R) -> String {
        let mut cur = root.to_string();
        for _ in 1..level {
            cur = self.children[&cur].choose(rng).expect("internal node has children").clone();
        }
        cur
    }

    fn related(&self, a: &str, b: &str) -> bool {
        self.taxonomy.is_ancestor_or_self(a, b) || self.taxonomy.is_ancestor_or_self(b, a)
    }
}

struct TrialPlan {
    inclusion: Vec<Condition>,
    exclusion: Vec<Condition>,
    texts_inc: Vec<String>,
    texts_exc: Vec<String>,
}

fn describe(trees: &[TypeTree; 3], ct: CodeType, node: &str) -> String {
    trees[ct.index()]
        .taxonomy
        .description_of(node)
        .expect("generated node")
        .to_string()
}

/// The taxonomy a trial's concept criteria and its patients' codes use.
fn primary_type(topic: usize) -> CodeType {
    CodeType::ALL[topic % 3]
}

fn fill(template: &str, value: &str) -> String {
    template.replacen("{}", value, 1)
}

fn plan_trial<R: Rng>(topic: usize, trees: &[TypeTree; 3], config: &SynthConfig, rng: &mut R) -> Option<TrialPlan> {
    let m = rng.gen_range(config.inclusion_min..=config.inclusion_max);
    let n = rng.gen_range(config.exclusion_min..=config.exclusion_max);
    let mut inclusion = Vec::with_capacity(m);
    let mut texts_inc = Vec::with_capacity(m);
    let mut gender_used = false;
    let mut min_age = 18u32;
    let mut max_age = 90u32;
    for j in 0..m {
        if j > 0 && rng.gen_bool(config.demographic_rate) {
            if !gender_used && rng.gen_bool(0.5) {
                gender_used = true;
                let g = *["male", "female"].choose(rng).expect("non-empty");
                texts_inc.push(format!("{g} patients"));
                inclusion.push(Condition::Gender { gender: g.to_string() });
            } else {
                let years = rng.gen_range(3..=13) * 5;
                min_age = min_age.max(years);
                texts_inc.push(format!("age {years} years or older"));
                inclusion.push(Condition::AgeAtLeast { years });
            }
            continue;
        }
        let ct = primary_type(topic);
        let tree = &trees[ct.index()];
        let level = rng.gen_range(1..=TAXONOMY_DEPTH);
        let node = tree.descend(&tree.roots[topic], level, rng);
        let cond = Condition::Concept { code_type: ct, node_id: node.clone() };
        if inclusion.contains(&cond) {
            return None;
        }
        let t = inclusion_templates(ct).choose(rng).expect("templates");
        texts_inc.push(fill(t, &describe(trees, ct, &node)));
        inclusion.push(cond);
    }
    let mut exclusion = Vec::with_capacity(n);
    let mut texts_exc = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.gen_bool(config.demographic_rate) {
            if !gender_used && rng.gen_bool(0.5) {
                gender_used = true;
                let g = *["male", "female"].choose(rng).expect("non-empty");
                texts_exc.push(format!("{g} patients are not eligible"));
                exclusion.push(Condition::Gender { gender: g.to_string() });
            } else {
                let years = rng.gen_range(12..=17) * 5;
                max_age = max_age.min(years);
                texts_exc.push(format!("patients older than {years} years are not eligible"));
                exclusion.push(Condition::AgeAbove { years });
            }
            continue;
        }
        let mut placed = false;
        for _ in 0..config.max_retries {
            let ct = primary_type(topic);
            let tree = &trees[ct.index()];
            let level = rng.gen_range(2..=TAXONOMY_DEPTH);
            let node = tree.descend(&tree.roots[topic], level, rng);
            let clashes = inclusion.iter().chain(&exclusion).any(|c| match c {
                Condition::Concept { code_type, node_id } => *code_type == ct && tree.related(node_id, &node),
                _ => false,
            });
            if clashes {
                continue;
            }
            let t = exclusion_templates(ct).choose(rng).expect("templates");
            texts_exc.push(fill(t, &describe(trees, ct, &node)));
            exclusion.push(Condition::Concept { code_type: ct, node_id: node });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    if min_age > max_age {
        return None;
    }
    Some(TrialPlan {
        inclusion,
        exclusion,
        texts_inc,
        texts_exc,
    })
}

fn is_excluded(trees: &[TypeTree; 3], ct: CodeType, leaf: &str, exclusion: &[Condition]) -> bool {
    exclusion.iter().any(|c| match c {
        Condition::Concept { code_type, node_id } => {
            *code_type == ct && trees[ct.index()].taxonomy.is_ancestor_or_self(node_id, leaf)
        }
        _ => false,
    })
}

fn pick_leaf<R: Rng>(
    trees: &[TypeTree; 3],
    ct: CodeType,
    under: &str,
    exclusion: &[Condition],
    rng: &mut R,
) -> Option<String> {
    let leaves: Vec<&str> = trees[ct.index()]
        .taxonomy
        .leaves_under(under)
        .into_iter()
        .filter(|l| !is_excluded(trees, ct, l, exclusion))
        .collect();
    leaves.choose(rng).map(|s| s.to_string())
}

fn make_patient<R: Rng>(
    id: String,
    topic: usize,
    plan: &TrialPlan,
    trees: &[TypeTree; 3],
    config: &SynthConfig,
    rng: &mut R,
) -> Option<Patient> {
    let mut required: Vec<(CodeType, String)> = Vec::new();
    for c in &plan.inclusion {
        if let Condition::Concept { code_type, node_id } = c {
            required.push((*code_type, pick_leaf(trees, *code_type, node_id, &plan.exclusion, rng)?));
        }
    }
    let ct = primary_type(topic);
    let root = &trees[ct.index()].roots[topic];
    required.push((ct, pick_leaf(trees, ct, root, &plan.exclusion, rng)?));
    required.shuffle(rng);
    let n_visits = rng.gen_range(config.visits_min..=config.visits_max);
    let mut visits: Vec<Vec<(CodeType, String)>> = vec![Vec::new(); n_visits];
    for (k, code) in required.into_iter().enumerate() {
        visits[k % n_visits].push(code);
    }
    for codes in visits.iter_mut() {
        let target = rng.gen_range(config.codes_per_visit_min..=config.codes_per_visit_max);
        while codes.len() < target {
            codes.push((ct, pick_leaf(trees, ct, root, &plan.exclusion, rng)?));
        }
    }
    let visits = visits
        .into_iter()
        .enumerate()
        .map(|(t, codes)| {
            let mut v = Visit {
                t: t as i64 + 1,
                diagnoses: vec![],
                medications: vec![],
                procedures: vec![],
            };
            for (ct, code) in codes {
                let list = match ct {
                    CodeType::Diagnosis => &mut v.diagnoses,
                    CodeType::Medication => &mut v.medications,
                    CodeType::Procedure => &mut v.procedures,
                };
                if !list.contains(&code) {
                    list.push(code);
                }
            }
            v
        })
        .collect();

    let mut lo = 18u32;
    let mut hi = 90u32;
    let mut gender = None;
    for c in &plan.inclusion {
        match c {
            Condition::AgeAtLeast { years } => lo = lo.max(*years),
            Condition::Gender { gender: g } => gender = Some(Gender::parse(g)),
            _ => {}
        }
    }
    let mut banned = None;
    for c in &plan.exclusion {
        match c {
            Condition::AgeAbove { years } => hi = hi.min(*years),
            Condition::Gender { gender: g } => banned = Some(Gender::parse(g)),
            _ => {}
        }
    }
    let age = rng.gen_range(lo..=hi) as f64;
    let gender = gender.unwrap_or_else(|| loop {
        let g = match rng.gen_range(0..25) {
            0..=11 => Gender::Male,
            12..=23 => Gender::Female,
            _ => Gender::Other,
        };
        if Some(g) != banned {
            break g;
        }
    });
    Some(Patient {
        patient_id: id,
        visits,
        demographics: Demographics { age, gender },
    })
}

fn enrolls(patient: &Patient, criteria: &[&SynthCriterion], taxonomies: &TaxonomySet) -> Result<bool> {
    for c in criteria {
        let want = match c.criterion.polarity {
            Polarity::Inclusion => MatchLabel::Match,
            Polarity::Exclusion => MatchLabel::Mismatch,
        };
        if oracle_match(patient, c, taxonomies)? != want {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Generates a complete dataset; a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used: HashSet<String> = [
        "no", "not", "of", "with", "by", "age", "years", "or", "older", "than", "male", "female", "patients",
        "prior", "are", "eligible", "must", "have",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let trees = [
        TypeTree::build(CodeType::Diagnosis, config, &mut rng, &mut used)?,
        TypeTree::build(CodeType::Medication, config, &mut rng, &mut used)?,
        TypeTree::build(CodeType::Procedure, config, &mut rng, &mut used)?,
    ];
    let taxonomies = TaxonomySet {
        diagnosis: trees[0].taxonomy.clone(),
        medication: trees[1].taxonomy.clone(),
        procedure: trees[2].taxonomy.clone(),
    };

    let mut plans = Vec::with_capacity(config.n_trials);
    let mut trial_records = Vec::with_capacity(config.n_trials);
    let mut criteria = Vec::new();
    for topic in 0..config.n_trials {
        let plan = (0..config.max_retries)
            .find_map(|_| plan_trial(topic, &trees, config, &mut rng))
            .ok_or_else(|| Error::InfeasibleConfig(format!("could not build criteria for trial {topic}")))?;
        let trial_id = format!("T{:03}", topic + 1);
        let phase = [Phase::I, Phase::II, Phase::III, Phase::IV][rng.gen_range(0..4)];
        let ct = primary_type(topic);
        let cohort = taxonomies
            .get(ct)
            .description_of(&trees[ct.index()].roots[topic])
            .expect("root exists")
            .to_string();
        for (polarity, conds, texts) in [
            (Polarity::Inclusion, &plan.inclusion, &plan.texts_inc),
            (Polarity::Exclusion, &plan.exclusion, &plan.texts_exc),
        ] {
            for (index, (cond, text)) in conds.iter().zip(texts).enumerate() {
                criteria.push(SynthCriterion {
                    criterion: CriterionRef {
                        trial_id: trial_id.clone(),
                        polarity,
                        index,
                    },
                    condition: cond.clone(),
                    text: text.clone(),
                });
            }
        }
        trial_records.push(TrialRecord {
            trial_id,
            phase: Some(phase.as_str().to_string()),
            eligibility_text: render_eligibility(&plan.texts_inc, &plan.texts_exc),
            cohort: Some(cohort),
        });
        plans.push(plan);
    }
    let trials = trial_records
        .iter()
        .map(|r| r.to_trial(true))
        .collect::<Result<Vec<_>>>()?;
    let by_trial: Vec<Vec<&SynthCriterion>> = trials
        .iter()
        .map(|t| criteria.iter().filter(|c| c.criterion.trial_id == t.trial_id).collect())
        .collect();

    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let topic = p % config.n_trials;
        let id = format!("P{:04}", p + 1);
        let mut made = None;
        for _ in 0..config.max_retries {
            if let Some(candidate) = make_patient(id.clone(), topic, &plans[topic], &trees, config, &mut rng) {
                if enrolls(&candidate, &by_trial[topic], &taxonomies)? {
                    made = Some(candidate);
                    break;
                }
            }
        }
        patients.push(made.ok_or_else(|| {
            Error::InfeasibleConfig(format!("no enrollable patient for trial {}", trials[topic].trial_id))
        })?);
    }

    let mut enrollments = Vec::new();
    let mut labels = Vec::with_capacity(patients.len() * criteria.len());
    for patient in &patients {
        for (t, trial) in trials.iter().enumerate() {
            if enrolls(patient, &by_trial[t], &taxonomies)? {
                enrollments.push(Enrollment {
                    patient_id: patient.patient_id.clone(),
                    trial_id: trial.trial_id.clone(),
                });
            }
            for c in &by_trial[t] {
                labels.push(LabeledPair {
                    patient_id: patient.patient_id.clone(),
                    criterion: c.criterion.clone(),
                    label: oracle_match(patient, c, &taxonomies)?,
                });
            }
        }
    }
    Ok(SynthDataset {
        taxonomies,
        patients,
        trial_records,
        trials,
        criteria,
        enrollments,
        labels,
    })
}

/// Writes the dataset in the ingestion formats.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    crate::io::create_dir(dir)?;
    save_taxonomies(dir, &data.taxonomies)?;
    let patients: Vec<PatientRecord> = data.patients.iter().map(PatientRecord::from).collect();
    write_jsonl(&dir.join(PATIENTS_FILE), &patients)?;
    write_jsonl(&dir.join(TRIALS_FILE), &data.trial_records)?;
    write_jsonl(&dir.join(ENROLLMENTS_FILE), &data.enrollments)?;
    write_jsonl(&dir.join(LABELS_FILE), &data.labels)
}

/// Number of labels of each class, in class order.
pub fn label_histogram(labels: &[LabeledPair]) -> [usize; 3] {
    let mut h = [0; 3];
    for l in labels {
        h[l.label.index()] += 1;
    }
    h
}

/// Trial ids each patient is enrolled in.
pub fn enrollment_index(enrollments: &[Enrollment]) -> HashMap<&str, BTreeSet<&str>> {
    let mut out: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for e in enrollments {
        out.entry(e.patient_id.as_str()).or_default().insert(e.trial_id.as_str());
    }
    out
}
