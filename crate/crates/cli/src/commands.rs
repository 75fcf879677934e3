//! The five workflows. Each returns a JSON summary that `main` prints on
//! standard output; the documented artifacts are written to disk.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use compose_core::corpus::{criterion_ref, PreparedCorpus};
use compose_core::ec_parser::{Criterion, Polarity, Trial};
use compose_core::evaluation::{
    aggregate_trial, pca_project, required_label, stratified_report, threshold_key, trial_accuracy_by_threshold,
    CriteriaMetrics, CriterionVerdict, StratifiedReport, StratumKeys, TrialMatchResult, THRESHOLDS,
};
use compose_core::io::{create_dir, load_patients, load_taxonomies, load_trials, read_jsonl, write_jsonl};
use compose_core::matcher::{MatchLabel, MatchPrediction};
use compose_core::memory::{slot_of, Patient};
use compose_core::model::{load_model, save_model, EncoderSpec, ModelHeader, ModelParams};
use compose_core::synthdata::{generate, label_histogram, write_dataset};
use compose_core::taxonomy::TaxonomySet;
use compose_core::text_encoder::{EncoderBackend, FeatureHashEncoder, PrecomputedEncoder};
use compose_core::training::dataset::{Dataset, Split};
use compose_core::training::{make_dataset, score_pairs, train, write_metrics_csv, Enrollment};
use compose_core::Error;

use crate::config::{EncoderConfig, RunConfig};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CRITERIA_FILE: &str = "criteria.jsonl";

type Result<T> = std::result::Result<T, CliError>;

pub fn match_file(patient_id: &str, trial_id: &str) -> String {
    format!("match_{patient_id}_{trial_id}.json")
}

pub fn attention_file(patient_id: &str, trial_id: &str) -> String {
    format!("attention_{patient_id}_{trial_id}.csv")
}

pub fn pca_file(patient_id: &str, trial_id: &str) -> String {
    format!("pca_{patient_id}_{trial_id}.csv")
}

struct Inputs {
    taxonomies: TaxonomySet,
    patients: Vec<Patient>,
    trials: Vec<Trial>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let paths = cfg.paths.data_paths();
    Ok(Inputs {
        taxonomies: load_taxonomies(&paths.taxonomy_dir)?,
        patients: load_patients(&paths.patients)?,
        trials: load_trials(&paths.trials, cfg.strict_parsing)?,
    })
}

fn load_enrollments(cfg: &RunConfig) -> Result<Vec<Enrollment>> {
    Ok(read_jsonl(&cfg.paths.data_paths().enrollments)?)
}

fn encoder_from_config(cfg: &EncoderConfig) -> Result<EncoderBackend> {
    Ok(match cfg {
        EncoderConfig::FeatureHash(c) => EncoderBackend::FeatureHash(FeatureHashEncoder::new(*c)?),
        EncoderConfig::PrecomputedFile { path, embed_dim } => {
            EncoderBackend::Precomputed(PrecomputedEncoder::load(path, *embed_dim)?)
        }
    })
}

/// The encoder a saved model was trained with. Hash encoders are fully
/// described by the header; precomputed embeddings come from the config.
fn encoder_for_model(header: &ModelHeader, cfg: &EncoderConfig) -> Result<EncoderBackend> {
    match (&header.encoder, cfg) {
        (EncoderSpec::FeatureHash(c), _) => Ok(EncoderBackend::FeatureHash(FeatureHashEncoder::new(*c)?)),
        (EncoderSpec::PrecomputedFile { embed_dim }, EncoderConfig::PrecomputedFile { path, .. }) => {
            Ok(EncoderBackend::Precomputed(PrecomputedEncoder::load(path, *embed_dim)?))
        }
        (EncoderSpec::PrecomputedFile { .. }, _) => Err(CliError::Config(
            "model was trained on precomputed embeddings; set encoder.kind = precomputed_file".into(),
        )),
    }
}

fn open_out(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = open_out(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(open_out(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| Error::format(path, e.to_string()).into()
}

fn summary(value: impl Serialize) -> Value {
    serde_json::to_value(value).expect("summary serializes")
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Value> {
    let data = generate(&cfg.synth)?;
    let dir = &cfg.paths.data_dir;
    write_dataset(dir, &data)?;
    write_jsonl(&dir.join(CRITERIA_FILE), &data.criteria)?;
    let h = label_histogram(&data.labels);
    Ok(serde_json::json!({
        "command": "synth",
        "data_dir": dir,
        "patients": data.patients.len(),
        "trials": data.trials.len(),
        "criteria": data.criteria.len(),
        "enrollments": data.enrollments.len(),
        "labels": {"match": h[0], "mismatch": h[1], "unknown": h[2]},
    }))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let inputs = load_inputs(cfg)?;
    let enrollments = load_enrollments(cfg)?;
    let encoder = encoder_from_config(&cfg.encoder)?;
    let corpus = PreparedCorpus::build(
        &inputs.taxonomies,
        &encoder,
        &inputs.patients,
        &inputs.trials,
        cfg.missing_code_policy,
    )?;
    let dataset = make_dataset(&inputs.patients, &inputs.trials, &enrollments, cfg.seed)?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let outcome = train(params, &corpus, &dataset, &cfg.train)?;

    let model_path = cfg.paths.model_path();
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let header = ModelHeader::new(cfg.model.clone(), cfg.seed, EncoderSpec::describe(&encoder));
    save_model(&model_path, &header, &outcome.params)?;

    let metrics_path = cfg.paths.output_dir.join(METRICS_FILE);
    let w = open_out(&metrics_path)?;
    write_metrics_csv(w, &outcome.log, !cfg.deterministic).map_err(csv_err(&metrics_path))?;

    let best = &outcome.log.iter().find(|r| r.epoch == outcome.best_epoch);
    Ok(serde_json::json!({
        "command": "train",
        "model": model_path,
        "metrics": metrics_path,
        "train_pairs": dataset.pairs_in(Split::Train).len(),
        "validation_pairs": dataset.pairs_in(Split::Validation).len(),
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": best.and_then(|r| r.val_accuracy),
        "best_val_auroc": best.and_then(|r| r.val_auroc),
    }))
}

/// Everything needed to score a saved model on a dataset.
pub struct Session {
    pub header: ModelHeader,
    pub params: ModelParams,
    pub corpus: PreparedCorpus,
    pub trials: Vec<Trial>,
    pub num_visits: HashMap<String, usize>,
}

fn open_session(cfg: &RunConfig, only: Option<(&str, &str)>) -> Result<Session> {
    let (header, params) = load_model(&cfg.paths.model_path())?;
    let encoder = encoder_for_model(&header, &cfg.encoder)?;
    let mut inputs = load_inputs(cfg)?;
    if let Some((patient_id, trial_id)) = only {
        inputs.patients.retain(|p| p.patient_id == patient_id);
        inputs.trials.retain(|t| t.trial_id == trial_id);
        if inputs.patients.is_empty() {
            return Err(Error::InvalidInput(format!("unknown patient {patient_id}")).into());
        }
        if inputs.trials.is_empty() {
            return Err(Error::InvalidInput(format!("unknown trial {trial_id}")).into());
        }
    }
    let corpus = PreparedCorpus::build(
        &inputs.taxonomies,
        &encoder,
        &inputs.patients,
        &inputs.trials,
        cfg.missing_code_policy,
    )?;
    let num_visits = inputs
        .patients
        .iter()
        .map(|p| (p.patient_id.clone(), p.visits.len()))
        .collect();
    Ok(Session {
        header,
        params,
        corpus,
        trials: inputs.trials,
        num_visits,
    })
}

/// Predictions for every criterion of `trial`, in inclusion-then-exclusion
/// order.
pub fn predict_trial<'t>(
    params: &ModelParams,
    corpus: &PreparedCorpus,
    patient_id: &str,
    trial: &'t Trial,
) -> Result<Vec<(&'t Criterion, MatchPrediction)>> {
    let refs: Vec<_> = trial.criteria().map(criterion_ref).collect();
    let queries: Vec<(&str, _)> = refs.iter().map(|r| (patient_id, r)).collect();
    let preds = corpus.predict_many(params, &queries)?;
    Ok(trial.criteria().zip(preds).collect())
}

fn verdicts(preds: &[(&Criterion, MatchPrediction)]) -> Vec<CriterionVerdict> {
    preds
        .iter()
        .map(|(c, p)| CriterionVerdict {
            polarity: c.polarity,
            criterion_index: c.index,
            predicted: p.label(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub criteria_level: CriteriaMetrics,
    pub trial_level_by_threshold: BTreeMap<String, f64>,
    pub strata: StratifiedReport,
}

/// Test-split metrics of the saved model. The split is rebuilt from the seed
/// stored in the model header, so it matches the one used in training.
pub fn evaluate_session(session: &Session, enrollments: &[Enrollment], patients: &[Patient]) -> Result<EvaluationReport> {
    let dataset: Dataset = make_dataset(patients, &session.trials, enrollments, session.header.seed)?;
    let test = dataset.pairs_in(Split::Test);
    let settings = compose_core::model::LossSettings::default();
    let (criteria_level, _) = score_pairs(&session.params, &session.corpus, &test, &settings)?;

    let trial_by_id: HashMap<&str, &Trial> = session.trials.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let enrolled: BTreeSet<(&str, &str)> = enrollments
        .iter()
        .filter(|e| dataset.split_of(&e.patient_id) == Some(Split::Test))
        .map(|e| (e.patient_id.as_str(), e.trial_id.as_str()))
        .collect();
    let mut results = Vec::with_capacity(enrolled.len());
    for (patient_id, trial_id) in enrolled {
        let trial = trial_by_id[trial_id];
        let preds = predict_trial(&session.params, &session.corpus, patient_id, trial)?;
        results.push(aggregate_trial(patient_id, trial_id, verdicts(&preds), &THRESHOLDS)?);
    }
    let refs: Vec<&TrialMatchResult> = results.iter().collect();
    let trial_level_by_threshold = trial_accuracy_by_threshold(&refs, &THRESHOLDS);
    let strata = stratified_report(
        &results,
        |r| {
            let t = trial_by_id[r.trial_id.as_str()];
            StratumKeys {
                num_visits: session.num_visits.get(&r.patient_id).copied().unwrap_or(0),
                phase: t.phase,
                cohort: t.cohort.clone(),
            }
        },
        &THRESHOLDS,
    );
    Ok(EvaluationReport {
        criteria_level,
        trial_level_by_threshold,
        strata,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Value> {
    let session = open_session(cfg, None)?;
    let enrollments = load_enrollments(cfg)?;
    let patients = load_patients(&cfg.paths.data_paths().patients)?;
    let report = evaluate_session(&session, &enrollments, &patients)?;
    let path = cfg.paths.output_dir.join(REPORT_FILE);
    write_json(&path, &report)?;
    Ok(serde_json::json!({
        "command": "evaluate",
        "report": path,
        "criteria_level": report.criteria_level,
        "trial_level_by_threshold": report.trial_level_by_threshold,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionPrediction {
    pub polarity: Polarity,
    pub criterion_index: usize,
    pub text: String,
    pub probs: BTreeMap<MatchLabel, f64>,
    pub predicted: MatchLabel,
    pub required: MatchLabel,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub patient_id: String,
    pub trial_id: String,
    pub criteria: Vec<CriterionPrediction>,
    pub fraction_correct: f64,
    pub matched_by_threshold: BTreeMap<String, bool>,
}

pub fn match_report(session: &Session, patient_id: &str, trial: &Trial) -> Result<MatchReport> {
    let preds = predict_trial(&session.params, &session.corpus, patient_id, trial)?;
    let result = aggregate_trial(patient_id, &trial.trial_id, verdicts(&preds), &THRESHOLDS)?;
    let criteria = preds
        .iter()
        .map(|(c, p)| CriterionPrediction {
            polarity: c.polarity,
            criterion_index: c.index,
            text: c.text.clone(),
            probs: MatchLabel::ALL.iter().map(|&l| (l, p.probs[l.index()])).collect(),
            predicted: p.label(),
            required: required_label(c.polarity),
        })
        .collect();
    Ok(MatchReport {
        patient_id: patient_id.to_string(),
        trial_id: trial.trial_id.clone(),
        criteria,
        fraction_correct: result.fraction_correct,
        matched_by_threshold: result
            .matched_at
            .iter()
            .map(|&(t, m)| (threshold_key(t), m))
            .collect(),
    })
}

pub fn cmd_match(cfg: &RunConfig, patient_id: &str, trial_id: &str) -> Result<Value> {
    let session = open_session(cfg, Some((patient_id, trial_id)))?;
    let report = match_report(&session, patient_id, &session.trials[0])?;
    let path = cfg.paths.output_dir.join(match_file(patient_id, trial_id));
    write_json(&path, &report)?;
    Ok(summary(report))
}

pub fn cmd_explain(cfg: &RunConfig, patient_id: &str, trial_id: &str) -> Result<Value> {
    let session = open_session(cfg, Some((patient_id, trial_id)))?;
    let trial = &session.trials[0];
    let preds = predict_trial(&session.params, &session.corpus, patient_id, trial)?;

    let att_path = cfg.paths.output_dir.join(attention_file(patient_id, trial_id));
    let mut w = csv_writer(&att_path)?;
    let err = csv_err(&att_path);
    w.write_record(["trial_id", "criterion_index", "polarity", "slot_type", "slot_level", "weight"])
        .map_err(&err)?;
    for (c, p) in &preds {
        for (slot, weight) in p.attention.iter().enumerate() {
            let (ct, level) = slot_of(slot);
            w.write_record([
                trial_id,
                &c.index.to_string(),
                c.polarity.as_str(),
                ct.as_str(),
                &level.to_string(),
                &weight.to_string(),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&att_path, e))?;

    // Criterion queries and the memory each one retrieves share a space.
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    for (c, p) in &preds {
        let key = format!("{}:{}", c.polarity.as_str(), c.index);
        ids.push((format!("{trial_id}/{key}"), format!("ec_{}", c.polarity.as_str())));
        vectors.push(p.query.clone());
        ids.push((format!("{patient_id}/{key}"), "ehr".to_string()));
        vectors.push(p.retrieved.clone());
    }
    let proj = pca_project(&vectors, 2)?;
    let pca_path = cfg.paths.output_dir.join(pca_file(patient_id, trial_id));
    let mut w = csv_writer(&pca_path)?;
    let err = csv_err(&pca_path);
    w.write_record(["id", "kind", "x", "y"]).map_err(&err)?;
    for ((id, kind), pt) in ids.iter().zip(&proj.points) {
        w.write_record([id.as_str(), kind.as_str(), &pt[0].to_string(), &pt[1].to_string()])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&pca_path, e))?;

    Ok(serde_json::json!({
        "command": "explain",
        "attention": att_path,
        "pca": pca_path,
        "rank_deficient": proj.rank_deficient,
    }))
}
