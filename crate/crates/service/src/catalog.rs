//! Read-only data the service serves: timelines, model outputs and ranked
//! evidence per model variant, and extracted labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evident_core::annotation::{ModelVariant, ServedEvidence};
use evident_core::corpus::{load_corpus, split_timeline, Corpus, PatientTimeline, SplitAssignment, SplitName};
use evident_core::embedder::Embedder;
use evident_core::evidence::{all_ehr_evidence, read_evidence, PatientEvidence, DEFAULT_ALL_EHR_LIMIT};
use evident_core::labeler::{read_labels, DiagnosisLabel};
use evident_core::nam::{ModelCheckpoint, Prediction, RiskModel, Vote};
use evident_core::pipeline::encode;
use evident_core::ranker::{mark_duplicates, rank, RankError, Strategy};
use thiserror::Error;

/// Environment variable naming the event-log directory.
pub const STORE_DIR_ENV: &str = "EVIDENT_STORE_DIR";
/// Environment variable naming the checkpoint trained on retrieved evidence.
pub const MODEL_PATH_ENV: &str = "EVIDENT_MODEL_PATH";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error(transparent)]
    Core(#[from] evident_core::Error),
    #[error("model `{path}` was trained with embedder `{model}` but the service uses `{service}`")]
    EmbedderMismatch { path: String, model: String, service: String },
    #[error("models disagree on the condition list")]
    Conditions,
    #[error("no model configured; set {MODEL_PATH_ENV} or pass a model path")]
    NoModel,
    #[error("evidence for `{patient_id}` has split index {split_index} but the record has {reports} reports")]
    SplitIndex {
        patient_id: String,
        split_index: usize,
        reports: usize,
    },
}

impl From<evident_core::corpus::CorpusError> for CatalogError {
    fn from(e: evident_core::corpus::CorpusError) -> Self {
        CatalogError::Core(e.into())
    }
}

/// One ranked evidence item with its per-condition vote.
#[derive(Debug, Clone)]
pub struct RankedItem {
    pub served: ServedEvidence,
    pub vote: Vote,
}

#[derive(Debug, Clone)]
pub struct PatientView {
    pub prediction: Prediction,
    pub ranked: Vec<RankedItem>,
}

#[derive(Debug, Clone)]
pub struct VariantData {
    pub model: RiskModel,
    pub strategy: Strategy,
    pub patients: BTreeMap<String, PatientView>,
}

#[derive(Debug, Clone)]
pub struct PatientEntry {
    /// Timeline split at the point used for evidence retrieval.
    pub timeline: PatientTimeline,
    pub split: Option<SplitName>,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub conditions: Vec<String>,
    pub patients: BTreeMap<String, PatientEntry>,
    pub variants: BTreeMap<ModelVariant, VariantData>,
    pub labels: Vec<DiagnosisLabel>,
}

/// In-memory inputs for [`Catalog::build`].
#[derive(Debug, Clone, Default)]
pub struct CatalogInputs {
    pub corpus: Corpus,
    pub splits: Option<SplitAssignment>,
    /// Retrieved evidence; also fixes each listed patient's split point.
    pub evidence: Vec<PatientEvidence>,
    pub labels: Vec<DiagnosisLabel>,
    /// Model trained on retrieved evidence (log-odds and confidence variants).
    pub llm_model: Option<RiskModel>,
    /// Model trained on raw sentences (all-EHR variant).
    pub allehr_model: Option<RiskModel>,
    /// Seeds timeline splits for patients without evidence.
    pub seed: u64,
}

/// File locations for [`Catalog::load`].
#[derive(Debug, Clone, Default)]
pub struct CatalogPaths {
    pub corpus: PathBuf,
    pub splits: Option<PathBuf>,
    pub evidence: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub llm_model: Option<PathBuf>,
    pub allehr_model: Option<PathBuf>,
}

impl CatalogPaths {
    /// Falls back to `EVIDENT_MODEL_PATH` when no model path was given.
    pub fn with_env_model(mut self) -> Self {
        if self.llm_model.is_none() {
            self.llm_model = std::env::var_os(MODEL_PATH_ENV).map(PathBuf::from);
        }
        self
    }
}

fn load_model(path: &Path, embedder: &dyn Embedder) -> Result<RiskModel, CatalogError> {
    let model = ModelCheckpoint::load(path)
        .and_then(|c| c.model())
        .map_err(evident_core::Error::from)?;
    if model.embedder_id != embedder.id() {
        return Err(CatalogError::EmbedderMismatch {
            path: path.display().to_string(),
            model: model.embedder_id.clone(),
            service: embedder.id().to_string(),
        });
    }
    Ok(model)
}

fn view(
    evidence: &PatientEvidence,
    model: &RiskModel,
    strategy: Strategy,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<PatientView, evident_core::Error> {
    let features = encode(&evidence.snippets, embedder)?;
    let prediction = model.predict(&features)?;
    let mut ranked = rank(&evidence.snippets, Some(&features), Some(model), strategy, Some(seed))?;
    mark_duplicates(&mut ranked);
    let ranked = ranked
        .into_iter()
        .map(|r| {
            let vote = model.vote(&features[r.source_index])?;
            Ok(RankedItem {
                served: ServedEvidence {
                    rank: r.rank,
                    report_id: r.snippet.report_id.clone(),
                    query: r.snippet.query.as_ref().map(|q| q.term.clone()),
                    text: r.snippet.text.clone(),
                    relative_day: r.snippet.relative_day,
                    origin: r.snippet.origin,
                    duplicate_of: r.duplicate_of,
                },
                vote,
            })
        })
        .collect::<Result<_, evident_core::nam::ModelError>>()?;
    Ok(PatientView { prediction, ranked })
}

fn variant(
    evidence: &[PatientEvidence],
    model: &RiskModel,
    strategy: Strategy,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<VariantData, evident_core::Error> {
    let patients = evidence
        .iter()
        .map(|pe| Ok((pe.patient_id.clone(), view(pe, model, strategy, embedder, seed)?)))
        .collect::<Result<_, evident_core::Error>>()?;
    Ok(VariantData {
        model: model.clone(),
        strategy,
        patients,
    })
}

impl Catalog {
    pub fn build(inputs: CatalogInputs, embedder: &dyn Embedder) -> Result<Catalog, CatalogError> {
        let CatalogInputs {
            corpus,
            splits,
            evidence,
            labels,
            llm_model,
            allehr_model,
            seed,
        } = inputs;
        let conditions = match (&llm_model, &allehr_model) {
            (Some(a), Some(b)) if a.conditions != b.conditions => return Err(CatalogError::Conditions),
            (Some(m), _) | (None, Some(m)) => m.conditions.as_slice().to_vec(),
            (None, None) => return Err(CatalogError::NoModel),
        };

        let split_points: BTreeMap<&str, usize> =
            evidence.iter().map(|pe| (pe.patient_id.as_str(), pe.split_index)).collect();
        let mut patients = BTreeMap::new();
        for p in &corpus.patients {
            let timeline = match split_points.get(p.patient_id.as_str()) {
                Some(&split_index) => {
                    if split_index == 0 || split_index > p.reports.len() {
                        return Err(CatalogError::SplitIndex {
                            patient_id: p.patient_id.clone(),
                            split_index,
                            reports: p.reports.len(),
                        });
                    }
                    p.clone().with_split_index(split_index)
                }
                None => match split_timeline(p, seed) {
                    Ok(t) => t,
                    Err(e) => {
                        log::warn!("{e}; patient not served");
                        continue;
                    }
                },
            };
            let split = splits.as_ref().and_then(|s| s.split_of(&p.patient_id));
            patients.insert(p.patient_id.clone(), PatientEntry { timeline, split });
        }

        let mut variants = BTreeMap::new();
        if let Some(model) = &llm_model {
            variants.insert(
                ModelVariant::LlmLogodds,
                variant(&evidence, model, Strategy::LogOdds, embedder, seed)?,
            );
            match variant(&evidence, model, Strategy::Confidence, embedder, seed) {
                Ok(v) => {
                    variants.insert(ModelVariant::LlmConfidence, v);
                }
                Err(evident_core::Error::Rank(e @ RankError::MissingConfidence { .. })) => {
                    log::warn!("{e}; the confidence-ranked variant is unavailable");
                }
                Err(e) => return Err(e.into()),
            }
        }
        if let Some(model) = &allehr_model {
            let raw: Vec<PatientEvidence> = patients
                .values()
                .map(|p| PatientEvidence {
                    patient_id: p.timeline.patient_id.clone(),
                    split_index: p.timeline.split_index,
                    snippets: all_ehr_evidence(&p.timeline, DEFAULT_ALL_EHR_LIMIT),
                })
                .collect();
            variants.insert(
                ModelVariant::AllehrLogodds,
                variant(&raw, model, Strategy::LogOdds, embedder, seed)?,
            );
        }

        Ok(Catalog {
            conditions,
            patients,
            variants,
            labels,
        })
    }

    /// Reads the files named in `paths` and builds the catalog.
    pub fn load(paths: &CatalogPaths, embedder: &dyn Embedder, seed: u64) -> Result<Catalog, CatalogError> {
        let corpus = load_corpus(&paths.corpus)?;
        let splits = paths.splits.as_deref().map(SplitAssignment::load).transpose()?;
        let evidence = match &paths.evidence {
            Some(p) => read_evidence(p).map_err(evident_core::Error::from)?,
            None => Vec::new(),
        };
        let labels = match &paths.labels {
            Some(p) => read_labels(p).map_err(evident_core::Error::from)?,
            None => Vec::new(),
        };
        let llm_model = paths.llm_model.as_ref().map(|p| load_model(p, embedder)).transpose()?;
        let allehr_model = paths.allehr_model.as_ref().map(|p| load_model(p, embedder)).transpose()?;
        Catalog::build(
            CatalogInputs {
                corpus,
                splits,
                evidence,
                labels,
                llm_model,
                allehr_model,
                seed,
            },
            embedder,
        )
    }

    /// Ranked view of `patient_id` under `variant`; a patient without
    /// retrieved evidence gets the prior and no evidence.
    pub fn view(&self, variant: ModelVariant, patient_id: &str) -> Option<PatientView> {
        let data = self.variants.get(&variant)?;
        if !self.patients.contains_key(patient_id) {
            return None;
        }
        Some(data.patients.get(patient_id).cloned().unwrap_or_else(|| PatientView {
            prediction: data.model.predict(&[]).expect("empty evidence predicts the prior"),
            ranked: Vec::new(),
        }))
    }

    pub fn label_id(label: &DiagnosisLabel) -> String {
        format!("{}:{}", label.patient_id, label.condition)
    }
}
