//! HTTP API for clinician review sessions.
//!
//! Serves patient timelines, model predictions and ranked evidence, and
//! records annotations under the staged review protocol. All routes live
//! under `/v1`; callers identify themselves with the `x-annotator-id`
//! header. State changes go through an append-only event log (see
//! [`store`]) so a restart replays to the same sessions.

pub mod catalog;
pub mod error;
pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State as AxState};
use axum::http::{header, HeaderMap};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use evident_core::annotation::{
    AnnotationSession, AuditVerdict, EvidenceAnnotation, ExportRecord, Hallucination, LabelVerdict, Likelihood,
    LikelihoodChange, ModelVariant, Stage, YesNo, MAX_ANNOTATORS_PER_PATIENT, MAX_EVIDENCE,
};
use evident_core::corpus::SplitName;
use evident_core::evidence::Origin;
use evident_core::keyed::keyed_rng;
use rand::seq::IndexedRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use catalog::{Catalog, CatalogError, CatalogInputs, CatalogPaths, MODEL_PATH_ENV, STORE_DIR_ENV};
pub use error::ApiError;
use store::{Event, State, Store, StoreError};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

/// Source of request timestamps; injectable for tests.
pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

struct Ledger {
    state: State,
    store: Store,
}

pub struct AppState {
    catalog: Catalog,
    ledger: Mutex<Ledger>,
    clock: Clock,
    seed: u64,
}

impl AppState {
    /// Opens the event log in `store_dir`, replaying any existing sessions.
    pub fn open(catalog: Catalog, store_dir: &Path, seed: u64) -> Result<AppState, StoreError> {
        let (store, state) = Store::open(store_dir)?;
        log::info!(
            "store {} replayed: {} events, {} sessions",
            store_dir.display(),
            store.event_count(),
            state.sessions.len()
        );
        Ok(AppState {
            catalog,
            ledger: Mutex::new(Ledger { state, store }),
            clock: Arc::new(Utc::now),
            seed,
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> AppState {
        self.clock = clock;
        self
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    fn lock(&self) -> MutexGuard<'_, Ledger> {
        self.ledger.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A copy of the current persisted state.
    pub fn snapshot(&self) -> State {
        self.lock().state.clone()
    }
}

impl Ledger {
    /// Validates `event` against the current state, logs it, then applies it.
    fn commit(&mut self, event: Event) -> Result<(), ApiError> {
        let mut next = self.state.clone();
        next.apply(&event)?;
        self.store.append(&event, &next)?;
        self.state = next;
        Ok(())
    }

    fn session(&self, id: &str, annotator: &str) -> Result<&AnnotationSession, ApiError> {
        let s = self
            .state
            .sessions
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown session `{id}`")))?;
        if s.annotator_id != annotator {
            return Err(ApiError::Forbidden(format!("session `{id}` belongs to another annotator")));
        }
        Ok(s)
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let v1 = Router::new()
        .route("/patients", get(list_patients))
        .route("/patients/{id}/timeline", get(timeline))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/review_done", post(review_done))
        .route("/sessions/{id}/explicit", post(explicit))
        .route("/sessions/{id}/likelihoods", post(likelihoods))
        .route("/sessions/{id}/prediction", get(prediction))
        .route("/sessions/{id}/prediction_feedback", post(prediction_feedback))
        .route("/sessions/{id}/evidence/next", get(next_evidence))
        .route("/sessions/{id}/evidence/{rank}", post(annotate_evidence))
        .route("/sessions/{id}/final", post(final_answers))
        .route("/labels/pending", get(pending_labels))
        .route("/labels/{id}/verdict", post(label_verdict))
        .route("/audit/abstractive", get(abstractive_items))
        .route("/audit/{id}", post(audit_verdict))
        .route("/export/annotations", get(export));
    Router::new().nest("/v1", v1).with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn annotator(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .ok_or_else(|| ApiError::Invalid(format!("missing `{ANNOTATOR_HEADER}` header")))
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::Invalid(format!("invalid request body: {e}")))
}

#[derive(Serialize)]
struct PatientSummary {
    patient_id: String,
    split: Option<SplitName>,
    past_reports: usize,
    total_reports: usize,
}

#[derive(Deserialize)]
struct PatientFilter {
    split: Option<String>,
}

async fn list_patients(
    AxState(app): AxState<Shared>,
    Query(filter): Query<PatientFilter>,
) -> Result<Json<Vec<PatientSummary>>, ApiError> {
    let wanted: Option<SplitName> = filter
        .split
        .map(|s| {
            serde_json::from_value(Value::String(s.clone()))
                .map_err(|_| ApiError::Invalid(format!("unknown split `{s}`")))
        })
        .transpose()?;
    let list = app
        .catalog
        .patients
        .values()
        .filter(|p| wanted.is_none() || p.split == wanted)
        .map(|p| PatientSummary {
            patient_id: p.timeline.patient_id.clone(),
            split: p.split,
            past_reports: p.timeline.past().len(),
            total_reports: p.timeline.reports.len(),
        })
        .collect();
    Ok(Json(list))
}

#[derive(Deserialize)]
struct TimelineQuery {
    until: Option<String>,
}

#[derive(Serialize)]
struct TimelineReport {
    report_id: String,
    date: chrono::NaiveDate,
    report_type: String,
    relative_day: i64,
    text: String,
}

async fn timeline(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TimelineQuery>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    let who = annotator(&headers)?;
    if let Some(until) = q.until.as_deref().filter(|u| *u != "split") {
        return Err(ApiError::Invalid(format!(
            "only the past record can be reviewed (`until=split`), got `{until}`"
        )));
    }
    let entry = app
        .catalog
        .patients
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown patient `{id}`")))?;
    let now = app.now();
    {
        let mut ledger = app.lock();
        let reviewing: Vec<String> = ledger
            .state
            .sessions
            .values()
            .filter(|s| s.annotator_id == who && s.patient_id == id && s.stage == Stage::Reviewing)
            .filter(|s| !ledger.state.viewed.contains(&s.session_id))
            .map(|s| s.session_id.clone())
            .collect();
        for session_id in reviewing {
            ledger.commit(Event::TimelineViewed { session_id, at: now })?;
        }
    }
    let t = &entry.timeline;
    let reports: Vec<TimelineReport> = t
        .past()
        .iter()
        .map(|r| TimelineReport {
            report_id: r.report_id.clone(),
            date: r.date,
            report_type: r.report_type.clone(),
            relative_day: t.relative_day(r),
            text: r.text.clone(),
        })
        .collect();
    Ok(Json(json!({
        "patient_id": t.patient_id,
        "split_index": t.split_index,
        "reports": reports,
    })))
}

#[derive(Deserialize)]
struct CreateSession {
    #[serde(default)]
    annotator: Option<String>,
    patient: String,
    #[serde(default = "auto")]
    variant: String,
}

fn auto() -> String {
    "auto".into()
}

/// Least-used variant not yet annotated for this patient; ties broken by a
/// seeded draw so assignment is balanced but unpredictable to annotators.
fn assign_variant(
    app: &AppState,
    state: &State,
    patient: &str,
    used: &[ModelVariant],
) -> Result<ModelVariant, ApiError> {
    let mut counts: BTreeMap<ModelVariant, usize> = app.catalog.variants.keys().map(|v| (*v, 0)).collect();
    for s in state.sessions.values() {
        if let Some(c) = counts.get_mut(&s.model_variant) {
            *c += 1;
        }
    }
    let open: Vec<(ModelVariant, usize)> = counts.into_iter().filter(|(v, _)| !used.contains(v)).collect();
    let fewest = open
        .iter()
        .map(|(_, c)| *c)
        .min()
        .ok_or_else(|| ApiError::Conflict(format!("every model variant already has a session for `{patient}`")))?;
    let tied: Vec<ModelVariant> = open.into_iter().filter(|(_, c)| *c == fewest).map(|(v, _)| v).collect();
    let mut rng = keyed_rng(app.seed, "service.assign", &format!("{patient}#{}", state.sessions.len()));
    Ok(*tied.choose(&mut rng).expect("non-empty"))
}

async fn create_session(
    AxState(app): AxState<Shared>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let who = annotator(&headers)?;
    let req: CreateSession = body(&bytes)?;
    if req.annotator.as_deref().is_some_and(|a| a != who) {
        return Err(ApiError::Invalid(format!(
            "body annotator does not match the `{ANNOTATOR_HEADER}` header"
        )));
    }
    let entry = app
        .catalog
        .patients
        .get(&req.patient)
        .ok_or_else(|| ApiError::NotFound(format!("unknown patient `{}`", req.patient)))?;
    let requested: Option<ModelVariant> = match req.variant.as_str() {
        "auto" => None,
        v => Some(
            serde_json::from_value(Value::String(v.into()))
                .map_err(|_| ApiError::Invalid(format!("unknown model variant `{v}`")))?,
        ),
    };
    if let Some(v) = requested.filter(|v| !app.catalog.variants.contains_key(v)) {
        return Err(ApiError::Invalid(format!("model variant `{}` is not configured", v.as_str())));
    }

    let now = app.now();
    let mut ledger = app.lock();
    let existing: Vec<&AnnotationSession> = ledger
        .state
        .sessions
        .values()
        .filter(|s| s.patient_id == req.patient)
        .collect();
    if existing.iter().any(|s| s.annotator_id == who) {
        return Err(ApiError::Conflict(format!(
            "annotator `{who}` already has a session for `{}`",
            req.patient
        )));
    }
    if existing.len() >= MAX_ANNOTATORS_PER_PATIENT {
        return Err(ApiError::Conflict(format!(
            "patient `{}` already has the maximum of {MAX_ANNOTATORS_PER_PATIENT} annotators",
            req.patient
        )));
    }
    let used: Vec<ModelVariant> = existing.iter().map(|s| s.model_variant).collect();
    let variant = match requested {
        Some(v) if used.contains(&v) => {
            return Err(ApiError::Conflict(format!(
                "patient `{}` already has a `{}` session",
                req.patient,
                v.as_str()
            )))
        }
        Some(v) => v,
        None => assign_variant(&app, &ledger.state, &req.patient, &used)?,
    };
    let view = app.catalog.view(variant, &req.patient).expect("patient and variant checked");
    let session = AnnotationSession::new(
        format!("s{:05}", ledger.state.sessions.len() + 1),
        who,
        req.patient.clone(),
        variant,
        app.catalog.conditions.clone(),
        now,
        None,
        entry.timeline.past().len(),
        view.ranked.len(),
    );
    ledger.commit(Event::SessionCreated {
        session: session.clone(),
    })?;
    Ok((axum::http::StatusCode::CREATED, Json(session)))
}

async fn get_session(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<AnnotationSession>, ApiError> {
    let who = annotator(&headers)?;
    let ledger = app.lock();
    Ok(Json(ledger.session(&id, &who)?.clone()))
}

/// Commits `make(now)` for session `id` and returns the updated session.
fn transition(
    app: &AppState,
    id: &str,
    who: &str,
    make: impl FnOnce(DateTime<Utc>) -> Event,
) -> Result<Json<AnnotationSession>, ApiError> {
    let now = app.now();
    let mut ledger = app.lock();
    ledger.session(id, who)?;
    ledger.commit(make(now))?;
    Ok(Json(ledger.state.sessions[id].clone()))
}

async fn review_done(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<AnnotationSession>, ApiError> {
    let who = annotator(&headers)?;
    transition(&app, &id, &who, |at| Event::ReviewFinished {
        session_id: id.clone(),
        at,
    })
}

async fn explicit(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<AnnotationSession>, ApiError> {
    let who = annotator(&headers)?;
    let answers: BTreeMap<String, bool> = body(&bytes)?;
    transition(&app, &id, &who, |at| Event::ExplicitAnswered {
        session_id: id.clone(),
        answers,
        at,
    })
}

async fn likelihoods(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<AnnotationSession>, ApiError> {
    let who = annotator(&headers)?;
    let answers: BTreeMap<String, Likelihood> = body(&bytes)?;
    transition(&app, &id, &who, |at| Event::LikelihoodsSubmitted {
        session_id: id.clone(),
        answers,
        at,
    })
}

async fn prediction(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    let who = annotator(&headers)?;
    let session = app.lock().session(&id, &who)?.clone();
    session.check_prediction_access()?;
    let view = app
        .catalog
        .view(session.model_variant, &session.patient_id)
        .expect("sessions reference catalog patients");
    let p = &view.prediction;
    let per_condition: BTreeMap<String, Value> = app
        .catalog
        .conditions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                c.clone(),
                json!({
                    "probability": p.probabilities[i],
                    "prior": p.prior[i],
                    "relative_risk": p.relative_risk[i],
                    "aggregate_log_odds": p.aggregate_log_odds[i],
                }),
            )
        })
        .collect();
    Ok(Json(json!({
        "session_id": session.session_id,
        "model_variant": session.model_variant,
        "evidence_count": view.ranked.len(),
        "conditions": per_condition,
    })))
}

async fn prediction_feedback(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<AnnotationSession>, ApiError> {
    let who = annotator(&headers)?;
    let aligns: BTreeMap<String, bool> = body(&bytes)?;
    transition(&app, &id, &who, |at| Event::PredictionFeedback {
        session_id: id.clone(),
        aligns,
        at,
    })
}

fn progress(s: &AnnotationSession) -> Value {
    let annotated = s.annotations.len();
    let more = s.pending_rank().is_none()
        && annotated >= s.required_annotations()
        && s.served.len() < MAX_EVIDENCE.min(s.evidence_available);
    json!({
        "stage": s.stage,
        "served": s.served.len(),
        "annotated": annotated,
        "required": s.required_annotations(),
        "available": s.evidence_available.min(MAX_EVIDENCE),
        "more_allowed": more,
        "can_finish": s.stage == Stage::EvidenceLoop && s.pending_rank().is_none() && annotated >= s.required_annotations(),
    })
}

async fn next_evidence(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    let who = annotator(&headers)?;
    let now = app.now();
    let mut ledger = app.lock();
    let session = ledger.session(&id, &who)?.clone();
    let rank = session.next_evidence_rank()?;
    let view = app
        .catalog
        .view(session.model_variant, &session.patient_id)
        .expect("sessions reference catalog patients");
    let item = &view.ranked[rank - 1];
    if session.pending_rank() != Some(rank) {
        ledger.commit(Event::EvidenceServed {
            session_id: id.clone(),
            item: item.served.clone(),
            at: now,
        })?;
    }
    let model = &app.catalog.variants[&session.model_variant].model;
    let prior = model.prior();
    let votes: BTreeMap<String, Value> = app
        .catalog
        .conditions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = item.vote.probabilities[i];
            (
                c.clone(),
                json!({
                    "probability": p,
                    "log_odds": item.vote.log_odds[i],
                    "relative_risk": p / prior[i],
                }),
            )
        })
        .collect();
    log::info!("session {id}: served evidence rank {rank}");
    Ok(Json(json!({
        "evidence": item.served,
        "votes": votes,
        "progress": progress(&ledger.state.sessions[&id]),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationBody {
    #[serde(default)]
    rank: Option<usize>,
    usefulness: BTreeMap<String, evident_core::annotation::Usefulness>,
    #[serde(default)]
    intuitive: BTreeMap<String, bool>,
    #[serde(default)]
    seen_in_review: Option<bool>,
}

async fn annotate_evidence(
    AxState(app): AxState<Shared>,
    UrlPath((id, rank)): UrlPath<(String, String)>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<Value>, ApiError> {
    let who = annotator(&headers)?;
    let rank: usize = rank
        .parse()
        .map_err(|_| ApiError::Invalid(format!("evidence rank must be a positive integer, got `{rank}`")))?;
    let req: AnnotationBody = body(&bytes)?;
    if req.rank.is_some_and(|r| r != rank) {
        return Err(ApiError::Invalid("body rank does not match the URL".into()));
    }
    let annotation = EvidenceAnnotation {
        rank,
        usefulness: req.usefulness,
        intuitive: req.intuitive,
        seen_in_review: req.seen_in_review,
    };
    let now = app.now();
    let mut ledger = app.lock();
    ledger.session(&id, &who)?;
    ledger.commit(Event::EvidenceAnnotated {
        session_id: id.clone(),
        annotation,
        at: now,
    })?;
    Ok(Json(json!({ "progress": progress(&ledger.state.sessions[&id]) })))
}

async fn final_answers(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<AnnotationSession>, ApiError> {
    #[derive(Deserialize)]
    struct FinalBody {
        changed_mind: BTreeMap<String, Option<LikelihoodChange>>,
    }
    let who = annotator(&headers)?;
    let req: FinalBody = body(&bytes)?;
    transition(&app, &id, &who, |at| Event::FinalSubmitted {
        session_id: id.clone(),
        changed_mind: req.changed_mind,
        at,
    })
}

async fn pending_labels(AxState(app): AxState<Shared>, headers: HeaderMap) -> Result<Json<Vec<Value>>, ApiError> {
    let who = annotator(&headers)?;
    let ledger = app.lock();
    let done: Vec<&str> = ledger
        .state
        .label_verdicts
        .iter()
        .filter(|v| v.annotator_id == who)
        .map(|v| v.label_id.as_str())
        .collect();
    let pending = app
        .catalog
        .labels
        .iter()
        .filter(|l| !done.contains(&Catalog::label_id(l).as_str()))
        .map(|l| {
            let report = app
                .catalog
                .patients
                .get(&l.patient_id)
                .and_then(|p| p.timeline.reports.iter().find(|r| r.report_id == l.report_id));
            json!({
                "label_id": Catalog::label_id(l),
                "patient_id": l.patient_id,
                "condition": l.condition,
                "report_id": l.report_id,
                "raw_terms": l.raw_terms,
                "report_type": report.map(|r| r.report_type.clone()),
                "report_text": report.map(|r| r.text.clone()),
            })
        })
        .collect();
    Ok(Json(pending))
}

async fn label_verdict(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<LabelVerdict>, ApiError> {
    #[derive(Deserialize)]
    struct VerdictBody {
        confident: YesNo,
        #[serde(default)]
        earlier_likely: Option<YesNo>,
    }
    let who = annotator(&headers)?;
    let req: VerdictBody = body(&bytes)?;
    if !app.catalog.labels.iter().any(|l| Catalog::label_id(l) == id) {
        return Err(ApiError::NotFound(format!("unknown label `{id}`")));
    }
    let verdict = LabelVerdict {
        label_id: id.clone(),
        annotator_id: who.clone(),
        confident: req.confident,
        earlier_likely: req.earlier_likely,
        at: app.now(),
    };
    let mut ledger = app.lock();
    if ledger
        .state
        .label_verdicts
        .iter()
        .any(|v| v.label_id == id && v.annotator_id == who)
    {
        return Err(ApiError::Conflict(format!(
            "label `{id}` already has a verdict from `{who}`; verdicts cannot be revised"
        )));
    }
    ledger.commit(Event::LabelVerdict {
        verdict: verdict.clone(),
    })?;
    Ok(Json(verdict))
}

fn normalize_for_match(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Served model-generated items whose text is not a substring of the
/// source report, keyed `<session>:<rank>`.
fn abstractive(app: &AppState, state: &State) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for s in state.sessions.values() {
        let Some(patient) = app.catalog.patients.get(&s.patient_id) else {
            continue;
        };
        for item in s.served.iter().filter(|i| i.origin == Origin::Llm) {
            let Some(report) = patient.timeline.reports.iter().find(|r| r.report_id == item.report_id) else {
                continue;
            };
            if normalize_for_match(&report.text).contains(&normalize_for_match(&item.text)) {
                continue;
            }
            let item_id = format!("{}:{}", s.session_id, item.rank);
            out.push((
                item_id.clone(),
                json!({
                    "item_id": item_id,
                    "patient_id": s.patient_id,
                    "query": item.query,
                    "text": item.text,
                    "report_id": item.report_id,
                    "report_text": report.text,
                }),
            ));
        }
    }
    out
}

async fn abstractive_items(
    AxState(app): AxState<Shared>,
    headers: HeaderMap,
) -> Result<Json<Vec<Value>>, ApiError> {
    let who = annotator(&headers)?;
    let ledger = app.lock();
    let items = abstractive(&app, &ledger.state)
        .into_iter()
        .filter(|(id, _)| {
            !ledger
                .state
                .audit_verdicts
                .iter()
                .any(|v| &v.item_id == id && v.annotator_id == who)
        })
        .map(|(_, v)| v)
        .collect();
    Ok(Json(items))
}

async fn audit_verdict(
    AxState(app): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    bytes: Bytes,
) -> Result<Json<AuditVerdict>, ApiError> {
    #[derive(Deserialize)]
    struct AuditBody {
        verdict: Hallucination,
        #[serde(default)]
        explanation: Option<String>,
    }
    let who = annotator(&headers)?;
    let req: AuditBody = body(&bytes)?;
    let now = app.now();
    let mut ledger = app.lock();
    if !abstractive(&app, &ledger.state).iter().any(|(item, _)| *item == id) {
        return Err(ApiError::NotFound(format!("unknown audit item `{id}`")));
    }
    if ledger
        .state
        .audit_verdicts
        .iter()
        .any(|v| v.item_id == id && v.annotator_id == who)
    {
        return Err(ApiError::Conflict(format!("item `{id}` already has a verdict from `{who}`")));
    }
    let verdict = AuditVerdict {
        item_id: id,
        annotator_id: who,
        verdict: req.verdict,
        explanation: req.explanation,
        at: now,
    };
    ledger.commit(Event::AuditVerdict {
        verdict: verdict.clone(),
    })?;
    Ok(Json(verdict))
}

/// JSON Lines: sessions, then label verdicts, then audit verdicts.
pub fn export_lines(state: &State) -> String {
    let records = state
        .sessions
        .values()
        .cloned()
        .map(|s| ExportRecord::Session(Box::new(s)))
        .chain(state.label_verdicts.iter().cloned().map(ExportRecord::LabelVerdict))
        .chain(state.audit_verdicts.iter().cloned().map(ExportRecord::AuditVerdict));
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

async fn export(AxState(app): AxState<Shared>) -> impl IntoResponse {
    let body = export_lines(&app.lock().state);
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body)
}
