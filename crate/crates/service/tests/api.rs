use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::DateTime;
use evident_core::annotation::ModelVariant;
use evident_core::corpus::synthetic::{generate_synthetic, SyntheticSpec};
use evident_core::embedder::{Embedder, HashingEmbedder};
use evident_core::evidence::default_queries;
use evident_core::labeler::{ConditionSet, Normalizer};
use evident_core::llm::MockBackend;
use evident_core::nam::RiskModel;
use evident_core::pipeline::{gather_evidence, label_timelines, split_corpus, EvidenceSource};
use evident_service::store::{replay, EVENTS_FILE};
use evident_service::{export_lines, router, AppState, Catalog, CatalogInputs};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const CONDITIONS: [&str; 3] = ["cancer", "pneumonia", "pulmonary edema"];

fn catalog() -> Catalog {
    static CATALOG: OnceLock<Catalog> = OnceLock::new();
    CATALOG
        .get_or_init(|| {
            let synthetic = generate_synthetic(&SyntheticSpec::three_conditions(12, 0.5), 3).unwrap();
            let gateway = MockBackend::new(synthetic.fixture_rules.clone());
            let split = split_corpus(&synthetic.corpus, 200, 0);
            let evidence = gather_evidence(&split.patients, &default_queries(), EvidenceSource::Llm, &gateway).unwrap();
            let normalizer = Normalizer::new(ConditionSet::default(), Arc::new(HashingEmbedder::similarity())).unwrap();
            let labels = label_timelines(&split.patients, &normalizer, &gateway);
            let embedder = HashingEmbedder::features();
            let weights = (0..3)
                .map(|i| (0..64).map(|k| ((i * 64 + k) as f64 * 0.37).sin()).collect())
                .collect();
            let model = RiskModel::new(ConditionSet::default(), 64, vec![0.3, 0.4, 0.2], embedder.id())
                .unwrap()
                .with_weights(weights)
                .unwrap();
            Catalog::build(
                CatalogInputs {
                    corpus: synthetic.corpus,
                    splits: None,
                    evidence,
                    labels,
                    llm_model: Some(model.clone()),
                    allehr_model: Some(model),
                    seed: 0,
                },
                &embedder,
            )
            .unwrap()
        })
        .clone()
}

struct Harness {
    app: axum::Router,
    state: Arc<AppState>,
    seconds: Arc<AtomicI64>,
    dir: tempfile::TempDir,
}

fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    open(dir)
}

fn open(dir: tempfile::TempDir) -> Harness {
    let seconds = Arc::new(AtomicI64::new(0));
    let clock_seconds = seconds.clone();
    let state = Arc::new(
        AppState::open(catalog(), dir.path(), 0)
            .unwrap()
            .with_clock(Arc::new(move || {
                DateTime::from_timestamp(1_800_000_000 + clock_seconds.load(Ordering::SeqCst), 0).unwrap()
            })),
    );
    Harness {
        app: router(state.clone()),
        state,
        seconds,
        dir,
    }
}

impl Harness {
    fn advance(&self, secs: i64) {
        self.seconds.fetch_add(secs, Ordering::SeqCst);
    }

    async fn call(&self, method: &str, uri: &str, who: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(who) = who {
            req = req.header("x-annotator-id", who);
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, value)
    }

    async fn get(&self, uri: &str, who: &str) -> (StatusCode, Value) {
        self.call("GET", uri, Some(who), None).await
    }

    async fn post(&self, uri: &str, who: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", uri, Some(who), Some(body)).await
    }

    async fn session(&self, who: &str, patient: &str, variant: &str) -> String {
        let (status, v) = self
            .post("/v1/sessions", who, json!({"patient": patient, "variant": variant}))
            .await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    /// Creates a session and advances it to the evidence loop.
    async fn to_evidence_loop(&self, who: &str, patient: &str) -> String {
        let id = self.session(who, patient, "llm_logodds").await;
        let base = format!("/v1/sessions/{id}");
        assert_eq!(self.post(&format!("{base}/explicit"), who, all(false)).await.0, StatusCode::OK);
        assert_eq!(self.post(&format!("{base}/likelihoods"), who, all("unlikely")).await.0, StatusCode::OK);
        assert_eq!(self.post(&format!("{base}/prediction_feedback"), who, all(true)).await.0, StatusCode::OK);
        id
    }
}

fn all(v: impl Into<Value> + Clone) -> Value {
    Value::Object(CONDITIONS.iter().map(|c| (c.to_string(), v.clone().into())).collect())
}

fn not_useful() -> Value {
    json!({"usefulness": all("not_relevant")})
}

/// Patient with the most evidence for the log-odds variant.
fn busiest_patient() -> (String, usize) {
    let c = catalog();
    c.variants[&ModelVariant::LlmLogodds]
        .patients
        .iter()
        .map(|(id, v)| (id.clone(), v.ranked.len()))
        .max_by_key(|(_, n)| *n)
        .unwrap()
}

fn patient_with_evidence(n: usize) -> String {
    let c = catalog();
    c.variants[&ModelVariant::LlmLogodds]
        .patients
        .iter()
        .find(|(_, v)| v.ranked.len() == n)
        .map(|(id, _)| id.clone())
        .unwrap_or_else(|| panic!("no patient with exactly {n} evidence items"))
}

#[tokio::test]
async fn full_session_walkthrough() {
    let h = harness();
    let (patient, available) = busiest_patient();
    assert!(available >= 3);

    let id = h.session("ann1", &patient, "llm_logodds").await;
    let base = format!("/v1/sessions/{id}");

    h.advance(5);
    let (status, timeline) = h.get(&format!("/v1/patients/{patient}/timeline?until=split"), "ann1").await;
    assert_eq!(status, StatusCode::OK);
    let reports = timeline["reports"].as_array().unwrap();
    assert!(!reports.is_empty());
    assert!(reports.iter().all(|r| r["relative_day"].as_i64().unwrap() <= 0));

    // nothing model-derived before likelihoods
    let (status, body) = h.get(&format!("{base}/prediction"), "ann1").await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    assert_eq!(h.get(&format!("{base}/evidence/next"), "ann1").await.0, StatusCode::CONFLICT);

    assert_eq!(h.post(&format!("{base}/review_done"), "ann1", json!({})).await.0, StatusCode::OK);
    let (status, s) = h.post(&format!("{base}/explicit"), "ann1", all(false)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["stage"], "likelihoods");

    h.advance(90);
    let mut likelihoods = all("unlikely");
    likelihoods["pneumonia"] = json!("somewhat_likely");
    let (status, s) = h.post(&format!("{base}/likelihoods"), "ann1", likelihoods).await;
    assert_eq!(status, StatusCode::OK);
    // timer runs from the timeline fetch, not from session creation
    assert_eq!(s["review_seconds"].as_f64().unwrap(), 90.0);

    let (status, p) = h.get(&format!("{base}/prediction"), "ann1").await;
    assert_eq!(status, StatusCode::OK);
    let expected = catalog().view(ModelVariant::LlmLogodds, &patient).unwrap().prediction;
    for (i, c) in CONDITIONS.iter().enumerate() {
        assert_eq!(p["conditions"][c]["probability"].as_f64().unwrap(), expected.probabilities[i]);
        assert_eq!(p["conditions"][c]["relative_risk"].as_f64().unwrap(), expected.relative_risk[i]);
    }

    assert_eq!(h.post(&format!("{base}/prediction_feedback"), "ann1", all(true)).await.0, StatusCode::OK);

    let (status, first) = h.get(&format!("{base}/evidence/next"), "ann1").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["evidence"]["rank"], 1);
    assert!(first["votes"]["cancer"]["log_odds"].is_number());
    // an outstanding item is re-served, not skipped
    let (_, again) = h.get(&format!("{base}/evidence/next"), "ann1").await;
    assert_eq!(again["evidence"], first["evidence"]);

    let mut useful = json!({"usefulness": all("weakly_correlated"), "seen_in_review": true, "intuitive": {"cancer": true}});
    useful["usefulness"]["cancer"] = json!("very_useful");
    assert_eq!(h.post(&format!("{base}/evidence/1"), "ann1", useful).await.0, StatusCode::OK);

    // one annotation is not enough to finish
    let (status, body) = h
        .post(&format!("{base}/final"), "ann1", json!({"changed_mind": all(Value::Null)}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");

    let (_, second) = h.get(&format!("{base}/evidence/next"), "ann1").await;
    assert_eq!(second["evidence"]["rank"], 2);
    let (status, progress) = h.post(&format!("{base}/evidence/2"), "ann1", not_useful()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(progress["progress"]["can_finish"], true);
    assert_eq!(progress["progress"]["more_allowed"], true);

    let mut changed = all(Value::Null);
    changed["pneumonia"] = json!({"from": "somewhat_likely", "to": "very_likely"});
    let (status, s) = h.post(&format!("{base}/final"), "ann1", json!({"changed_mind": changed})).await;
    assert_eq!(status, StatusCode::OK, "{s}");
    assert_eq!(s["stage"], "final");
    assert_eq!(s["annotations"].as_array().unwrap().len(), 2);

    let (status, export) = h.call("GET", "/v1/export/annotations", None, None).await;
    assert_eq!(status, StatusCode::OK);
    // a single-record export is itself a JSON document
    let line = match export.as_str() {
        Some(text) => serde_json::from_str(text.lines().next().unwrap()).unwrap(),
        None => export,
    };
    assert_eq!(line["kind"], "session");
    assert_eq!(line["changed_mind"]["pneumonia"]["to"], "very_likely");
}

#[tokio::test]
async fn eleventh_evidence_item_is_refused() {
    let h = harness();
    let (patient, available) = busiest_patient();
    assert!(available > 10, "fixture needs more than 10 items, has {available}");
    let id = h.to_evidence_loop("ann", &patient).await;
    for rank in 1..=10 {
        let (status, v) = h.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["evidence"]["rank"], rank);
        let (status, v) = h.post(&format!("/v1/sessions/{id}/evidence/{rank}"), "ann", not_useful()).await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }
    let (status, v) = h.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("maximum 10"), "{v}");
}

#[tokio::test]
async fn evidence_runs_out_before_the_cap() {
    let h = harness();
    let patient = patient_with_evidence(2);
    let id = h.to_evidence_loop("ann", &patient).await;
    for rank in 1..=2 {
        h.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
        h.post(&format!("/v1/sessions/{id}/evidence/{rank}"), "ann", not_useful()).await;
    }
    let (status, v) = h.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
}

#[tokio::test]
async fn explicit_diagnosis_ends_the_session() {
    let h = harness();
    let (patient, _) = busiest_patient();
    let id = h.session("ann", &patient, "llm_logodds").await;
    let mut answers = all(false);
    answers["cancer"] = json!(true);
    let (status, s) = h.post(&format!("/v1/sessions/{id}/explicit"), "ann", answers).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["stage"], "final");
    assert_eq!(s["skipped"], true);
    let (status, _) = h
        .post(&format!("/v1/sessions/{id}/likelihoods"), "ann", all("unlikely"))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(h.get(&format!("/v1/sessions/{id}/prediction"), "ann").await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn error_contract() {
    let h = harness();
    let (patient, _) = busiest_patient();
    assert_eq!(h.get("/v1/sessions/s99999", "ann").await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        h.post("/v1/sessions", "ann", json!({"patient": "nobody"})).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        h.post("/v1/sessions", "ann", json!({"patient": patient, "variant": "oracle"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let (status, _) = h
        .call("POST", "/v1/sessions", None, Some(json!({"patient": patient})))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        h.get(&format!("/v1/patients/{patient}/timeline?until=all"), "ann").await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let id = h.to_evidence_loop("ann", &patient).await;
    let base = format!("/v1/sessions/{id}");
    assert_eq!(h.get(&base, "someone-else").await.0, StatusCode::FORBIDDEN);
    // missing condition key
    assert_eq!(
        h.post(&format!("{base}/prediction_feedback"), "ann", json!({"cancer": true})).await.0,
        StatusCode::CONFLICT,
        "stage already passed"
    );
    // annotating before serving
    assert_eq!(h.post(&format!("{base}/evidence/1"), "ann", not_useful()).await.0, StatusCode::CONFLICT);
    h.get(&format!("{base}/evidence/next"), "ann").await;
    // useful without the follow-up questions
    let mut bad = json!({"usefulness": all("not_relevant")});
    bad["usefulness"]["cancer"] = json!("useful");
    assert_eq!(h.post(&format!("{base}/evidence/1"), "ann", bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        h.post(&format!("{base}/evidence/one"), "ann", not_useful()).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(h.post(&format!("{base}/evidence/1"), "ann", not_useful()).await.0, StatusCode::OK);
    // no revisions
    let (status, v) = h.post(&format!("{base}/evidence/1"), "ann", not_useful()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("cannot be revised"));
    // malformed JSON
    let (status, _) = h
        .call("POST", &format!("{base}/final"), Some("ann"), Some(Value::String("{".into())))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn missing_likelihood_key_is_a_validation_error() {
    let h = harness();
    let (patient, _) = busiest_patient();
    let id = h.session("ann", &patient, "llm_logodds").await;
    h.post(&format!("/v1/sessions/{id}/explicit"), "ann", all(false)).await;
    let (status, v) = h
        .post(&format!("/v1/sessions/{id}/likelihoods"), "ann", json!({"cancer": "unlikely"}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (status, _) = h
        .post(&format!("/v1/sessions/{id}/likelihoods"), "ann", all("probably"))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn automatic_assignment_spreads_variants() {
    let h = harness();
    let (patient, _) = busiest_patient();
    let mut variants = Vec::new();
    for who in ["a", "b", "c"] {
        let id = h.session(who, &patient, "auto").await;
        let (_, s) = h.get(&format!("/v1/sessions/{id}"), who).await;
        variants.push(s["model_variant"].as_str().unwrap().to_string());
    }
    variants.sort();
    assert_eq!(variants, ["allehr_logodds", "llm_confidence", "llm_logodds"]);
    let (status, v) = h.post("/v1/sessions", "d", json!({"patient": patient})).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    let (status, _) = h.post("/v1/sessions", "a", json!({"patient": patient})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // explicit variant already taken for another patient's second annotator
    let other = catalog()
        .patients
        .keys()
        .find(|p| **p != patient)
        .unwrap()
        .clone();
    h.session("a", &other, "llm_logodds").await;
    let (status, _) = h
        .post("/v1/sessions", "b", json!({"patient": other, "variant": "llm_logodds"}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn restart_replays_to_identical_state() {
    let h = harness();
    let (patient, _) = busiest_patient();
    let id = h.to_evidence_loop("ann", &patient).await;
    h.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
    h.post(&format!("/v1/sessions/{id}/evidence/1"), "ann", not_useful()).await;
    let before = h.state.snapshot();
    let export_before = export_lines(&before);

    let Harness { dir, .. } = h;
    assert_eq!(replay(&dir.path().join(EVENTS_FILE)).unwrap(), before);
    let reopened = open(dir);
    assert_eq!(reopened.state.snapshot(), before);
    assert_eq!(export_lines(&reopened.state.snapshot()), export_before);
    // the restarted service continues the same session
    let (status, v) = reopened.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["evidence"]["rank"], 2);
}

#[tokio::test]
async fn concurrent_sessions_do_not_interfere() {
    let h = Arc::new(harness());
    let patients: Vec<String> = catalog().patients.keys().take(6).cloned().collect();
    let errors = Arc::new(Mutex::new(Vec::new()));
    let mut tasks = Vec::new();
    for (i, patient) in patients.into_iter().enumerate() {
        let h = h.clone();
        let errors = errors.clone();
        tasks.push(tokio::spawn(async move {
            let who = format!("ann{i}");
            let id = h.to_evidence_loop(&who, &patient).await;
            let (status, s) = h.get(&format!("/v1/sessions/{id}"), &who).await;
            if status != StatusCode::OK || s["stage"] != "evidence_loop" {
                errors.lock().unwrap().push(format!("{who}: {status} {s}"));
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    assert!(errors.lock().unwrap().is_empty(), "{:?}", errors.lock().unwrap());
    let state = h.state.snapshot();
    assert_eq!(state.sessions.len(), 6);
    assert_eq!(replay(&h.dir.path().join(EVENTS_FILE)).unwrap(), state);
}

#[tokio::test]
async fn label_verification() {
    let h = harness();
    let (status, pending) = h.get("/v1/labels/pending", "ann").await;
    assert_eq!(status, StatusCode::OK);
    let pending = pending.as_array().unwrap().clone();
    assert!(!pending.is_empty());
    let first = pending[0]["label_id"].as_str().unwrap().to_string();
    assert!(pending[0]["report_text"].as_str().unwrap().contains("Impression"));

    let uri = format!("/v1/labels/{}/verdict", first.replace(' ', "%20"));
    assert_eq!(
        h.post(&uri, "ann", json!({"confident": "yes"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        h.post(&uri, "ann", json!({"confident": "no", "earlier_likely": "no"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let (status, v) = h
        .post(&uri, "ann", json!({"confident": "yes", "earlier_likely": "no"}))
        .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(h.post(&uri, "ann", json!({"confident": "no"})).await.0, StatusCode::CONFLICT);
    assert_eq!(h.post(&uri, "other", json!({"confident": "no"})).await.0, StatusCode::OK);
    assert_eq!(
        h.post("/v1/labels/nobody:cancer/verdict", "ann", json!({"confident": "no"})).await.0,
        StatusCode::NOT_FOUND
    );

    let (_, after) = h.get("/v1/labels/pending", "ann").await;
    assert_eq!(after.as_array().unwrap().len(), pending.len() - 1);
}

#[tokio::test]
async fn hallucination_audit_queue() {
    let h = harness();
    let (patient, _) = busiest_patient();
    let id = h.to_evidence_loop("ann", &patient).await;
    for rank in 1..=6 {
        h.get(&format!("/v1/sessions/{id}/evidence/next"), "ann").await;
        h.post(&format!("/v1/sessions/{id}/evidence/{rank}"), "ann", not_useful()).await;
    }
    let (status, items) = h.get("/v1/audit/abstractive", "auditor").await;
    assert_eq!(status, StatusCode::OK);
    let items = items.as_array().unwrap().clone();
    // signs summaries are rewordings, extracted sentences are verbatim
    let state = h.state.snapshot();
    let served = &state.sessions[&id].served;
    let expected: Vec<usize> = served
        .iter()
        .filter(|s| s.text.starts_with("Signs:"))
        .map(|s| s.rank)
        .collect();
    assert!(!expected.is_empty());
    let got: Vec<String> = items.iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect();
    assert_eq!(got, expected.iter().map(|r| format!("{id}:{r}")).collect::<Vec<_>>());

    let item = &got[0];
    let uri = format!("/v1/audit/{item}");
    assert_eq!(
        h.post(&uri, "auditor", json!({"verdict": "partial"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let (status, v) = h
        .post(&uri, "auditor", json!({"verdict": "partial", "explanation": "adds a laterality"}))
        .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(h.post(&uri, "auditor", json!({"verdict": "no"})).await.0, StatusCode::CONFLICT);
    assert_eq!(
        h.post(&format!("/v1/audit/{id}:999"), "auditor", json!({"verdict": "no"})).await.0,
        StatusCode::NOT_FOUND
    );
    let (_, remaining) = h.get("/v1/audit/abstractive", "auditor").await;
    assert_eq!(remaining.as_array().unwrap().len(), got.len() - 1);
}

#[tokio::test]
async fn patient_listing() {
    let h = harness();
    let (status, list) = h.call("GET", "/v1/patients", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), catalog().patients.len());
    assert!(list
        .iter()
        .all(|p| p["past_reports"].as_u64().unwrap() < p["total_reports"].as_u64().unwrap()));
    // no split file was loaded, so filtering leaves nothing
    let (status, filtered) = h.call("GET", "/v1/patients?split=annotation", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(filtered.as_array().unwrap().is_empty());
    assert_eq!(
        h.call("GET", "/v1/patients?split=nonsense", None, None).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}
