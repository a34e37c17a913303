//! HTTP surface consumed by the review UI.
//!
//! Every request carries `Authorization: Bearer <token>`; the token maps to
//! the annotator id recorded on decisions and annotations. Mutating
//! endpoints honour an optional `Idempotency-Key` header: a retry with the
//! same key and body replays the first response, a different body under the
//! same key is a conflict.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::async_trait;
use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use annoprop::classifier::TrainingMeta;
use annoprop::dataprep::DatasetConfig;
use annoprop::geometry::Polygon;
use annoprop::imaging::Rect;
use annoprop::pipeline::EvaluationRun;
use annoprop::ranking::{ImageClassScore, ScoreCache};
use annoprop::segmenter::{ProposalStatus, ProposedSegment};
use annoprop::store::{
    AnnotationFilter, AnnotationRecord, Decision, DecisionRecord, ImageEntry, JsonKind, Nomenclature, ProposalFilter,
    Store,
};

use crate::error::{ApiError, ErrorCode};
use crate::jobs::{JobKind, JobRegistry, JobStatus, Progress};
use crate::ops;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const MAX_PER_PAGE: usize = 500;

type ApiResult<T> = Result<T, ApiError>;

/// Shared server state. The store handle is the single writer; jobs compute
/// on a fresh read-only snapshot and take the writer only to publish.
pub struct AppState {
    pub store: RwLock<Store>,
    pub root: PathBuf,
    pub tokens: HashMap<String, String>,
    pub threshold: f64,
    pub jobs: JobRegistry,
    scores: Mutex<ScoreCache>,
    replies: Mutex<HashMap<(String, String), Reply>>,
}

#[derive(Clone)]
struct Reply {
    fingerprint: String,
    status: StatusCode,
    body: Value,
}

impl AppState {
    pub fn new(store: Store, tokens: HashMap<String, String>, threshold: f64, workers: usize) -> Arc<Self> {
        Arc::new(AppState {
            root: store.root().to_path_buf(),
            store: RwLock::new(store),
            tokens,
            threshold,
            jobs: JobRegistry::new(workers),
            scores: Mutex::new(ScoreCache::new()),
            replies: Mutex::new(HashMap::new()),
        })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.store.read().expect("store lock poisoned")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Store> {
        self.store.write().expect("store lock poisoned")
    }

    fn snapshot(&self) -> annoprop::Result<Store> {
        Store::open(&self.root)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/:id", get(image_bytes))
        .route("/images/:id/proposals", get(image_proposals))
        .route("/images/:id/annotations", get(image_annotations))
        .route("/proposals/:id/decision", post(decide))
        .route("/annotations", post(create_annotation))
        .route("/queue", get(queue))
        .route("/jobs", post(submit_job))
        .route("/jobs/:id", get(job_status))
        .route("/metrics/latest", get(latest_metrics))
        .route("/nomenclature", get(nomenclature))
        .with_state(state)
}

/// Annotator id resolved from the bearer token.
pub struct Annotator(pub String);

#[async_trait]
impl FromRequestParts<Arc<AppState>> for Annotator {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> ApiResult<Self> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(ErrorCode::Unauthorized, "missing bearer token"))?;
        state
            .tokens
            .get(token.trim())
            .map(|a| Annotator(a.clone()))
            .ok_or_else(|| ApiError::new(ErrorCode::Unauthorized, "unknown token"))
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response types serialise")
}

/// Runs `op` at most once per `(annotator, key)`; replays the stored reply on
/// a matching retry.
fn idempotent(
    state: &AppState,
    annotator: &str,
    headers: &HeaderMap,
    fingerprint: String,
    op: impl FnOnce() -> ApiResult<(StatusCode, Value)>,
) -> Response {
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(|k| (annotator.to_owned(), k.to_owned()));
    let Some(key) = key else {
        return match op() {
            Ok((status, body)) => (status, Json(body)).into_response(),
            Err(e) => e.into_response(),
        };
    };
    // Held across `op` so concurrent retries of one key cannot both run.
    let mut replies = state.replies.lock().expect("reply cache poisoned");
    if let Some(r) = replies.get(&key) {
        if r.fingerprint != fingerprint {
            return ApiError::new(ErrorCode::Conflict, "idempotency key reused with a different request")
                .into_response();
        }
        return (r.status, Json(r.body.clone())).into_response();
    }
    let (status, body) = match op() {
        Ok(ok) => ok,
        Err(e) if e.code == ErrorCode::Internal => return e.into_response(),
        Err(e) => (
            e.code.status(),
            to_value(&crate::error::ErrorBody {
                code: e.code,
                message: e.message,
            }),
        ),
    };
    replies.insert(
        key,
        Reply {
            fingerprint,
            status,
            body: body.clone(),
        },
    );
    (status, Json(body)).into_response()
}

// --- images --------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageStatus {
    #[default]
    Any,
    Annotated,
    Unannotated,
    /// Has proposals awaiting review.
    Pending,
}

#[derive(Debug, Deserialize)]
pub struct ImageQuery {
    #[serde(default)]
    pub status: ImageStatus,
    pub class: Option<String>,
    pub page: Option<usize>,
    pub per_page: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    #[serde(flatten)]
    pub entry: ImageEntry,
    pub annotations: usize,
    pub pending_proposals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePage {
    pub images: Vec<ImageSummary>,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
}

async fn list_images(
    State(state): State<Arc<AppState>>,
    _: Annotator,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Json<ImagePage>> {
    let page = q.page.unwrap_or(1).max(1);
    let per_page = q.per_page.unwrap_or(50).clamp(1, MAX_PER_PAGE);
    let store = state.read();
    let class = q.class.as_deref();
    if let Some(c) = class {
        if !store.nomenclature().contains(c) {
            return Err(ApiError::validation(format!("unknown class `{c}`")));
        }
    }
    let matching: Vec<ImageSummary> = store
        .list_images()
        .iter()
        .filter_map(|e| {
            let anns = store.list_annotations(&AnnotationFilter {
                image_id: Some(&e.id),
                ..Default::default()
            });
            let pending = store.list_proposals(&ProposalFilter {
                image_id: Some(&e.id),
                status: Some(ProposalStatus::Proposed),
                ..Default::default()
            });
            let keep = match q.status {
                ImageStatus::Any => true,
                ImageStatus::Annotated => !anns.is_empty(),
                ImageStatus::Unannotated => anns.is_empty(),
                ImageStatus::Pending => !pending.is_empty(),
            };
            let class_ok = class.is_none_or(|c| {
                anns.iter().any(|a| a.class_name == c) || pending.iter().any(|p| p.class_id == c)
            });
            (keep && class_ok).then(|| ImageSummary {
                entry: e.clone(),
                annotations: anns.len(),
                pending_proposals: pending.len(),
            })
        })
        .collect();
    let total = matching.len();
    let images = matching.into_iter().skip((page - 1) * per_page).take(per_page).collect();
    Ok(Json(ImagePage {
        images,
        page,
        per_page,
        total,
    }))
}

async fn image_bytes(State(state): State<Arc<AppState>>, _: Annotator, Path(id): Path<String>) -> ApiResult<Response> {
    let store = state.read();
    if store.image(&id).is_none() {
        return Err(ApiError::not_found(format!("image {id}")));
    }
    let bytes = store.image_bytes(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ProposalQuery {
    pub status: Option<ProposalStatus>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalList {
    pub image_id: String,
    pub proposals: Vec<ProposedSegment>,
}

async fn image_proposals(
    State(state): State<Arc<AppState>>,
    _: Annotator,
    Path(id): Path<String>,
    Query(q): Query<ProposalQuery>,
) -> ApiResult<Json<ProposalList>> {
    let store = state.read();
    if store.image(&id).is_none() {
        return Err(ApiError::not_found(format!("image {id}")));
    }
    let proposals = store
        .list_proposals(&ProposalFilter {
            image_id: Some(&id),
            status: q.status,
            ..Default::default()
        })
        .into_iter()
        .cloned()
        .collect();
    Ok(Json(ProposalList { image_id: id, proposals }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationList {
    pub image_id: String,
    pub annotations: Vec<AnnotationRecord>,
}

async fn image_annotations(
    State(state): State<Arc<AppState>>,
    _: Annotator,
    Path(id): Path<String>,
) -> ApiResult<Json<AnnotationList>> {
    let store = state.read();
    if store.image(&id).is_none() {
        return Err(ApiError::not_found(format!("image {id}")));
    }
    let annotations = store
        .list_annotations(&AnnotationFilter {
            image_id: Some(&id),
            ..Default::default()
        })
        .into_iter()
        .cloned()
        .collect();
    Ok(Json(AnnotationList { image_id: id, annotations }))
}

// --- review ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub decision: Decision,
    #[serde(default)]
    pub edited_geometry: Option<Polygon>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub decision: DecisionRecord,
    pub annotation: Option<AnnotationRecord>,
}

async fn decide(
    State(state): State<Arc<AppState>>,
    Annotator(annotator): Annotator,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let fingerprint = format!("decision:{id}:{}", String::from_utf8_lossy(&body));
    idempotent(&state, &annotator, &headers, fingerprint, || {
        let req: DecisionRequest = parse_body(&body)?;
        let mut store = state.write();
        let response = match (req.decision, req.edited_geometry) {
            (Decision::Decline, Some(_)) => {
                return Err(ApiError::validation("a decline carries no geometry"));
            }
            (Decision::AcceptWithEdit, None) => {
                return Err(ApiError::validation("accept-with-edit needs edited_geometry"));
            }
            (Decision::Decline, None) => DecisionResponse {
                decision: store.decline_proposal(&id, &annotator)?,
                annotation: None,
            },
            (_, edit) => {
                let annotation = store.accept_proposal(&id, &annotator, edit)?;
                let decision = store
                    .live_decision(&id)
                    .cloned()
                    .ok_or_else(|| ApiError::new(ErrorCode::Internal, "decision was not recorded"))?;
                DecisionResponse {
                    decision,
                    annotation: Some(annotation),
                }
            }
        };
        Ok((StatusCode::OK, to_value(&response)))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewAnnotation {
    pub image_id: String,
    pub rect: Rect,
    pub class: String,
}

async fn create_annotation(
    State(state): State<Arc<AppState>>,
    Annotator(annotator): Annotator,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let fingerprint = format!("annotation:{}", String::from_utf8_lossy(&body));
    idempotent(&state, &annotator, &headers, fingerprint, || {
        let req: NewAnnotation = parse_body(&body)?;
        if !req.rect.is_valid() {
            return Err(ApiError::validation("rectangle has no area"));
        }
        let mut store = state.write();
        if store.image(&req.image_id).is_none() {
            return Err(ApiError::not_found(format!("image {}", req.image_id)));
        }
        let rec = AnnotationRecord::manual(&req.image_id, req.rect, &req.class, &annotator);
        store.put_annotation(rec.clone())?;
        Ok((StatusCode::CREATED, to_value(&rec)))
    })
}

// --- ranking ----------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct QueueQuery {
    pub class: String,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub class_id: String,
    pub model_version: String,
    /// True when the scores predate the current model; a score-corpus job
    /// refreshes them.
    pub stale: bool,
    pub entries: Vec<ImageClassScore>,
}

async fn queue(
    State(state): State<Arc<AppState>>,
    _: Annotator,
    Query(q): Query<QueueQuery>,
) -> ApiResult<Json<QueueResponse>> {
    let k = q.k.unwrap_or(10);
    if k == 0 {
        return Err(ApiError::validation("k must be positive"));
    }
    let st = state.clone();
    tokio::task::spawn_blocking(move || -> ApiResult<QueueResponse> {
        let snapshot = st.snapshot()?;
        let (version, model) = ops::current_model(&snapshot)?;
        let mut cache = st.scores.lock().expect("score cache poisoned");
        let stale = match cache.current() {
            Some(t) => t.model_version != version,
            None => false,
        };
        if !stale {
            let ids = ops::select_images(&snapshot, None)?;
            let table = cache.table_for(&version, model.roster(), st.threshold);
            table.fill(&model, &ids, |id| snapshot.load_image(id))?;
        }
        let table = cache.current().expect("table present");
        let queue = ops::queue(&snapshot, table, &q.class, k)?;
        Ok(QueueResponse {
            class_id: queue.class_id,
            model_version: queue.model_version,
            stale,
            entries: queue.entries,
        })
    })
    .await
    .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
    .map(Json)
}

// --- jobs ---------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobParams {
    /// Restricts the job to a stored synthetic corpus.
    pub corpus: Option<String>,
    pub image_ids: Option<Vec<String>>,
    pub threshold: Option<f64>,
    pub dataset: Option<DatasetConfig>,
    pub train: Option<TrainingMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub params: JobParams,
}

fn job_images(store: &Store, p: &JobParams) -> annoprop::Result<Vec<String>> {
    match &p.image_ids {
        Some(ids) => {
            if let Some(missing) = ids.iter().find(|id| store.image(id).is_none()) {
                return Err(annoprop::Error::NotFound(format!("image {missing}")));
            }
            Ok(ids.clone())
        }
        None => ops::select_images(store, p.corpus.as_deref()),
    }
}

fn run_job(state: &AppState, kind: JobKind, p: &JobParams, progress: &Progress) -> ApiResult<String> {
    let snapshot = state.snapshot()?;
    let ids = job_images(&snapshot, p)?;
    let threshold = p.threshold.unwrap_or(state.threshold);
    progress.advance(0.05);
    let result = match kind {
        JobKind::Train => {
            let dataset = p.dataset.clone().unwrap_or_default();
            let outcome = ops::train(&snapshot, &ids, &dataset, p.train.unwrap_or_default())?;
            progress.advance(0.9);
            let summary = ops::publish_training(&mut state.write(), &outcome)?;
            format!("models/{}.bin", summary.model_version)
        }
        JobKind::SegmentCorpus => {
            let (_, model) = ops::current_model(&snapshot)?;
            let results = ops::segment(&snapshot, &model, &ids, threshold)?;
            progress.advance(0.9);
            ops::publish_segments(&mut state.write(), results)?;
            "records/proposals.ndjson".to_owned()
        }
        JobKind::ScoreCorpus => {
            let (version, model) = ops::current_model(&snapshot)?;
            let table = ops::score(&snapshot, &model, &version, &ids, threshold)?;
            progress.advance(0.9);
            let path = ops::publish_scores(&mut state.write(), &table)?;
            let mut cache = state.scores.lock().expect("score cache poisoned");
            *cache.table_for(&version, model.roster(), threshold) = table;
            path
        }
        JobKind::Evaluate => {
            let (version, model) = ops::current_model(&snapshot)?;
            let classifier = ops::training_validation(&snapshot, &version)?;
            let run = ops::evaluate(&snapshot, &model, &ids, threshold, classifier)?;
            progress.advance(0.9);
            ops::publish_evaluation(&mut state.write(), &run)?
        }
    };
    Ok(result)
}

async fn submit_job(
    State(state): State<Arc<AppState>>,
    Annotator(annotator): Annotator,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let fingerprint = format!("job:{}", String::from_utf8_lossy(&body));
    let st = state.clone();
    idempotent(&state, &annotator, &headers, fingerprint, move || {
        let req: JobRequest = parse_body(&body)?;
        if let Some(t) = req.params.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(ApiError::validation(format!("threshold {t} outside [0, 1]")));
            }
        }
        if let Some(d) = &req.params.dataset {
            d.validate()?;
        }
        let kind = req.kind;
        let worker = st.clone();
        let status = st.jobs.submit(kind, move |progress| {
            run_job(&worker, kind, &req.params, &progress).map_err(|e| e.message)
        });
        Ok((StatusCode::ACCEPTED, to_value(&status)))
    })
}

async fn job_status(
    State(state): State<Arc<AppState>>,
    _: Annotator,
    Path(id): Path<String>,
) -> ApiResult<Json<JobStatus>> {
    state
        .jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

// --- metadata -------------------------------------------------------------------

async fn latest_metrics(State(state): State<Arc<AppState>>, _: Annotator) -> ApiResult<Json<EvaluationRun>> {
    state
        .read()
        .get_json::<EvaluationRun>(JsonKind::Report, ops::LATEST_REPORT)?
        .map(Json)
        .ok_or_else(|| ApiError::not_found("no evaluation has been run"))
}

async fn nomenclature(State(state): State<Arc<AppState>>, _: Annotator) -> Json<Nomenclature> {
    Json(state.read().nomenclature().clone())
}
