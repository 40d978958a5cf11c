//! HTTP API under `/v1` exposing the questionnaire, elicitation and portfolio pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::elicitation::{build_scenarios, AnswerEntry, BenchmarkSpec, Estimator, ScenarioSet};
use crate::error::{Error, Result};
use crate::io::{load_item_set, parse_ratings, load_returns};
use crate::lfm::{fit_lfm, LfmConfig, RatingsMatrix};
use crate::lottery::{ItemSet, Lottery};
use crate::portfolio::{optimize_on_panel, PortfolioSpec, ReturnsPanel};
use crate::questionnaire::{select_pairs_random, select_pairs_spq, Provenance, Questionnaire, QuestionnaireFile};
use crate::session::{
    elicit_session, AllocationLine, FileSessionStore, Recommendation, SessionRecord, SessionStatus, SessionStore,
    StoredUtility,
};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_CAP_FRACTION: f64 = 0.4;

fn default_bind() -> String {
    DEFAULT_BIND.into()
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("advisor-data")
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_estimator() -> Estimator {
    Estimator::Neutral
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(2, |n| n.get())
}

/// Server configuration, read from TOML and overridden by `ADVISOR_BIND` / `ADVISOR_DATA_DIR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub item_set: PathBuf,
    /// Ratings CSV for SPQ questionnaires; without it only random questionnaires are served.
    #[serde(default)]
    pub ratings: Option<PathBuf>,
    /// Net-returns CSV for portfolio recommendations.
    #[serde(default)]
    pub returns: Option<PathBuf>,
    #[serde(default = "default_estimator")]
    pub default_estimator: Estimator,
    #[serde(default = "default_k")]
    pub default_k: usize,
    /// Trailing rows of the returns panel used as scenarios.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Allowed browser origins; `"*"` allows any.
    #[serde(default)]
    pub cors_origins: Vec<String>,
    /// Concurrent solver jobs.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub lfm: LfmConfig,
}

impl ApiConfig {
    pub fn new(item_set: impl Into<PathBuf>) -> Self {
        ApiConfig {
            bind: default_bind(),
            data_dir: default_data_dir(),
            item_set: item_set.into(),
            ratings: None,
            returns: None,
            default_estimator: default_estimator(),
            default_k: DEFAULT_K,
            window: DEFAULT_WINDOW,
            cors_origins: Vec::new(),
            workers: default_workers(),
            lfm: LfmConfig::default(),
        }
    }

    /// Reads a TOML file; relative paths inside it resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg: ApiConfig = toml::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?;
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.data_dir);
            fix(&mut cfg.item_set);
            cfg.ratings.as_mut().map(fix);
            cfg.returns.as_mut().map(fix);
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(bind) = std::env::var("ADVISOR_BIND") {
            self.bind = bind;
        }
        if let Ok(dir) = std::env::var("ADVISOR_DATA_DIR") {
            self.data_dir = dir.into();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.default_k == 0 {
            return Err(Error::validation("default_k must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::validation("window must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::validation("workers must be at least 1"));
        }
        Ok(())
    }
}

/// Error body `{code, message, details}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), details: Value::Null }
    }

    fn conflict(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Domain { value, upper } => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "domain",
                message: format!("{message}; wealth must not exceed the utility upper bound b̄ = {upper}"),
                details: json!({ "value": value, "upper_bound": upper }),
            },
            Error::Inconsistent(inc) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "inconsistent",
                message,
                details: serde_json::to_value(inc).unwrap_or(Value::Null),
            },
            Error::Infeasible(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "infeasible", message),
            Error::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            Error::Conflict(_) => ApiError::conflict(message),
            e if e.is_validation() => ApiError::unprocessable(message),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "details": self.details });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

struct RatingsSource {
    matrix: RatingsMatrix,
    digest: [u8; 32],
}

pub struct AppState {
    config: ApiConfig,
    items: ItemSet,
    items_digest: [u8; 32],
    ratings: Option<RatingsSource>,
    panel: Option<ReturnsPanel>,
    scenarios: ScenarioSet,
    store: Box<dyn SessionStore>,
    spq_cache: Mutex<HashMap<String, QuestionnaireFile>>,
    workers: Semaphore,
}

impl AppState {
    /// Loads every configured input; fails if any path is unreadable or invalid.
    pub fn load(config: ApiConfig) -> Result<Self> {
        config.validate()?;
        let items = load_item_set(&config.item_set)?;
        let items_digest: [u8; 32] = Sha256::digest(serde_json::to_vec(&items)?).into();
        let ratings = match &config.ratings {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?;
                let text = String::from_utf8(bytes)
                    .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?;
                let matrix = parse_ratings(&text, &items, path)?;
                Some(RatingsSource { matrix, digest: Sha256::digest(text.as_bytes()).into() })
            }
            None => None,
        };
        let panel = config.returns.as_deref().map(load_returns).transpose()?;
        let scenarios = build_scenarios(&items, &BenchmarkSpec::default_for(&items))?;
        let store = Box::new(FileSessionStore::open(&config.data_dir)?);
        let workers = Semaphore::new(config.workers);
        Ok(AppState {
            config,
            items,
            items_digest,
            ratings,
            panel,
            scenarios,
            store,
            spq_cache: Mutex::new(HashMap::new()),
            workers,
        })
    }

    pub fn config(&self) -> &ApiConfig {
        &self.config
    }

    pub fn items(&self) -> &ItemSet {
        &self.items
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.scenarios
    }

    fn spq_questionnaire(&self, k: usize) -> Result<QuestionnaireFile> {
        let Some(ratings) = &self.ratings else {
            return Err(Error::Conflict("SPQ questionnaires need a ratings file; none is configured".into()));
        };
        let mut h = Sha256::new();
        h.update(ratings.digest);
        h.update(self.items_digest);
        h.update((k as u64).to_le_bytes());
        let key = hex::encode(h.finalize());
        if let Some(q) = self.spq_cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(q.clone());
        }
        let model = fit_lfm(&ratings.matrix, &self.config.lfm)?;
        let q = select_pairs_spq(&model, &self.items, k)?.to_file();
        self.spq_cache.lock().unwrap_or_else(|e| e.into_inner()).insert(key, q.clone());
        Ok(q)
    }
}

type Shared = Arc<AppState>;

/// Runs CPU-bound work on the blocking pool, at most `workers` jobs at a time.
async fn run_blocking<T, F>(state: &Shared, f: F) -> std::result::Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T> + Send + 'static,
{
    let _permit = state
        .workers
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "worker pool closed"))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub item_set: Option<String>,
    #[serde(default, rename = "K")]
    pub k: Option<usize>,
    #[serde(default)]
    pub method: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Question {
    pub index: usize,
    pub first: Lottery,
    pub second: Lottery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub method: Provenance,
    pub questions: Vec<Question>,
}

fn questions(q: &Questionnaire) -> Vec<Question> {
    q.pairs
        .iter()
        .enumerate()
        .map(|(index, p)| Question { index, first: p.first.clone(), second: p.second.clone() })
        .collect()
}

fn new_session_id() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateSessionRequest>,
) -> std::result::Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    if let Some(name) = &req.item_set {
        if *name != state.items.name {
            return Err(Error::NotFound(format!("item set {name}")).into());
        }
    }
    let k = req.k.unwrap_or(state.config.default_k);
    if k == 0 {
        return Err(ApiError::unprocessable("K must be at least 1"));
    }
    let method = req.method.unwrap_or(Provenance::Spq);
    if method == Provenance::Spq && state.ratings.is_none() {
        return Err(ApiError::conflict("SPQ questionnaires need a ratings file; none is configured"));
    }
    let resp = run_blocking(&state, move |st| {
        let (file, seed) = match method {
            Provenance::Spq => (st.spq_questionnaire(k)?, None),
            Provenance::Random => {
                let seed = rand::random::<u64>();
                (select_pairs_random(&st.items, k, seed)?.to_file(), Some(seed))
            }
        };
        let q = Questionnaire::from_file(&file, &st.items)?;
        let record = SessionRecord::new(new_session_id(), st.items.name.clone(), file, seed);
        let record = st.store.create(record)?;
        Ok(CreateSessionResponse { session_id: record.id, status: record.status, method, questions: questions(&q) })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswersRequest {
    pub answers: Vec<AnswerEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswersResponse {
    pub status: SessionStatus,
    pub answered: usize,
    pub remaining: usize,
}

async fn submit_answers(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AnswersRequest>,
) -> ApiResult<AnswersResponse> {
    let resp = run_blocking(&state, move |st| {
        let mut record = st.store.get(&id)?;
        if record.status >= SessionStatus::Answered {
            return Err(Error::Conflict(format!("session {id} already has all answers")));
        }
        let k = record.questionnaire.pairs.len();
        let mut seen: BTreeSet<usize> = record.answers.iter().map(|a| a.pair_index).collect();
        for a in &req.answers {
            if a.pair_index >= k {
                return Err(Error::validation(format!("pair index {} is outside 0..{k}", a.pair_index)));
            }
            if !seen.insert(a.pair_index) {
                return Err(Error::validation(format!("pair {} answered twice", a.pair_index)));
            }
        }
        record.answers.extend(req.answers);
        record.answers.sort_by_key(|a| a.pair_index);
        if record.answers.len() == k {
            record.status = SessionStatus::Answered;
        }
        let record = st.store.update(record)?;
        Ok(AnswersResponse { status: record.status, answered: record.answers.len(), remaining: k - record.answers.len() })
    })
    .await?;
    Ok(Json(resp))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElicitRequest {
    #[serde(default)]
    pub estimators: Option<Vec<Estimator>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElicitResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub utilities: BTreeMap<Estimator, StoredUtility>,
}

async fn elicit(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<ElicitRequest>>,
) -> ApiResult<ElicitResponse> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let resp = run_blocking(&state, move |st| {
        let mut record = st.store.get(&id)?;
        match record.status {
            SessionStatus::Questioning => {
                return Err(Error::Conflict(format!(
                    "session {id} has {} of {} answers",
                    record.answers.len(),
                    record.questionnaire.pairs.len()
                )))
            }
            SessionStatus::Answered => {
                record.utilities = elicit_session(&record, &st.items, &st.scenarios)?;
                record.status = SessionStatus::Elicited;
                record = st.store.update(record)?;
            }
            SessionStatus::Elicited | SessionStatus::Recommended => {}
        }
        let wanted: BTreeSet<Estimator> = req.estimators.unwrap_or_else(|| Estimator::ALL.to_vec()).into_iter().collect();
        let utilities = record.utilities.into_iter().filter(|(e, _)| wanted.contains(e)).collect();
        Ok(ElicitResponse { session_id: record.id, status: record.status, utilities })
    })
    .await?;
    Ok(Json(resp))
}

/// Cap on every risky asset, either one amount for all or one per asset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Caps {
    All(f64),
    Each(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioRequest {
    #[serde(default)]
    pub estimator: Option<Estimator>,
    pub budget: f64,
    #[serde(default)]
    pub caps: Option<Caps>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreviewPoint {
    pub date: NaiveDate,
    pub wealth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub estimator: Estimator,
    pub budget: f64,
    pub caps: Vec<f64>,
    pub allocation: Vec<AllocationLine>,
    pub objective: f64,
    /// Buy-and-hold wealth of the allocation over the scenario window.
    pub wealth_preview: Vec<PreviewPoint>,
}

fn wealth_preview(panel: &ReturnsPanel, start: usize, allocation: &[f64]) -> Vec<PreviewPoint> {
    let mut holdings = allocation.to_vec();
    panel.factors()[start..]
        .iter()
        .zip(&panel.dates()[start..])
        .map(|(row, &date)| {
            for (h, f) in holdings.iter_mut().zip(row) {
                *h *= f;
            }
            PreviewPoint { date, wealth: holdings.iter().sum() }
        })
        .collect()
}

async fn recommend(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PortfolioRequest>,
) -> ApiResult<PortfolioResponse> {
    let resp = run_blocking(&state, move |st| {
        let Some(panel) = &st.panel else {
            return Err(Error::Conflict("no returns panel is configured".into()));
        };
        let mut record = st.store.get(&id)?;
        if record.status < SessionStatus::Elicited {
            return Err(Error::Conflict(format!("session {id} has no elicited utilities yet")));
        }
        let estimator = req.estimator.unwrap_or(st.config.default_estimator);
        let u = &record
            .utilities
            .get(&estimator)
            .ok_or_else(|| Error::NotFound(format!("{estimator} utility for session {id}")))?
            .utility
            .utility;
        let risky = panel.num_risky();
        let caps = match req.caps {
            None => vec![DEFAULT_CAP_FRACTION * req.budget; risky],
            Some(Caps::All(c)) => vec![c; risky],
            Some(Caps::Each(c)) => c,
        };
        let spec = PortfolioSpec { budget: req.budget, caps };
        spec.validate(risky)?;
        let window = st.config.window.min(panel.len());
        let p = optimize_on_panel(u, panel, panel.len(), window, &spec)?;
        let allocation: Vec<AllocationLine> = p
            .assets
            .iter()
            .zip(&p.allocation)
            .map(|(a, &x)| AllocationLine { asset: a.clone(), amount: x })
            .collect();
        let preview = wealth_preview(panel, panel.len() - window, &p.allocation);
        record.portfolio = Some(Recommendation {
            estimator,
            budget: spec.budget,
            caps: spec.caps.clone(),
            allocation: allocation.clone(),
            objective: p.objective,
        });
        record.status = SessionStatus::Recommended;
        let record = st.store.update(record)?;
        Ok(PortfolioResponse {
            session_id: record.id,
            status: record.status,
            estimator,
            budget: spec.budget,
            caps: spec.caps,
            allocation,
            objective: p.objective,
            wealth_preview: preview,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn get_session(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionRecord> {
    Ok(Json(state.store.get(&id)?))
}

async fn get_items(State(state): State<Shared>) -> Json<ItemSet> {
    Json(state.items.clone())
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return Some(layer.allow_origin(Any));
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    Some(layer.allow_origin(AllowOrigin::list(list)))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answers", post(submit_answers))
        .route("/sessions/{id}/elicit", post(elicit))
        .route("/sessions/{id}/portfolio", post(recommend))
        .route("/items", get(get_items))
        .route("/healthz", get(healthz));
    let cors = cors(&state.config.cors_origins);
    let app = Router::new().nest("/v1", api).with_state(state);
    match cors {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

/// Binds the configured address and returns the bound address with the serving future.
pub async fn bind(config: ApiConfig) -> Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind(&config.bind).await?;
    let addr = listener.local_addr()?;
    let state = Arc::new(AppState::load(config)?);
    let app = router(state);
    Ok((addr, async move { axum::serve(listener, app).await }))
}

/// Serves until Ctrl-C.
pub async fn serve(config: ApiConfig) -> Result<()> {
    let listener = TcpListener::bind(&config.bind).await?;
    let state = Arc::new(AppState::load(config)?);
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
