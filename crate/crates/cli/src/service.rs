//! JSON HTTP API over sessions, the ground-truth dataset and reports.
//!
//! Routes:
//!
//! ```text
//! GET  /api/taxonomy
//! POST /api/sessions                {"backend"?, "template"?}      -> {"session_id", ...}
//! POST /api/sessions/{id}/messages  {"text"}                       -> {"client_turn", "robot_turn"}
//! GET  /api/sessions/{id}                                          -> transcript
//! POST /api/ground-truth            {"pair": {...}}                -> {"pair"}
//! GET  /api/ground-truth                                           -> {"count", "pairs"}
//! POST /api/reports/alignment       {} | {"dataset": "server"} | {"pairs": [...]}
//! GET  /api/reports/frequency?source=robot|human
//! ```
//!
//! Errors are `{"error": {"code", "message"}}`. Backend credentials are
//! server configuration only; no route accepts them.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{any, get, post};
use axum::{Json, Router};
use clap::Args;
use cues_core::backend::CompletionBackend;
use cues_core::dataset::{
    append_pair, load_dataset_or_empty, DatasetError, GroundTruthPair, PairRecord, UtteranceRecord,
};
use cues_core::parser::ResponseParser;
use cues_core::prompt::{default_template, GenerationParams, PromptTemplate};
use cues_core::report::{frequency_to_json, report_to_json};
use cues_core::scoring::{aggregate, build_records, frequency, side_assignments, ScoringError, Source};
use cues_core::session::{start_session, IdSource, SessionConfig, SessionError, SharedSession, UuidIds};
use cues_core::taxonomy::canonical_taxonomy;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;

use crate::options::{BackendArgs, BackendKind};
use crate::{failure, CliError};

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Dataset that annotations are appended to and reports read from.
    #[arg(long, default_value = "ground_truth.jsonl")]
    pub dataset: PathBuf,
    /// Directory for session transcripts; none are written if unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Built web console to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

pub struct ServiceConfig {
    pub backends: BTreeMap<String, Arc<dyn CompletionBackend>>,
    pub default_backend: String,
    pub templates: BTreeMap<String, PromptTemplate>,
    pub default_template: String,
    pub params: GenerationParams,
    pub parser: ResponseParser,
    pub dataset_path: PathBuf,
    pub transcript_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    /// One backend and the default template; for embedding and tests.
    pub fn new(backend_name: &str, backend: Arc<dyn CompletionBackend>, dataset_path: PathBuf) -> Self {
        let template = default_template();
        Self {
            backends: BTreeMap::from([(backend_name.to_string(), backend)]),
            default_backend: backend_name.to_string(),
            default_template: template.name.clone(),
            templates: BTreeMap::from([(template.name.clone(), template)]),
            params: GenerationParams::default(),
            parser: ResponseParser::default(),
            dataset_path,
            transcript_dir: None,
            static_dir: None,
        }
    }

    pub fn from_args(args: &ServeArgs) -> Result<Self, CliError> {
        let mut backends: BTreeMap<String, Arc<dyn CompletionBackend>> = BTreeMap::new();
        let http = BackendArgs { backend: BackendKind::Http, ..args.backend.clone() };
        backends.insert("http".into(), http.backend()?);
        if args.backend.fixture.is_some() || args.backend.backend == BackendKind::Scripted {
            let scripted = BackendArgs { backend: BackendKind::Scripted, ..args.backend.clone() };
            backends.insert("scripted".into(), scripted.backend()?);
        }
        let mut templates = BTreeMap::new();
        let default = default_template();
        templates.insert(default.name.clone(), default);
        let chosen = args.backend.template()?;
        let default_template = chosen.name.clone();
        templates.insert(chosen.name.clone(), chosen);
        Ok(Self {
            backends,
            default_backend: args.backend.backend.name().to_string(),
            templates,
            default_template,
            params: args.backend.params()?,
            parser: args.backend.parser()?,
            dataset_path: args.dataset.clone(),
            transcript_dir: args.out.clone(),
            static_dir: args.static_dir.clone(),
        })
    }
}

pub struct AppState {
    config: ServiceConfig,
    ids: Arc<dyn IdSource>,
    sessions: RwLock<HashMap<String, SharedSession>>,
    dataset_writer: Mutex<()>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self::with_ids(config, Arc::new(UuidIds))
    }

    pub fn with_ids(config: ServiceConfig, ids: Arc<dyn IdSource>) -> Self {
        Self { config, ids, sessions: RwLock::new(HashMap::new()), dataset_writer: Mutex::new(()) }
    }

    fn session(&self, id: &str) -> Result<SharedSession, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id:?}")))
    }

    fn snapshot(&self) -> Result<Vec<GroundTruthPair>, ApiError> {
        let _guard = self.dataset_writer.lock().unwrap_or_else(|p| p.into_inner());
        load_dataset_or_empty(&self.config.dataset_path).map_err(dataset_error)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::EmptyMessage => Self::new(StatusCode::BAD_REQUEST, "empty_message", message),
            SessionError::Busy => Self::new(StatusCode::CONFLICT, "busy", message),
            SessionError::BackendUnavailable { .. } => {
                Self::new(StatusCode::BAD_GATEWAY, "backend_unavailable", message)
            }
            SessionError::Prompt(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_prompt", message),
            SessionError::Io { .. } | SessionError::MalformedTranscript { .. } => Self::internal(message),
        }
    }
}

fn dataset_error(e: DatasetError) -> ApiError {
    ApiError::internal(format!("server dataset: {e}"))
}

fn scoring_error(e: ScoringError) -> ApiError {
    let code = match e {
        ScoringError::MissingRobotResponse(_) => "missing_robot_response",
        ScoringError::EmptyInput => "empty_input",
        ScoringError::InvalidAssignment { .. } => "invalid_assignment",
    };
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
}

/// Parses a JSON body; an empty body reads as `T::default()`.
fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

type Shared = State<Arc<AppState>>;

async fn taxonomy() -> Json<Value> {
    Json(canonical_taxonomy().to_json())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    backend: Option<String>,
    template: Option<String>,
}

struct FixedId(String);

impl IdSource for FixedId {
    fn next_id(&self) -> String {
        self.0.clone()
    }
}

async fn create_session(State(state): Shared, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let cfg = &state.config;
    let backend_name = req.backend.unwrap_or_else(|| cfg.default_backend.clone());
    let backend = cfg.backends.get(&backend_name).cloned().ok_or_else(|| {
        ApiError::bad_request(format!(
            "unknown backend {backend_name:?}; available: {}",
            cfg.backends.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let template_name = req.template.unwrap_or_else(|| cfg.default_template.clone());
    let template = cfg.templates.get(&template_name).cloned().ok_or_else(|| {
        ApiError::bad_request(format!(
            "unknown template {template_name:?}; available: {}",
            cfg.templates.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;

    let id = state.ids.next_id();
    let mut config = SessionConfig::new(template, cfg.params.clone(), backend);
    config.parser = cfg.parser.clone();
    config.ids = Arc::new(FixedId(id.clone()));
    if let Some(dir) = &cfg.transcript_dir {
        std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?;
        config.transcript_path = Some(dir.join(format!("{id}.jsonl")));
    }
    let session = blocking(move || start_session(config)).await??;
    state.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id.clone(), SharedSession::new(session));
    let body = json!({"session_id": id, "backend": backend_name, "template": template_name});
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct MessageBody {
    #[serde(default)]
    text: String,
}

async fn post_message(State(state): Shared, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id)?;
    let req: MessageBody = parse_body(&body)?;
    let (client, robot) = blocking(move || session.try_step(&req.text)).await??;
    Ok(Json(json!({"client_turn": client, "robot_turn": robot})))
}

async fn get_session(State(state): Shared, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = state.session(&id)?;
    let transcript = blocking(move || session.transcript()).await?;
    Ok(Json(serde_json::to_value(transcript).map_err(|e| ApiError::internal(e.to_string()))?))
}

#[derive(Debug, Deserialize)]
struct PairInput {
    id: Option<String>,
    client_message: String,
    human: UtteranceRecord,
    robot: Option<UtteranceRecord>,
}

#[derive(Debug, Default, Deserialize)]
struct GroundTruthBody {
    pair: Option<PairInput>,
}

async fn post_ground_truth(State(state): Shared, body: Bytes) -> Result<Response, ApiError> {
    let req: GroundTruthBody = parse_body(&body)?;
    let input = req.pair.ok_or_else(|| ApiError::bad_request("body must be {\"pair\": {...}}"))?;
    let record = PairRecord {
        id: input.id.unwrap_or_else(|| state.ids.next_id()),
        client_message: input.client_message,
        human: input.human,
        robot: input.robot,
    };
    let pair = record.into_pair().map_err(|m| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_pair", m))?;
    let stored = blocking(move || -> Result<GroundTruthPair, ApiError> {
        let _writer = state.dataset_writer.lock().unwrap_or_else(|p| p.into_inner());
        let path = &state.config.dataset_path;
        let existing = load_dataset_or_empty(path).map_err(dataset_error)?;
        if existing.iter().any(|p| p.id == pair.id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "duplicate_id",
                format!("pair {:?} already stored", pair.id),
            ));
        }
        append_pair(path, &pair).map_err(dataset_error)?;
        Ok(pair)
    })
    .await??;
    Ok((StatusCode::CREATED, Json(json!({"pair": PairRecord::from(&stored)}))).into_response())
}

async fn list_ground_truth(State(state): Shared) -> Result<Json<Value>, ApiError> {
    let pairs = blocking(move || state.snapshot()).await??;
    let records: Vec<PairRecord> = pairs.iter().map(PairRecord::from).collect();
    Ok(Json(json!({"count": records.len(), "pairs": records})))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignmentBody {
    dataset: Option<String>,
    pairs: Option<Vec<PairRecord>>,
}

async fn alignment_report(State(state): Shared, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: AlignmentBody = parse_body(&body)?;
    let pairs = match (req.dataset.as_deref(), req.pairs) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give either \"dataset\" or \"pairs\", not both")),
        (None | Some("server"), None) => blocking(move || state.snapshot()).await??,
        (Some(other), None) => return Err(ApiError::bad_request(format!("unknown dataset {other:?}; use \"server\""))),
        (None, Some(records)) => records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.into_pair().map_err(|m| {
                    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_pair", format!("pairs[{i}]: {m}"))
                })
            })
            .collect::<Result<_, _>>()?,
    };
    let records = build_records(&pairs).map_err(scoring_error)?;
    let report = aggregate(&records).map_err(scoring_error)?;
    let mut body = report_to_json(&report);
    body["records"] = serde_json::to_value(&records).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(body))
}

async fn frequency_report(
    State(state): Shared,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let raw =
        query.get("source").ok_or_else(|| ApiError::bad_request("query parameter source=robot|human is required"))?;
    let source = Source::from_key(raw)
        .ok_or_else(|| ApiError::bad_request(format!("source must be robot or human, got {raw:?}")))?;
    let pairs = blocking(move || state.snapshot()).await??;
    let assignments = side_assignments(&pairs, source);
    let dists = frequency(&assignments, source).map_err(scoring_error)?;
    Ok(Json(json!({"source": source.key(), "n": assignments.len(), "distributions": frequency_to_json(&dists)})))
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/taxonomy", get(taxonomy))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/ground-truth", get(list_ground_truth).post(post_ground_truth))
        .route("/api/reports/alignment", post(alignment_report))
        .route("/api/reports/frequency", get(frequency_report))
        .route("/api/{*rest}", any(api_not_found))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(api_not_found),
    };
    app.layer(TraceLayer::new_for_http())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
    tracing::info!("shutting down; waiting for in-flight requests");
}

/// Runs the service until SIGINT or SIGTERM. In-flight requests, and the
/// transcript writes they perform, finish before this returns.
pub fn run_serve(args: &ServeArgs) -> Result<(), CliError> {
    let config = ServiceConfig::from_args(args)?;
    let state = Arc::new(AppState::new(config));
    let runtime = tokio::runtime::Runtime::new().map_err(failure)?;
    runtime.block_on(async {
        let addr: SocketAddr = format!("{}:{}", args.host, args.port)
            .parse()
            .map_err(|e| CliError::Usage(format!("bad --host/--port: {e}")))?;
        let listener =
            tokio::net::TcpListener::bind(addr).await.map_err(|e| failure(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(failure)?;
        println!("listening on http://{local}");
        tracing::info!(%local, dataset = %args.dataset.display(), "serving");
        axum::serve(listener, router(Arc::clone(&state)))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(failure)
    })
}
