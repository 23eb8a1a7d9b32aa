use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cues_cli::service::{router, AppState, ServiceConfig};
use cues_core::backend::{
    BackendConfig, CompletionBackend, CompletionRequest, CompletionResult, HttpBackend, ScriptedBackend,
};
use cues_core::session::SequentialIds;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const CLIENT: &str = "I am too nervous for the upcoming internship interview";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn scripted() -> Arc<dyn CompletionBackend> {
    Arc::new(ScriptedBackend::from_file(&fixtures().join("scripted_fixture.jsonl")).unwrap())
}

struct Harness {
    app: Router,
    dataset: PathBuf,
    _dir: tempfile::TempDir,
}

fn harness_with(configure: impl FnOnce(&mut ServiceConfig, &Path)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data/ground_truth.jsonl");
    let mut config = ServiceConfig::new("scripted", scripted(), dataset.clone());
    configure(&mut config, dir.path());
    let state = Arc::new(AppState::with_ids(config, Arc::new(SequentialIds::new("id"))));
    Harness { app: router(state), dataset, _dir: dir }
}

fn harness() -> Harness {
    harness_with(|_, _| {})
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body.map(|b| b.to_string())).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).expect("JSON response") };
    (status, value)
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let response = app.clone().oneshot(req).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or_else(|| panic!("not an error body: {v}"))
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/api/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn taxonomy_document() {
    let h = harness();
    let (status, body) = call(&h.app, "GET", "/api/taxonomy", None).await;
    assert_eq!(status, StatusCode::OK);
    let sizes: Vec<usize> =
        ["speech", "action", "face", "emotion"].iter().map(|k| body[k].as_array().unwrap().len()).collect();
    assert_eq!(sizes, [7, 7, 10, 10]);
    assert_eq!(body["speech"][0], json!({"id": 1, "label": "High and fast speech"}));
    assert_eq!(body["face"][3]["label"], "No expression");
    assert_eq!(body["action"][6]["label"], "Eye Contact");
}

#[tokio::test]
async fn session_message_round_trip() {
    let h = harness();
    let id = new_session(&h.app).await;
    assert_eq!(id, "id-1");
    let (status, body) =
        call(&h.app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": CLIENT}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["client_turn"]["text"], CLIENT);
    let robot = &body["robot_turn"];
    assert_eq!(robot["cues"], json!({"speech": 6, "action": 7, "face": 8, "emotion": 6}));
    assert_eq!(robot["diagnostics"][0]["code"], "label_id_conflict");

    let (status, t) = call(&h.app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(t["session_id"], "id-1");
    assert_eq!(t["turns"].as_array().unwrap().len(), 2);
    assert_eq!(t["params"]["temperature"], 0.9);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let h = harness();
    let (status, body) = call(&h.app, "POST", "/api/sessions/nope/messages", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");
    let (status, _) = call(&h.app, "GET", "/api/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_requests() {
    let h = harness();
    let id = new_session(&h.app).await;
    let uri = format!("/api/sessions/{id}/messages");
    let (status, body) = call(&h.app, "POST", &uri, Some(json!({"text": "  "}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "empty_message"));

    let (status, bytes) = call_raw(&h.app, "POST", &uri, Some("{not json".into())).await;
    let body: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "bad_request"));

    let (status, body) = call(&h.app, "POST", "/api/sessions", Some(json!({"backend": "gpt"}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "bad_request"));
    let (status, _) = call(&h.app, "POST", "/api/sessions", Some(json!({"template": "missing"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&h.app, "POST", "/api/sessions", Some(json!({"api_key": "sk-x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "credentials are never accepted over the API");

    let (status, body) = call(&h.app, "GET", "/api/does-not-exist", None).await;
    assert_eq!((status, error_code(&body)), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn backend_failures_are_502() {
    let h = harness_with(|c, _| {
        let config = BackendConfig { base_url: "http://127.0.0.1:9".into(), ..BackendConfig::default() };
        let http: Arc<dyn CompletionBackend> = Arc::new(HttpBackend::with_api_key(config, None).unwrap());
        c.backends.insert("http".into(), http);
    });
    let (status, body) = call(&h.app, "POST", "/api/sessions", Some(json!({"backend": "http"}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_GATEWAY, "backend_unavailable"));
    assert!(body["error"]["message"].as_str().unwrap().contains("LLM_API_KEY"));

    let id = new_session(&h.app).await;
    let (status, body) =
        call(&h.app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": "unscripted"}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_GATEWAY, "backend_unavailable"));
    let (_, t) = call(&h.app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert!(t["turns"].as_array().unwrap().is_empty());
}

/// Blocks inside `complete` until released, so a second request can race it.
struct Gate {
    entered: Mutex<mpsc::Sender<()>>,
    release: Mutex<mpsc::Receiver<()>>,
    inner: Arc<dyn CompletionBackend>,
}

impl CompletionBackend for Gate {
    fn name(&self) -> &str {
        "gate"
    }
    fn complete(&self, request: &CompletionRequest) -> CompletionResult {
        self.entered.lock().unwrap().send(()).unwrap();
        self.release.lock().unwrap().recv().unwrap();
        self.inner.complete(request)
    }
    fn health_check(&self) -> CompletionResult {
        CompletionResult::ok("")
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_message_is_409() {
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel();
    let gate = Gate { entered: Mutex::new(entered_tx), release: Mutex::new(release_rx), inner: scripted() };
    let h = harness_with(|c, _| {
        c.backends.insert("gate".into(), Arc::new(gate));
        c.default_backend = "gate".into();
    });
    let id = new_session(&h.app).await;
    let uri = format!("/api/sessions/{id}/messages");
    let first = {
        let app = h.app.clone();
        let uri = uri.clone();
        tokio::spawn(async move { call(&app, "POST", &uri, Some(json!({"text": CLIENT}))).await })
    };
    tokio::task::spawn_blocking(move || entered_rx.recv().unwrap()).await.unwrap();
    let (status, body) = call(&h.app, "POST", &uri, Some(json!({"text": "me too"}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::CONFLICT, "busy"));
    release_tx.send(()).unwrap();
    let (status, body) = first.await.unwrap();
    assert_eq!(status, StatusCode::OK, "{body}");
}

#[tokio::test]
async fn transcripts_are_written_when_configured() {
    let h = harness_with(|c, dir| c.transcript_dir = Some(dir.join("sessions")));
    let id = new_session(&h.app).await;
    call(&h.app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": CLIENT}))).await;
    let path = h.dataset.parent().unwrap().parent().unwrap().join("sessions").join(format!("{id}.jsonl"));
    let t = cues_core::session::load_transcript(&path).unwrap();
    assert_eq!(t.turns.len(), 2);
}

fn worked_pair(id: Option<&str>) -> Value {
    let mut pair = json!({
        "client_message": CLIENT,
        "human": {"text": "Don't worry! Shall we come up with a specific plan to prepare for the interview?",
                  "speech": 1, "action": 7, "face": 1, "emotion": 6},
        "robot": {"text": "You must be feeling anxious.", "speech": 6, "action": 7, "face": 8, "emotion": 6}
    });
    if let Some(id) = id {
        pair["id"] = json!(id);
    }
    pair
}

#[tokio::test]
async fn ground_truth_append_and_list() {
    let h = harness();
    let (status, body) = call(&h.app, "POST", "/api/ground-truth", Some(json!({"pair": worked_pair(None)}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["pair"]["id"], "id-1");
    let (status, _) = call(&h.app, "POST", "/api/ground-truth", Some(json!({"pair": worked_pair(Some("mine"))}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, body) =
        call(&h.app, "POST", "/api/ground-truth", Some(json!({"pair": worked_pair(Some("mine"))}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::CONFLICT, "duplicate_id"));

    let mut bad = worked_pair(None);
    bad["human"]["face"] = json!(11);
    let (status, body) = call(&h.app, "POST", "/api/ground-truth", Some(json!({"pair": bad}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_pair"));
    let (status, _) = call(&h.app, "POST", "/api/ground-truth", Some(json!({"nope": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let on_disk = cues_core::dataset::load_dataset(&h.dataset).unwrap();
    assert_eq!(on_disk.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["id-1", "mine"]);
    let (status, body) = call(&h.app, "GET", "/api/ground-truth", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["count"], 2);
    assert_eq!(body["pairs"][1]["human"]["speech"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_appends_do_not_interleave() {
    let h = harness();
    let tasks: Vec<_> = (0..24)
        .map(|i| {
            let app = h.app.clone();
            tokio::spawn(async move {
                call(&app, "POST", "/api/ground-truth", Some(json!({"pair": worked_pair(Some(&format!("c{i}")))})))
                    .await
            })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap().0, StatusCode::CREATED);
    }
    assert_eq!(cues_core::dataset::load_dataset(&h.dataset).unwrap().len(), 24);
}

#[tokio::test]
async fn alignment_report_from_server_dataset() {
    let h = harness();
    std::fs::create_dir_all(h.dataset.parent().unwrap()).unwrap();
    std::fs::copy(fixtures().join("acceptance_pairs.jsonl"), &h.dataset).unwrap();
    let (status, body) = call(&h.app, "POST", "/api/reports/alignment", Some(json!({"dataset": "server"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["n"], 100);
    assert_eq!(body["total"]["rendered"]["accuracy"], "24.75%");
    let means: Vec<&str> = (0..4).map(|i| body["categories"][i]["rendered"]["mean"].as_str().unwrap()).collect();
    assert_eq!(means, ["0.26", "0.10", "0.31", "0.32"]);
    assert_eq!(body["records"].as_array().unwrap().len(), 100);

    let (_, empty_body) = call(&h.app, "POST", "/api/reports/alignment", None).await;
    assert_eq!(empty_body["n"], 100, "empty body selects the server dataset");
}

#[tokio::test]
async fn alignment_report_inline_and_errors() {
    let h = harness();
    let (status, body) =
        call(&h.app, "POST", "/api/reports/alignment", Some(json!({"pairs": [worked_pair(Some("t2"))]}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["records"][0], json!({"pair_id": "t2", "speech": 0, "action": 1, "face": 0, "emotion": 1}));
    assert_eq!(body["total"]["rendered"]["accuracy"], "50.00%");

    let (status, body) = call(&h.app, "POST", "/api/reports/alignment", Some(json!({}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::UNPROCESSABLE_ENTITY, "empty_input"));

    let mut no_robot = worked_pair(Some("solo"));
    no_robot.as_object_mut().unwrap().remove("robot");
    let (status, body) = call(&h.app, "POST", "/api/reports/alignment", Some(json!({"pairs": [no_robot]}))).await;
    assert_eq!((status, error_code(&body)), (StatusCode::UNPROCESSABLE_ENTITY, "missing_robot_response"));
    assert!(body["error"]["message"].as_str().unwrap().contains("solo"));

    let (status, _) = call(&h.app, "POST", "/api/reports/alignment", Some(json!({"dataset": "other"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn frequency_report() {
    let h = harness();
    std::fs::create_dir_all(h.dataset.parent().unwrap()).unwrap();
    std::fs::copy(fixtures().join("acceptance_pairs.jsonl"), &h.dataset).unwrap();
    let (status, body) = call(&h.app, "GET", "/api/reports/frequency?source=robot", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["source"], "robot");
    let action = &body["distributions"][1];
    assert_eq!(action["category"], "action");
    assert_eq!(action["options"][4]["percent"], "76.00%");
    let (_, body) = call(&h.app, "GET", "/api/reports/frequency?source=human", None).await;
    assert_eq!(body["distributions"][3]["options"][6]["percent"], "41.00%");

    let (status, _) = call(&h.app, "GET", "/api/reports/frequency", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&h.app, "GET", "/api/reports/frequency?source=both", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn static_console_is_served() {
    let h = harness_with(|c, dir| {
        let web = dir.join("web");
        std::fs::create_dir_all(&web).unwrap();
        std::fs::write(web.join("index.html"), "<!doctype html><title>console</title>").unwrap();
        c.static_dir = Some(web);
    });
    let (status, bytes) = call_raw(&h.app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(bytes).unwrap().contains("console"));
    let (status, _) = call(&h.app, "GET", "/api/taxonomy", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&h.app, "GET", "/api/missing", None).await;
    assert_eq!((status, error_code(&body)), (StatusCode::NOT_FOUND, "not_found"));
}
