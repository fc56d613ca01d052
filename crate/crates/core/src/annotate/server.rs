//! JSON-over-HTTP front end for a [`LabelStore`].
//!
//! | method | path | body / query | reply |
//! |---|---|---|---|
//! | GET | `/api/items` | `status, target, annotator, page, per_page` | `{total, page, per_page, items: [{item, labels, conversation}]}` |
//! | GET | `/api/conversations/{id}` | | `{conversation, target, aliases, images, item}` |
//! | POST | `/api/items/{id}/labels` | `{annotator_id, label, role, image_relevant?}` | the updated item |
//! | POST | `/api/items/{id}/resolve` | `{annotator_id, role, label?}` | the updated item |
//! | GET | `/api/stats/agreement` | | `{stats, error}` |
//! | GET | `/api/stats/progress` | | counts per status and target |
//!
//! Images are served under `/images/`, and the UI bundle (when configured)
//! from `/`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use super::{AnnotateError, AnnotationStatus, AnnotatorRole, ItemQuery, ItemRecord, LabelStore};
use crate::conversation::{StanceLabel, Target};

#[derive(Clone)]
struct AppState {
    store: Arc<LabelStore>,
}

struct ApiError(AnnotateError);

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match &self.0 {
            AnnotateError::UnknownItem(_) => StatusCode::NOT_FOUND,
            AnnotateError::SeniorLabelOnUndisputed(..) | AnnotateError::Frozen(_) => StatusCode::CONFLICT,
            AnnotateError::NotSenior => StatusCode::FORBIDDEN,
            AnnotateError::EmptyAnnotator => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

fn bad_request(msg: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg }))).into_response()
}

/// Query strings may carry empty values (`?status=&target=`), which mean "any".
#[derive(Deserialize)]
struct RawQuery {
    status: Option<String>,
    target: Option<String>,
    annotator: Option<String>,
    page: Option<String>,
    per_page: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|s| !s.trim().is_empty())
}

impl RawQuery {
    fn into_query(self) -> Result<ItemQuery, String> {
        let status = match non_empty(self.status) {
            None => None,
            Some(s) => Some(
                serde_json::from_value::<AnnotationStatus>(Value::String(s.to_lowercase()))
                    .map_err(|_| format!("unknown status {s}"))?,
            ),
        };
        let num = |v: Option<String>, name: &str| -> Result<Option<usize>, String> {
            non_empty(v)
                .map(|s| s.parse::<usize>().map_err(|_| format!("{name} must be a number")))
                .transpose()
        };
        Ok(ItemQuery {
            status,
            target: non_empty(self.target),
            annotator: non_empty(self.annotator),
            page: num(self.page, "page")?,
            per_page: num(self.per_page, "per_page")?,
        })
    }
}

fn item_json(store: &LabelStore, r: &ItemRecord) -> Value {
    json!({
        "item": r.item,
        "labels": r.labels,
        "conversation": store.bundle().conversation(&r.item.conversation_id).map(|e| &e.conversation),
    })
}

async fn list_items(State(app): State<AppState>, Query(raw): Query<RawQuery>) -> Response {
    let q = match raw.into_query() {
        Ok(q) => q,
        Err(e) => return bad_request(e),
    };
    let (items, total) = app.store.query(&q);
    Json(json!({
        "total": total,
        "page": q.page.unwrap_or(1).max(1),
        "per_page": q.per_page.unwrap_or(50).clamp(1, 500),
        "items": items.iter().map(|r| item_json(&app.store, r)).collect::<Vec<_>>(),
    }))
    .into_response()
}

async fn get_conversation(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let entry = app
        .store
        .bundle()
        .conversation(&id)
        .ok_or_else(|| AnnotateError::UnknownItem(id.clone()))?;
    let conv = &entry.conversation;
    let images: Vec<Value> = conv
        .images()
        .into_iter()
        .map(|(key, r)| {
            json!({
                "key": key,
                "uri": r.uri,
                "url": format!("/images/{}", r.uri.trim_start_matches('/')),
                "missing": r.missing,
            })
        })
        .collect();
    Ok(Json(json!({
        "conversation": conv,
        "depth": entry.depth,
        "target": Target::from_id(conv.target_id()),
        "aliases": conv.author_aliases(),
        "images": images,
        "item": app.store.item(&id).map(|r| r.item),
    })))
}

#[derive(Deserialize)]
struct LabelBody {
    annotator_id: String,
    label: StanceLabel,
    #[serde(default)]
    role: AnnotatorRole,
    #[serde(default)]
    image_relevant: Option<bool>,
}

async fn post_label(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<LabelBody>,
) -> Result<Json<Value>, ApiError> {
    let item = app
        .store
        .submit_label_with(&id, &body.annotator_id, body.label, body.role, body.image_relevant)?;
    Ok(Json(json!(item)))
}

#[derive(Deserialize)]
struct ResolveBody {
    annotator_id: String,
    #[serde(default)]
    role: AnnotatorRole,
    #[serde(default)]
    label: Option<StanceLabel>,
}

async fn post_resolve(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<ResolveBody>,
) -> Result<Json<Value>, ApiError> {
    if body.role != AnnotatorRole::Senior {
        return Err(AnnotateError::NotSenior.into());
    }
    let item = match body.label {
        Some(label) => app.store.submit_label(&id, &body.annotator_id, label, AnnotatorRole::Senior)?,
        None => app.store.resolve(&id, &body.annotator_id, AnnotatorRole::Senior)?,
    };
    Ok(Json(json!(item)))
}

async fn agreement(State(app): State<AppState>) -> Json<Value> {
    match app.store.agreement() {
        Ok(stats) => Json(json!({ "stats": stats, "error": null })),
        Err(e) => Json(json!({ "stats": null, "error": e.to_string() })),
    }
}

async fn progress(State(app): State<AppState>) -> Json<Value> {
    Json(json!(app.store.progress()))
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    pub images_root: Option<PathBuf>,
    /// Directory with the built UI bundle.
    pub ui_dir: Option<PathBuf>,
}

pub fn router(store: Arc<LabelStore>, opts: &ServeOptions) -> Router {
    let mut app = Router::new()
        .route("/api/items", get(list_items))
        .route("/api/conversations/{id}", get(get_conversation))
        .route("/api/items/{id}/labels", post(post_label))
        .route("/api/items/{id}/resolve", post(post_resolve))
        .route("/api/stats/agreement", get(agreement))
        .route("/api/stats/progress", get(progress))
        .with_state(AppState { store });
    if let Some(root) = &opts.images_root {
        app = app.nest_service("/images", ServeDir::new(root));
    }
    if let Some(ui) = &opts.ui_dir {
        app = app.fallback_service(ServeDir::new(ui));
    }
    app
}

/// A server running on its own thread. Dropping the handle stops it and
/// compacts the store.
pub struct ServerHandle {
    addr: SocketAddr,
    store: Arc<LabelStore>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().map_err(|_| std::io::Error::other("server thread panicked"))??;
        }
        self.store.compact().map_err(std::io::Error::other)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves until the handle is
/// stopped or dropped.
pub fn spawn_server(store: Arc<LabelStore>, addr: SocketAddr, opts: &ServeOptions) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let app = router(store.clone(), opts);
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || -> std::io::Result<()> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr: bound,
        store,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves on the current thread until Ctrl-C, then compacts the store.
pub fn serve_until_interrupt(store: Arc<LabelStore>, addr: SocketAddr, opts: &ServeOptions) -> std::io::Result<()> {
    let app = router(store.clone(), opts);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    store.compact().map_err(std::io::Error::other)
}
