//! HTTP server exposing [`StubGateway`](super::StubGateway) behavior over the
//! wire protocol, for integration tests and offline runs.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::stub::{stub_chat, stub_embedding, stub_rerank_scores, ScenarioTable};
use super::wire::{
    ChatChoice, ChatCompletionRequest, ChatCompletionResponse, EmbeddingDatum, EmbeddingsRequest,
    EmbeddingsResponse, RerankResult, RerankWireRequest, RerankWireResponse, ServerStats,
    CHAT_PATH, EMBEDDINGS_PATH, RERANK_PATH, STATS_PATH,
};
use super::{ChatMessage, ChatRequest, RerankRequest, TemplateId};

#[derive(Debug, Clone, Default)]
pub struct StubServerConfig {
    pub seed: u64,
    pub scenarios: ScenarioTable,
    /// Artificial latency per request; makes concurrency observable.
    pub delay_ms: u64,
    /// The first `fail_first` model requests answer 503.
    pub fail_first: u32,
}

struct ServerState {
    cfg: StubServerConfig,
    stats: Mutex<ServerStats>,
    failures_left: AtomicU32,
}

struct InFlight<'a>(&'a ServerState);

impl<'a> InFlight<'a> {
    fn enter(state: &'a ServerState, headers: &HeaderMap) -> Self {
        let mut s = state.stats.lock().expect("stats poisoned");
        s.requests += 1;
        s.in_flight += 1;
        s.max_in_flight = s.max_in_flight.max(s.in_flight);
        s.last_authorization = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        InFlight(state)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.stats.lock().expect("stats poisoned").in_flight -= 1;
    }
}

impl ServerState {
    async fn gate(&self) -> Option<Response> {
        if self.cfg.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.cfg.delay_ms)).await;
        }
        let injected = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        injected.then(|| (StatusCode::SERVICE_UNAVAILABLE, "injected failure").into_response())
    }
}

async fn chat(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    Json(req): Json<ChatCompletionRequest>,
) -> Response {
    let _guard = InFlight::enter(&state, &headers);
    if let Some(resp) = state.gate().await {
        return resp;
    }
    let template_id = match req.template_id.as_deref().map(str::parse::<TemplateId>) {
        Some(Ok(t)) => Some(t),
        Some(Err(e)) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
        None => None,
    };
    let request = ChatRequest {
        template_id,
        messages: req.messages,
        images: req.images,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
    };
    let content = stub_chat(state.cfg.seed, &state.cfg.scenarios, &request);
    Json(ChatCompletionResponse {
        choices: vec![ChatChoice {
            index: 0,
            message: ChatMessage {
                role: "assistant".into(),
                content,
            },
        }],
    })
    .into_response()
}

async fn embeddings(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    Json(req): Json<EmbeddingsRequest>,
) -> Response {
    let _guard = InFlight::enter(&state, &headers);
    if let Some(resp) = state.gate().await {
        return resp;
    }
    if req.dimensions == 0 {
        return (StatusCode::BAD_REQUEST, "dimensions must be >= 1").into_response();
    }
    let data = req
        .input
        .iter()
        .enumerate()
        .map(|(index, input)| EmbeddingDatum {
            index,
            embedding: stub_embedding(state.cfg.seed, req.modality, input, req.dimensions)
                .into_values(),
        })
        .collect();
    Json(EmbeddingsResponse { data }).into_response()
}

async fn rerank(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    Json(req): Json<RerankWireRequest>,
) -> Response {
    let _guard = InFlight::enter(&state, &headers);
    if let Some(resp) = state.gate().await {
        return resp;
    }
    let scores = stub_rerank_scores(
        state.cfg.seed,
        &RerankRequest {
            query: req.query,
            image_ref: req.image_ref,
            passages: req.documents,
        },
    );
    let results = scores
        .into_iter()
        .enumerate()
        .map(|(index, relevance_score)| RerankResult {
            index,
            relevance_score,
        })
        .collect();
    Json(RerankWireResponse { results }).into_response()
}

async fn stats(State(state): State<Arc<ServerState>>) -> Json<ServerStats> {
    Json(state.stats.lock().expect("stats poisoned").clone())
}

fn router(cfg: StubServerConfig) -> Router {
    let state = Arc::new(ServerState {
        failures_left: AtomicU32::new(cfg.fail_first),
        cfg,
        stats: Mutex::new(ServerStats::default()),
    });
    Router::new()
        .route(CHAT_PATH, post(chat))
        .route(EMBEDDINGS_PATH, post(embeddings))
        .route(RERANK_PATH, post(rerank))
        .route(STATS_PATH, get(stats))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

/// A stub server running on a background thread; stops on drop.
pub struct StubServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl StubServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn_stub_server(
    addr: SocketAddr,
    cfg: StubServerConfig,
) -> std::io::Result<StubServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let rt = runtime()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener =
                tokio::net::TcpListener::from_std(listener).expect("listener handoff to tokio");
            let _ = axum::serve(listener, router(cfg))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(StubServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until the process is terminated.
pub fn run_stub_server(
    addr: SocketAddr,
    cfg: StubServerConfig,
    on_ready: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    on_ready(listener.local_addr()?);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, router(cfg)).await
    })
}
