//! In-process stub of the generation and embedding services, for tests and
//! offline dry runs.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::{GenerateBody, GenerateReply};
use crate::embed_index::{EmbedRequest, EmbedResponse, HashingEmbedder, TextEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StubMode {
    /// Replies with the last whitespace-separated token of the prompt.
    Echo,
    Fixed(String),
    /// 200 with a body that is not JSON.
    Malformed,
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub mode: StubMode,
    /// The first N `/generate` requests get a 503.
    pub fail_first: usize,
    pub delay: Duration,
    pub embed_dim: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            mode: StubMode::Fixed("yes".into()),
            fail_first: 0,
            delay: Duration::ZERO,
            embed_dim: 64,
        }
    }
}

struct StubState {
    cfg: StubConfig,
    embedder: HashingEmbedder,
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

struct InFlight<'a>(&'a StubState);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn generate(State(st): State<Arc<StubState>>, Json(body): Json<GenerateBody>) -> Response {
    let n = st.requests.fetch_add(1, Ordering::SeqCst);
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    let _guard = InFlight(&st);
    st.peak.fetch_max(now, Ordering::SeqCst);
    if !st.cfg.delay.is_zero() {
        tokio::time::sleep(st.cfg.delay).await;
    }
    if n < st.cfg.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, "warming up").into_response();
    }
    let text = match &st.cfg.mode {
        StubMode::Echo => body.prompt.split_whitespace().last().unwrap_or("").to_string(),
        StubMode::Fixed(s) => s.clone(),
        StubMode::Malformed => return (StatusCode::OK, "<html>not json</html>").into_response(),
    };
    Json(GenerateReply { text }).into_response()
}

async fn embed(State(st): State<Arc<StubState>>, Json(req): Json<EmbedRequest>) -> Response {
    let vectors = match (req.texts, req.image_refs) {
        (Some(t), None) => st.embedder.embed_texts(&t),
        (None, Some(i)) => st.embedder.embed_images(&i),
        _ => return (StatusCode::BAD_REQUEST, "need exactly one of texts, image_refs").into_response(),
    };
    match vectors {
        Ok(vectors) => Json(EmbedResponse { vectors }).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn router(state: Arc<StubState>) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/embed", post(embed))
        .with_state(state)
}

/// A stub server running on a background thread; stops on drop.
pub struct StubServer {
    addr: SocketAddr,
    state: Arc<StubState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

fn bind(addr: &str) -> Result<std::net::TcpListener> {
    let l = std::net::TcpListener::bind(addr)
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    l.set_nonblocking(true)
        .map_err(|e| Error::Config(format!("cannot configure {addr}: {e}")))?;
    Ok(l)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("tokio runtime: {e}")))
}

fn new_state(cfg: StubConfig) -> Arc<StubState> {
    Arc::new(StubState {
        embedder: HashingEmbedder::new(cfg.embed_dim),
        cfg,
        requests: AtomicUsize::new(0),
        in_flight: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    })
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn spawn(addr: &str, cfg: StubConfig) -> Result<Self> {
        let listener = bind(addr)?;
        let local = listener
            .local_addr()
            .map_err(|e| Error::Config(e.to_string()))?;
        let state = new_state(cfg);
        let rt = runtime()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr: local,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves in the foreground until the process is killed.
pub fn serve_blocking(addr: &str, cfg: StubConfig) -> Result<()> {
    let listener = bind(addr)?;
    let app = router(new_state(cfg));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)
            .map_err(|e| Error::Config(e.to_string()))?;
        axum::serve(listener, app)
            .await
            .map_err(|e| Error::Config(format!("stub server: {e}")))
    })
}
