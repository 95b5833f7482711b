//! HTTP front for the mock annotators, one endpoint per role under `/v1/<role>`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;

use super::mock::MockRegistry;
use super::wire::{AnnotatorRequest, AnnotatorResponse, Role};

#[derive(Clone)]
struct MockState {
    registry: Arc<MockRegistry>,
    seed: u64,
}

pub fn mock_router(registry: Arc<MockRegistry>, seed: u64) -> Router {
    Router::new()
        .route("/v1/{role}", post(handle))
        .with_state(MockState { registry, seed })
}

async fn handle(
    State(st): State<MockState>,
    Path(role): Path<String>,
    Json(req): Json<AnnotatorRequest>,
) -> (StatusCode, Json<AnnotatorResponse>) {
    let mut resp = AnnotatorResponse::for_request(&req);
    let Some(role) = Role::parse(&role) else {
        resp.error = Some(format!("unknown role {role}"));
        return (StatusCode::NOT_FOUND, Json(resp));
    };
    if role != req.role {
        resp.error = Some(format!("request role {} posted to {}", req.role, role.path()));
        return (StatusCode::BAD_REQUEST, Json(resp));
    }
    let endpoint = format!("mock://{}?seed={}", role.name(), st.seed);
    match st.registry.resolve(&endpoint) {
        Some(mock) => (StatusCode::OK, Json(mock.handle(&req))),
        None => {
            resp.error = Some(format!("no mock for {endpoint}"));
            (StatusCode::INTERNAL_SERVER_ERROR, Json(resp))
        }
    }
}

/// An axum router served from a background thread until dropped.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

/// Starts the mock annotator service on `addr`; port 0 picks a free port.
pub struct MockServer;

impl MockServer {
    pub fn start(addr: &str, registry: Arc<MockRegistry>, seed: u64) -> std::io::Result<BackgroundServer> {
        BackgroundServer::start(addr, mock_router(registry, seed))
    }
}

impl BackgroundServer {
    pub fn start(addr: &str, app: Router) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves the mock router on `listener` until the future is dropped.
pub async fn serve_mocks(listener: TcpListener, registry: Arc<MockRegistry>, seed: u64) -> std::io::Result<()> {
    axum::serve(listener, mock_router(registry, seed)).await
}
