//! The grace forward proxy and its admin API.

pub mod admin;
pub mod config;
pub mod proxy;
pub mod state;
pub mod upstream;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use tokio::net::TcpListener;
use tokio::task::{JoinHandle, JoinSet};

pub use config::ProxyConfig;
pub use state::AppState;

/// Accepts proxy connections on `listener` until `shutdown` resolves.
/// Connections still open at that point are dropped.
pub async fn serve_proxy(listener: TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()>) {
    let mut connections = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        let stream = tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => stream,
                Err(e) => {
                    tracing::warn!("accept failed: {e}");
                    continue;
                }
            },
        };
        let state = state.clone();
        connections.spawn(async move {
            let service = service_fn(move |req| {
                let state = state.clone();
                async move { Ok::<_, std::convert::Infallible>(proxy::handle(state, req).await) }
            });
            if let Err(e) = http1::Builder::new()
                .serve_connection(TokioIo::new(stream), service)
                .await
            {
                tracing::debug!("connection ended: {e}");
            }
        });
        while connections.try_join_next().is_some() {}
    }
}

pub async fn serve_admin(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, admin::router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Both listeners running in the background; stopped when dropped.
pub struct Running {
    pub proxy_addr: SocketAddr,
    pub admin_addr: SocketAddr,
    pub state: Arc<AppState>,
    tasks: Vec<JoinHandle<()>>,
}

impl Running {
    /// Binds `config.listen` and `config.admin_listen` (port 0 picks a free
    /// port) and starts serving.
    pub async fn start(state: Arc<AppState>) -> std::io::Result<Running> {
        let proxy = TcpListener::bind(state.config.listen).await?;
        let admin = TcpListener::bind(state.config.admin_listen).await?;
        let proxy_addr = proxy.local_addr()?;
        let admin_addr = admin.local_addr()?;
        let tasks = vec![
            tokio::spawn(serve_proxy(proxy, state.clone(), std::future::pending())),
            tokio::spawn({
                let state = state.clone();
                async move {
                    if let Err(e) = serve_admin(admin, state, std::future::pending()).await {
                        tracing::error!("admin listener failed: {e}");
                    }
                }
            }),
        ];
        Ok(Running {
            proxy_addr,
            admin_addr,
            state,
            tasks,
        })
    }

    pub fn proxy_url(&self) -> String {
        format!("http://{}", self.proxy_addr)
    }

    pub fn admin_url(&self) -> String {
        format!("http://{}", self.admin_addr)
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}
