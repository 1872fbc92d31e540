use anyhow::Context;
use grace_server::config::Settings;
use grace_server::{serve_admin, serve_proxy, AppState, ProxyConfig};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cli = Settings::from_args(std::env::args()).unwrap_or_else(|e| e.exit());
    let config = ProxyConfig::from_cli_and_env(cli)?;
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&config.log_level).context("--log-level")?)
        .init();

    let registry = AppState::default_registry(&config)?;
    let state = AppState::new(config, registry)?;
    let proxy = TcpListener::bind(state.config.listen)
        .await
        .with_context(|| format!("binding {}", state.config.listen))?;
    let admin = TcpListener::bind(state.config.admin_listen)
        .await
        .with_context(|| format!("binding {}", state.config.admin_listen))?;
    tracing::info!(proxy = %state.config.listen, admin = %state.config.admin_listen, "listening");

    let (stop_tx, stop_rx) = watch::channel(false);
    let stopped = |mut rx: watch::Receiver<bool>| async move {
        let _ = rx.wait_for(|stop| *stop).await;
    };
    let admin_task = tokio::spawn(serve_admin(admin, state.clone(), stopped(stop_rx.clone())));
    let proxy_task = tokio::spawn(serve_proxy(proxy, state, stopped(stop_rx)));

    tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
    tracing::info!("shutting down");
    let _ = stop_tx.send(true);
    proxy_task.await?;
    admin_task.await??;
    Ok(())
}
