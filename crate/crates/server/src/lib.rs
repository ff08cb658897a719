//! HTTP services of the llng SSO gateway: the portal (login, CAS, OIDC),
//! the protecting reverse proxy and the manager API. All three share one
//! [`App`] and can run in one process on separate listeners.

pub mod gateway;
pub mod manager;
pub mod portal;
pub mod state;
mod web;

use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use axum::Router;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use state::{open_accounting, open_sessions, open_users, App, AppBuilder, BuildError, SharedApp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Service {
    Portal,
    Gateway,
    Manager,
}

impl Service {
    pub const ALL: [Service; 3] = [Service::Portal, Service::Gateway, Service::Manager];

    pub fn name(self) -> &'static str {
        match self {
            Service::Portal => "portal",
            Service::Gateway => "gateway",
            Service::Manager => "manager",
        }
    }

    pub fn default_listen(self) -> &'static str {
        match self {
            Service::Portal => "127.0.0.1:8080",
            Service::Gateway => "127.0.0.1:8000",
            Service::Manager => "127.0.0.1:8090",
        }
    }

    pub fn router(self, app: SharedApp) -> Router {
        match self {
            Service::Portal => portal::router(app),
            Service::Gateway => gateway::router(app),
            Service::Manager => manager::router(app),
        }
    }
}

/// Serves `router` until the listener fails. Client addresses are made
/// available to handlers.
pub async fn run(listener: TcpListener, router: Router) -> io::Result<()> {
    axum::serve(listener, router.into_make_service_with_connect_info::<SocketAddr>()).await
}

/// Binds `addr` and serves `service` in the background.
pub async fn spawn(app: SharedApp, service: Service, addr: &str) -> io::Result<(SocketAddr, JoinHandle<io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let router = service.router(app);
    Ok((local, tokio::spawn(run(listener, router))))
}

/// Periodically drops expired sessions and cache entries.
pub fn spawn_housekeeping(app: SharedApp, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            app.cache.purge_expired();
            match app.sessions.sweep() {
                Ok(0) => {}
                Ok(n) => tracing::debug!(purged = n, "expired sessions removed"),
                Err(e) => tracing::warn!(error = %e, "session sweep failed"),
            }
        }
    })
}
