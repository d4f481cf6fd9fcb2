//! One ERDS node plus its simulated BP agent, running on a dedicated
//! thread with its own runtime so that shutting it down releases every
//! socket it opened.

use std::fs::File;
use std::path::Path;
use std::sync::{mpsc as std_mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;
use tokio::sync::{mpsc::UnboundedSender, oneshot, watch};

use crate::agent::{serve_agent, AgentHandle, FibTable};
use crate::bgp::{PeerId, SessionState, SpeakerCommand, SpeakerStats};
use crate::erds::{self, ErdsConfig, ErdsError, RibSnapshot};
use crate::rib::{render_dump, DumpRow};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("node {node}: {source}")]
    Erds { node: String, source: ErdsError },
    #[error("node {node}: cannot start agent: {source}")]
    Agent {
        node: String,
        source: std::io::Error,
    },
    #[error("node {node}: {source}")]
    Io {
        node: String,
        source: std::io::Error,
    },
    #[error("node {0}: thread exited during startup")]
    Startup(String),
}

struct Started {
    agent: AgentHandle,
    rib: watch::Receiver<RibSnapshot>,
    stats: Arc<SpeakerStats>,
    commands: UnboundedSender<SpeakerCommand>,
}

pub struct NodeHandle {
    name: String,
    config: ErdsConfig,
    agent: AgentHandle,
    rib: watch::Receiver<RibSnapshot>,
    stats: Arc<SpeakerStats>,
    commands: UnboundedSender<SpeakerCommand>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for NodeHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeHandle")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl NodeHandle {
    /// Starts the node and blocks until its listeners are bound. Logs go
    /// to `log` when given.
    pub fn start(name: &str, config: ErdsConfig, log: Option<&Path>) -> Result<Self, NodeError> {
        config.validate().map_err(|e| NodeError::Erds {
            node: name.into(),
            source: e.into(),
        })?;
        let log_file = match log {
            Some(path) => Some(File::create(path).map_err(|source| NodeError::Io {
                node: name.into(),
                source,
            })?),
            None => None,
        };
        let (ready_tx, ready_rx) = std_mpsc::channel::<Result<Started, NodeError>>();
        let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
        let thread_name = name.to_string();
        let thread_config = config.clone();
        let thread = std::thread::Builder::new()
            .name(format!("node-{name}"))
            .spawn(move || {
                let _guard = log_file.map(|file| {
                    let subscriber = tracing_subscriber::fmt()
                        .with_writer(Mutex::new(file))
                        .with_ansi(false)
                        .with_max_level(tracing::Level::DEBUG)
                        .finish();
                    tracing::subscriber::set_default(subscriber)
                });
                let runtime = match tokio::runtime::Builder::new_current_thread()
                    .enable_all()
                    .build()
                {
                    Ok(rt) => rt,
                    Err(source) => {
                        let _ = ready_tx.send(Err(NodeError::Io {
                            node: thread_name,
                            source,
                        }));
                        return;
                    }
                };
                runtime.block_on(async move {
                    let started = start_node(&thread_name, &thread_config).await;
                    let ok = started.is_ok();
                    let _ = ready_tx.send(started);
                    if ok {
                        let _ = shutdown_rx.await;
                    }
                });
                runtime.shutdown_timeout(Duration::from_secs(1));
            })
            .map_err(|source| NodeError::Io {
                node: name.into(),
                source,
            })?;
        let started = ready_rx
            .recv()
            .map_err(|_| NodeError::Startup(name.into()))??;
        Ok(Self {
            name: name.into(),
            config,
            agent: started.agent,
            rib: started.rib,
            stats: started.stats,
            commands: started.commands,
            shutdown: Some(shutdown_tx),
            thread: Some(thread),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &ErdsConfig {
        &self.config
    }

    pub fn agent(&self) -> &AgentHandle {
        &self.agent
    }

    pub fn rib(&self) -> RibSnapshot {
        self.rib.borrow().clone()
    }

    pub fn rib_rows(&self) -> Vec<DumpRow> {
        self.rib.borrow().rows.clone()
    }

    pub fn rib_text(&self) -> String {
        render_dump(&self.rib_rows())
    }

    pub fn fib(&self) -> FibTable {
        self.agent.fib()
    }

    pub fn stats(&self) -> &SpeakerStats {
        &self.stats
    }

    pub fn peer_state(&self, peer: &PeerId) -> Option<SessionState> {
        self.stats.state(peer)
    }

    /// The configured peer whose ASN is `asn`.
    pub fn peer_for_asn(&self, asn: u16) -> Option<PeerId> {
        self.config
            .peers
            .iter()
            .find(|p| p.remote_asn == asn)
            .map(|p| p.id())
    }

    /// Administratively shuts the session down and keeps it down.
    pub fn kill_peer(&self, peer: &PeerId) {
        let _ = self
            .commands
            .send(SpeakerCommand::Disable { peer: peer.clone() });
    }

    pub fn revive_peer(&self, peer: &PeerId) {
        let _ = self
            .commands
            .send(SpeakerCommand::Enable { peer: peer.clone() });
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

async fn start_node(name: &str, config: &ErdsConfig) -> Result<Started, NodeError> {
    let agent = serve_agent(config.bp.listen, config.clas_by_name())
        .await
        .map_err(|source| NodeError::Agent {
            node: name.into(),
            source,
        })?;
    let erds = erds::run(config).await.map_err(|source| NodeError::Erds {
        node: name.into(),
        source,
    })?;
    tracing::info!(node = name, asn = config.node.asn, "node started");
    Ok(Started {
        agent,
        rib: erds.rib,
        stats: erds.stats,
        commands: erds.commands,
    })
}
