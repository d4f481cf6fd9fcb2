//! The EID reachability distribution service.
//!
//! One BP adapter and one BGP adapter feed a single task that owns the
//! RIB. Local registrations become Local routes exported to every DTN
//! capable peer; routes learned over BGP are installed into the agent FIB.

pub mod adapter;
pub mod config;

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::bgp::fsm::RETRY_INTERVAL;
use crate::bgp::{Outgoing, PeerId, SessionParams, SpeakerCommand, SpeakerConfig, SpeakerStats};
use crate::nlri::{ClaEndpoint, EidEntry, ReachabilityAnnouncement, ReachabilityWithdrawal};
use crate::rib::{export_for_peer, DumpRow, Rib, RibDelta, RibError, RouteSource};
use crate::EndpointId;

pub use adapter::{
    spawn_bp_adapter, start_bgp_adapter, translate_bp_event, Adapter, BgpAdapter, BgpEvent,
    BpEvent, ReachabilityEvent,
};
pub use config::{ConfigError, ErdsConfig};

#[derive(Debug, Error)]
pub enum ErdsError {
    #[error("unknown cla {0:?}")]
    UnknownCla(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot start BGP speaker: {0}")]
    Bind(#[from] io::Error),
}

/// What readers see of the RIB.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RibSnapshot {
    pub rows: Vec<DumpRow>,
    pub loops_detected: u64,
    /// Bumped on every mutation that changed a selected route.
    pub version: u64,
}

/// A running ERDS instance. Dropping the runtime it was started on stops it.
#[derive(Debug)]
pub struct ErdsHandle {
    pub rib: watch::Receiver<RibSnapshot>,
    pub stats: Arc<SpeakerStats>,
    pub bgp_addr: Option<SocketAddr>,
    pub commands: UnboundedSender<SpeakerCommand>,
    pub task: JoinHandle<()>,
}

/// Starts the speaker, the BP adapter and the core loop on the current
/// runtime.
pub async fn run(config: &ErdsConfig) -> Result<ErdsHandle, ErdsError> {
    config.validate()?;
    let clas_by_safi = config.clas_by_safi();
    let bgp = start_bgp_adapter(SpeakerConfig {
        asn: config.node.asn,
        bgp_id: config.node.bgp_id,
        hold_time: config.timers.hold,
        local_safis: clas_by_safi.keys().copied().collect(),
        extra_capabilities: Vec::new(),
        listen: config.node.listen,
        peers: config.peers.iter().map(|p| p.to_peer_config()).collect(),
        retry_interval: RETRY_INTERVAL,
    })
    .await?;
    let bp = spawn_bp_adapter(config.bp.listen, config.clas_by_name(), RETRY_INTERVAL);

    let (snapshot_tx, snapshot_rx) = watch::channel(RibSnapshot::default());
    let mut core = Core {
        rib: Rib::new(config.node.asn),
        clas: clas_by_safi,
        peers: BTreeMap::new(),
        fib: BTreeMap::new(),
        bp_send: bp.send.clone(),
        bgp_send: bgp.adapter.send.clone(),
        snapshot: snapshot_tx,
        dump_path: config.node.rib_dump_path.clone(),
    };
    core.publish(true);

    let commands = bgp.adapter.send.clone();
    let task = tokio::spawn(core.run(bp, bgp.adapter));
    Ok(ErdsHandle {
        rib: snapshot_rx,
        stats: bgp.stats,
        bgp_addr: bgp.local_addr,
        commands,
        task,
    })
}

struct Core {
    rib: Rib,
    clas: BTreeMap<u8, ClaEndpoint>,
    peers: BTreeMap<PeerId, SessionParams>,
    /// Next hops installed in the agent FIB.
    fib: BTreeMap<EndpointId, ClaEndpoint>,
    bp_send: UnboundedSender<ReachabilityEvent>,
    bgp_send: UnboundedSender<SpeakerCommand>,
    snapshot: watch::Sender<RibSnapshot>,
    dump_path: Option<PathBuf>,
}

impl Core {
    async fn run(
        mut self,
        mut bp: Adapter<ReachabilityEvent, ReachabilityEvent>,
        mut bgp: Adapter<BgpEvent, SpeakerCommand>,
    ) {
        // A node without peers has no BGP events; keep serving the BP side.
        let (mut bp_open, mut bgp_open) = (true, true);
        while bp_open || bgp_open {
            tokio::select! {
                event = bp.listen.recv(), if bp_open => match event {
                    Some(event) => self.on_local(event),
                    None => bp_open = false,
                },
                event = bgp.listen.recv(), if bgp_open => match event {
                    Some(event) => self.on_bgp(event),
                    None => bgp_open = false,
                },
            }
        }
        tracing::info!("ERDS core stopped");
    }

    fn on_local(&mut self, event: ReachabilityEvent) {
        let delta = match &event {
            ReachabilityEvent::Announce(a) => {
                match self.rib.apply_announcement(RouteSource::Local, a) {
                    Ok(delta) => delta,
                    Err(RibError::LoopDetected { delta, .. }) => delta,
                }
            }
            ReachabilityEvent::Withdraw(w) => self.rib.apply_withdrawal(&RouteSource::Local, w),
        };
        self.propagate(delta);
    }

    fn on_bgp(&mut self, event: BgpEvent) {
        match event {
            BgpEvent::PeerUp { peer, params } => {
                tracing::info!(%peer, safis = ?params.safis, dtn = params.dtn_capable, "session established");
                if params.dtn_capable {
                    let local = adapter::session_clas(&params, &self.clas);
                    let routes: Vec<_> = export_for_peer(&peer, &self.rib.full_delta(), &local)
                        .into_iter()
                        .filter(|o| matches!(o, Outgoing::Announce { .. }))
                        .collect();
                    if !routes.is_empty() {
                        let _ = self.bgp_send.send(SpeakerCommand::Advertise {
                            peer: peer.clone(),
                            routes,
                        });
                    }
                }
                self.peers.insert(peer, params);
            }
            BgpEvent::PeerDown { peer } => {
                self.peers.remove(&peer);
                let delta = self.rib.drop_peer(&peer);
                self.propagate(delta);
            }
            BgpEvent::Reachability {
                peer,
                as_path,
                event,
            } => {
                let Some(params) = self.peers.get(&peer) else {
                    tracing::debug!(%peer, "reachability from a peer that is not up");
                    return;
                };
                let source = RouteSource::peer(peer.clone(), params.remote_bgp_id, as_path);
                let delta = match &event {
                    ReachabilityEvent::Announce(a) => {
                        match self.rib.apply_announcement(source, a) {
                            Ok(delta) => delta,
                            Err(RibError::LoopDetected { asn, delta }) => {
                                tracing::debug!(%peer, asn, "looped announcement");
                                delta
                            }
                        }
                    }
                    ReachabilityEvent::Withdraw(w) => self.rib.apply_withdrawal(&source, w),
                };
                self.propagate(delta);
            }
        }
    }

    fn propagate(&mut self, delta: RibDelta) {
        if delta.is_empty() {
            self.publish(false);
            return;
        }
        for (peer, params) in &self.peers {
            if !params.dtn_capable {
                continue;
            }
            let local = adapter::session_clas(params, &self.clas);
            let routes = export_for_peer(peer, &delta, &local);
            if !routes.is_empty() {
                let _ = self.bgp_send.send(SpeakerCommand::Advertise {
                    peer: peer.clone(),
                    routes,
                });
            }
        }
        for event in self.fib_changes(&delta) {
            let _ = self.bp_send.send(event);
        }
        self.publish(true);
    }

    /// FIB commands for a delta: learned routes are installed, Local and
    /// removed ones uninstalled.
    fn fib_changes(&mut self, delta: &RibDelta) -> Vec<ReachabilityEvent> {
        let mut set: BTreeMap<ClaEndpoint, Vec<EidEntry>> = BTreeMap::new();
        let mut del: BTreeMap<u8, Vec<EndpointId>> = BTreeMap::new();
        for route in &delta.updated {
            if route.source == RouteSource::Local {
                if let Some(old) = self.fib.remove(&route.eid) {
                    del.entry(old.safi).or_default().push(route.eid.clone());
                }
            } else if self.fib.get(&route.eid) != Some(&route.next_hop) {
                self.fib.insert(route.eid.clone(), route.next_hop);
                set.entry(route.next_hop)
                    .or_default()
                    .push(EidEntry::new(route.eid.clone()));
            }
        }
        for eid in &delta.removed {
            if let Some(old) = self.fib.remove(eid) {
                del.entry(old.safi).or_default().push(eid.clone());
            }
        }
        let mut out: Vec<_> = del
            .into_iter()
            .map(|(safi, eids)| {
                ReachabilityEvent::Withdraw(ReachabilityWithdrawal::new(safi, eids))
            })
            .collect();
        out.extend(set.into_iter().map(|(nh, entries)| {
            ReachabilityEvent::Announce(ReachabilityAnnouncement::new(nh, entries))
        }));
        out
    }

    fn publish(&mut self, changed: bool) {
        let rows = self.rib.dump();
        let loops = self.rib.loops_detected();
        self.snapshot.send_modify(|s| {
            if changed {
                s.version += 1;
            }
            s.rows = rows.clone();
            s.loops_detected = loops;
        });
        if changed {
            if let Some(path) = &self.dump_path {
                if let Err(err) = write_dump(path, &rows) {
                    tracing::warn!(path = %path.display(), %err, "cannot write RIB dump");
                }
            }
        }
    }
}

/// Writes the dump as JSON, replacing the file atomically.
fn write_dump(path: &std::path::Path, rows: &[DumpRow]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(rows)?)?;
    std::fs::rename(tmp, path)
}

/// Reads a dump written by a running node.
pub fn read_dump(path: &std::path::Path) -> io::Result<Vec<DumpRow>> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
