//! Drives [`Session`]s over TCP: one task per configured peer plus a
//! listener that hands inbound connections to the matching peer task.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::chunk::{chunk_updates, chunk_withdrawals};
use super::fsm::{
    Action, DownReason, PeerMode, Session, SessionConfig, SessionParams, SessionState,
};
use super::message::{
    frame_message, notify, parse_header, parse_message, Message, MessageError, Multiprotocol,
    Notification, Open, Update, HEADER_LEN,
};
use super::PeerId;
use crate::nlri::{ClaEndpoint, EidEntry};
use crate::EndpointId;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);
const OPEN_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct PeerConfig {
    pub id: PeerId,
    pub addr: SocketAddr,
    pub remote_asn: u16,
    pub mode: PeerMode,
}

#[derive(Debug, Clone)]
pub struct SpeakerConfig {
    pub asn: u16,
    pub bgp_id: Ipv4Addr,
    pub hold_time: u16,
    pub local_safis: BTreeSet<u8>,
    pub extra_capabilities: Vec<Multiprotocol>,
    pub listen: Option<SocketAddr>,
    pub peers: Vec<PeerConfig>,
    pub retry_interval: Duration,
}

/// Something the speaker learned from a peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpeakerEvent {
    PeerUp { peer: PeerId, params: SessionParams },
    PeerDown { peer: PeerId, reason: DownReason },
    Update { peer: PeerId, update: Update },
}

/// Reachability to advertise; the speaker prepends its own ASN and splits
/// into UPDATEs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outgoing {
    Announce {
        as_path: Vec<u16>,
        next_hop: ClaEndpoint,
        entries: Vec<EidEntry>,
    },
    Withdraw {
        safi: u8,
        eids: Vec<EndpointId>,
    },
}

#[derive(Debug, Clone)]
pub enum SpeakerCommand {
    Advertise {
        peer: PeerId,
        routes: Vec<Outgoing>,
    },
    /// Administratively stop the session; no reconnects until enabled.
    Disable {
        peer: PeerId,
    },
    Enable {
        peer: PeerId,
    },
}

/// Counters and session states readable while the speaker runs.
#[derive(Debug, Default)]
pub struct SpeakerStats {
    pub updates_sent: AtomicU64,
    pub updates_received: AtomicU64,
    pub max_update_len: AtomicU64,
    states: Mutex<BTreeMap<PeerId, SessionState>>,
}

impl SpeakerStats {
    pub fn state(&self, peer: &PeerId) -> Option<SessionState> {
        self.states.lock().unwrap().get(peer).copied()
    }

    pub fn states(&self) -> BTreeMap<PeerId, SessionState> {
        self.states.lock().unwrap().clone()
    }

    fn set_state(&self, peer: &PeerId, state: SessionState) {
        self.states.lock().unwrap().insert(peer.clone(), state);
    }
}

pub struct Speaker {
    pub commands: UnboundedSender<SpeakerCommand>,
    pub stats: Arc<SpeakerStats>,
    pub local_addr: Option<SocketAddr>,
}

impl Speaker {
    /// Binds the listener and spawns the peer tasks on the current runtime.
    pub async fn start(
        config: SpeakerConfig,
        events: UnboundedSender<SpeakerEvent>,
    ) -> io::Result<Speaker> {
        let stats = Arc::new(SpeakerStats::default());
        let mut inbound = BTreeMap::new();
        let mut peer_cmds = BTreeMap::new();
        for peer in &config.peers {
            let (in_tx, in_rx) = mpsc::unbounded_channel();
            let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
            inbound.insert(peer.id.clone(), (peer.clone(), in_tx));
            peer_cmds.insert(peer.id.clone(), cmd_tx);
            let session = Session::new(SessionConfig {
                local_asn: config.asn,
                bgp_id: config.bgp_id,
                hold_time: config.hold_time,
                local_safis: config.local_safis.clone(),
                extra_capabilities: config.extra_capabilities.clone(),
                remote_asn: Some(peer.remote_asn),
                mode: peer.mode,
                retry_interval: config.retry_interval,
            });
            stats.set_state(&peer.id, SessionState::Idle);
            let task = PeerTask::new(peer.clone(), session, events.clone(), stats.clone());
            tokio::spawn(task.run(cmd_rx, in_rx));
        }

        let local_addr = match config.listen {
            Some(addr) => {
                let listener = TcpListener::bind(addr).await?;
                let local = listener.local_addr()?;
                tokio::spawn(accept_loop(listener, inbound));
                Some(local)
            }
            None => None,
        };

        let (commands, mut cmd_rx) = mpsc::unbounded_channel::<SpeakerCommand>();
        tokio::spawn(async move {
            while let Some(cmd) = cmd_rx.recv().await {
                let peer = match &cmd {
                    SpeakerCommand::Advertise { peer, .. }
                    | SpeakerCommand::Disable { peer }
                    | SpeakerCommand::Enable { peer } => peer,
                };
                match peer_cmds.get(peer) {
                    Some(tx) => {
                        let _ = tx.send(cmd);
                    }
                    None => tracing::warn!(%peer, "command for unknown peer"),
                }
            }
        });

        Ok(Speaker {
            commands,
            stats,
            local_addr,
        })
    }
}

struct Inbound {
    stream: TcpStream,
    open: Open,
}

async fn accept_loop(
    listener: TcpListener,
    peers: BTreeMap<PeerId, (PeerConfig, UnboundedSender<Inbound>)>,
) {
    let peers = Arc::new(peers);
    loop {
        let (stream, remote) = match listener.accept().await {
            Ok(conn) => conn,
            Err(err) => {
                tracing::warn!(%err, "accept failed");
                tokio::time::sleep(Duration::from_millis(100)).await;
                continue;
            }
        };
        let peers = peers.clone();
        tokio::spawn(async move {
            if let Err(err) = route_inbound(stream, remote, &peers).await {
                tracing::debug!(%remote, %err, "dropping inbound connection");
            }
        });
    }
}

/// Reads the first OPEN and hands the connection to the peer it names.
///
/// Peers are matched on remote address and ASN since several peers may share
/// one loopback address.
async fn route_inbound(
    mut stream: TcpStream,
    remote: SocketAddr,
    peers: &BTreeMap<PeerId, (PeerConfig, UnboundedSender<Inbound>)>,
) -> io::Result<()> {
    let msg = tokio::time::timeout(OPEN_TIMEOUT, read_message(&mut stream))
        .await
        .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "no OPEN"))??;
    let open = match msg {
        Ok(Message::Open(open)) => open,
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("expected OPEN, got {other:?}"),
            ))
        }
    };
    let target = peers
        .values()
        .find(|(cfg, _)| cfg.remote_asn == open.asn && cfg.addr.ip() == remote.ip())
        .or_else(|| peers.values().find(|(cfg, _)| cfg.remote_asn == open.asn));
    match target {
        Some((_, tx)) => {
            let _ = tx.send(Inbound { stream, open });
            Ok(())
        }
        None => {
            let n = Notification::new(notify::OPEN_ERROR, notify::OPEN_BAD_PEER_AS);
            let frame = frame_message(&Message::Notification(n)).expect("notification fits");
            let _ = stream.write_all(&frame).await;
            Err(io::Error::other(format!(
                "no peer configured for AS{}",
                open.asn
            )))
        }
    }
}

/// Reads one frame. The outer error is transport failure, the inner one a
/// parse failure.
async fn read_message(
    stream: &mut (impl AsyncReadExt + Unpin),
) -> io::Result<Result<Message, MessageError>> {
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header).await?;
    let len = match parse_header(&header) {
        Ok((len, _)) => len,
        Err(e) => return Ok(Err(e)),
    };
    let mut frame = vec![0u8; len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    stream.read_exact(&mut frame[HEADER_LEN..]).await?;
    Ok(parse_message(&frame))
}

enum ConnEvent {
    Message(Result<Message, MessageError>),
    Closed,
}

struct Conn {
    id: u64,
    writer: OwnedWriteHalf,
    reader: JoinHandle<()>,
}

impl Drop for Conn {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

struct PeerTask {
    peer: PeerConfig,
    session: Session,
    events: UnboundedSender<SpeakerEvent>,
    stats: Arc<SpeakerStats>,
    conn: Option<Conn>,
    next_conn_id: u64,
    conn_tx: UnboundedSender<(u64, ConnEvent)>,
    conn_rx: UnboundedReceiver<(u64, ConnEvent)>,
    connect_tx: UnboundedSender<(u64, io::Result<TcpStream>)>,
    connect_rx: UnboundedReceiver<(u64, io::Result<TcpStream>)>,
    connect_attempt: u64,
}

impl PeerTask {
    fn new(
        peer: PeerConfig,
        session: Session,
        events: UnboundedSender<SpeakerEvent>,
        stats: Arc<SpeakerStats>,
    ) -> Self {
        let (conn_tx, conn_rx) = mpsc::unbounded_channel();
        let (connect_tx, connect_rx) = mpsc::unbounded_channel();
        Self {
            peer,
            session,
            events,
            stats,
            conn: None,
            next_conn_id: 0,
            conn_tx,
            conn_rx,
            connect_tx,
            connect_rx,
            connect_attempt: 0,
        }
    }

    async fn run(
        mut self,
        mut commands: UnboundedReceiver<SpeakerCommand>,
        mut inbound: UnboundedReceiver<Inbound>,
    ) {
        let actions = self.session.start(now());
        self.execute(actions).await;
        loop {
            let deadline = self.session.next_deadline().map(Instant::from_std);
            let sleep = async {
                match deadline {
                    Some(d) => tokio::time::sleep_until(d).await,
                    None => std::future::pending().await,
                }
            };
            let actions = tokio::select! {
                _ = sleep => self.session.tick(now()),
                cmd = commands.recv() => match cmd {
                    Some(cmd) => self.command(cmd),
                    None => break,
                },
                Some(inb) = inbound.recv() => self.inbound(inb).await,
                Some((id, ev)) = self.conn_rx.recv() => {
                    if self.conn.as_ref().is_some_and(|c| c.id == id) {
                        match ev {
                            ConnEvent::Message(Ok(msg)) => {
                                if matches!(msg, Message::Update(_)) {
                                    self.stats.updates_received.fetch_add(1, Ordering::Relaxed);
                                }
                                self.session.received(msg, now())
                            }
                            ConnEvent::Message(Err(err)) => self.session.receive_error(&err, now()),
                            ConnEvent::Closed => {
                                self.conn = None;
                                self.session.transport_closed(now())
                            }
                        }
                    } else {
                        Vec::new()
                    }
                }
                Some((attempt, result)) = self.connect_rx.recv() => self.connect_result(attempt, result),
            };
            self.execute(actions).await;
        }
    }

    fn command(&mut self, cmd: SpeakerCommand) -> Vec<Action> {
        match cmd {
            SpeakerCommand::Advertise { routes, .. } => {
                let path_prefix = self.session.config().local_asn;
                let mut updates = Vec::new();
                for route in routes {
                    let chunks = match route {
                        Outgoing::Announce {
                            as_path,
                            next_hop,
                            entries,
                        } => {
                            let mut path = Vec::with_capacity(as_path.len() + 1);
                            path.push(path_prefix);
                            path.extend(as_path);
                            chunk_updates(&path, next_hop, entries)
                        }
                        Outgoing::Withdraw { safi, eids } => {
                            chunk_withdrawals(&[path_prefix], safi, eids)
                        }
                    };
                    match chunks {
                        Ok(chunks) => updates.extend(chunks),
                        Err(err) => tracing::warn!(peer = %self.peer.id, %err, "not advertised"),
                    }
                }
                self.session.send_updates(updates)
            }
            SpeakerCommand::Disable { .. } => {
                self.connect_attempt += 1;
                self.session.stop()
            }
            SpeakerCommand::Enable { .. } => {
                if self.session.is_enabled() {
                    Vec::new()
                } else {
                    self.session.start(now())
                }
            }
        }
    }

    async fn inbound(&mut self, inb: Inbound) -> Vec<Action> {
        let Inbound { mut stream, open } = inb;
        let reject = |code| Message::Notification(Notification::new(notify::CEASE, code));
        if !self.session.is_enabled() {
            let frame = frame_message(&reject(notify::CEASE_ADMIN_SHUTDOWN)).unwrap();
            let _ = stream.write_all(&frame).await;
            return Vec::new();
        }
        let mut actions = Vec::new();
        if !self.session.accepts_inbound() {
            // Connection collision: the side with the higher BGP identifier
            // keeps the connection it initiated.
            let keep_existing = self.session.is_established()
                || u32::from(self.session.config().bgp_id) > u32::from(open.bgp_id);
            if keep_existing {
                let frame = frame_message(&reject(notify::CEASE_COLLISION)).unwrap();
                let _ = stream.write_all(&frame).await;
                return Vec::new();
            }
            self.execute(vec![
                Action::Send(reject(notify::CEASE_COLLISION)),
                Action::Close,
            ])
            .await;
            actions.extend(self.session.transport_closed(now()));
        }
        self.connect_attempt += 1;
        self.attach(stream);
        actions.extend(self.session.connected(now()));
        actions.extend(self.session.received(Message::Open(open), now()));
        actions
    }

    fn connect_result(&mut self, attempt: u64, result: io::Result<TcpStream>) -> Vec<Action> {
        if attempt != self.connect_attempt || self.session.state() != SessionState::Connect {
            return Vec::new();
        }
        match result {
            Ok(stream) => {
                self.attach(stream);
                self.session.connected(now())
            }
            Err(err) => {
                tracing::debug!(peer = %self.peer.id, %err, "connect failed");
                self.session.connect_failed(now())
            }
        }
    }

    fn attach(&mut self, stream: TcpStream) {
        let _ = stream.set_nodelay(true);
        let (mut read, writer) = stream.into_split();
        self.next_conn_id += 1;
        let id = self.next_conn_id;
        let tx = self.conn_tx.clone();
        let reader = tokio::spawn(async move {
            loop {
                match read_message(&mut read).await {
                    Ok(Ok(msg)) => {
                        if tx.send((id, ConnEvent::Message(Ok(msg)))).is_err() {
                            return;
                        }
                    }
                    Ok(Err(err)) => {
                        let _ = tx.send((id, ConnEvent::Message(Err(err))));
                        return;
                    }
                    Err(_) => {
                        let _ = tx.send((id, ConnEvent::Closed));
                        return;
                    }
                }
            }
        });
        self.conn = Some(Conn { id, writer, reader });
    }

    async fn execute(&mut self, actions: Vec<Action>) {
        let mut queue = std::collections::VecDeque::from(actions);
        while let Some(action) = queue.pop_front() {
            match action {
                Action::Connect => {
                    self.connect_attempt += 1;
                    let attempt = self.connect_attempt;
                    let addr = self.peer.addr;
                    let tx = self.connect_tx.clone();
                    tokio::spawn(async move {
                        let result =
                            tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
                                .await
                                .unwrap_or_else(|_| Err(io::Error::from(io::ErrorKind::TimedOut)));
                        let _ = tx.send((attempt, result));
                    });
                }
                Action::Send(msg) => {
                    let Some(conn) = self.conn.as_mut() else {
                        continue;
                    };
                    let frame = match frame_message(&msg) {
                        Ok(frame) => frame,
                        Err(err) => {
                            tracing::error!(peer = %self.peer.id, %err, "unframeable message dropped");
                            continue;
                        }
                    };
                    assert!(frame.len() <= super::message::MAX_MESSAGE_LEN);
                    if let Err(err) = conn.writer.write_all(&frame).await {
                        tracing::debug!(peer = %self.peer.id, %err, "write failed");
                        self.conn = None;
                        queue.extend(self.session.transport_closed(now()));
                        continue;
                    }
                    if matches!(msg, Message::Update(_)) {
                        self.stats.updates_sent.fetch_add(1, Ordering::Relaxed);
                        self.stats
                            .max_update_len
                            .fetch_max(frame.len() as u64, Ordering::Relaxed);
                    }
                }
                Action::Close => {
                    if let Some(mut conn) = self.conn.take() {
                        let _ = conn.writer.shutdown().await;
                    }
                }
                Action::Up(params) => {
                    tracing::info!(peer = %self.peer.id, remote_asn = params.remote_asn, dtn = params.dtn_capable, "session established");
                    let _ = self.events.send(SpeakerEvent::PeerUp {
                        peer: self.peer.id.clone(),
                        params,
                    });
                }
                Action::Down(reason) => {
                    tracing::info!(peer = %self.peer.id, %reason, "session down");
                    let _ = self.events.send(SpeakerEvent::PeerDown {
                        peer: self.peer.id.clone(),
                        reason,
                    });
                }
                Action::Deliver(update) => {
                    let _ = self.events.send(SpeakerEvent::Update {
                        peer: self.peer.id.clone(),
                        update,
                    });
                }
            }
        }
        self.stats.set_state(&self.peer.id, self.session.state());
    }
}

fn now() -> std::time::Instant {
    Instant::now().into_std()
}
