//! Adapters connect the ERDS to exactly one Bundle Protocol agent and one
//! BGP speaker. Each adapter is a pair of channels: `listen` yields events
//! from the outside world and `send` accepts events for it.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::sync::mpsc::{self, UnboundedReceiver, UnboundedSender};

use super::ErdsError;
use crate::agent::{AgentMessage, EidRef, FibEntryMsg, Role};
use crate::bgp::{
    PeerId, SessionParams, Speaker, SpeakerCommand, SpeakerConfig, SpeakerEvent, SpeakerStats,
};
use crate::nlri::{ClaEndpoint, EidEntry, ReachabilityAnnouncement, ReachabilityWithdrawal};
use crate::EndpointId;

/// Reachability as it crosses an adapter boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReachabilityEvent {
    Announce(ReachabilityAnnouncement),
    Withdraw(ReachabilityWithdrawal),
}

#[derive(Debug)]
pub struct Adapter<In, Out> {
    pub listen: UnboundedReceiver<In>,
    pub send: UnboundedSender<Out>,
}

/// A registration change reported by the BP agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BpEvent {
    Register { eid: EndpointId, cla: String },
    Deregister { eid: EndpointId },
}

/// Maps a BP registration change onto a Local reachability record.
///
/// Withdrawals carry the lowest configured SAFI; receivers match
/// withdrawn EIDs regardless of SAFI.
pub fn translate_bp_event(
    event: &BpEvent,
    clas: &BTreeMap<String, ClaEndpoint>,
) -> Result<ReachabilityEvent, ErdsError> {
    match event {
        BpEvent::Register { eid, cla } => {
            let next_hop = clas
                .get(cla)
                .ok_or_else(|| ErdsError::UnknownCla(cla.clone()))?;
            Ok(ReachabilityEvent::Announce(ReachabilityAnnouncement::new(
                *next_hop,
                vec![EidEntry::new(eid.clone())],
            )))
        }
        BpEvent::Deregister { eid } => {
            let safi = clas.values().map(|c| c.safi).min().unwrap_or(0);
            Ok(ReachabilityEvent::Withdraw(ReachabilityWithdrawal::new(
                safi,
                [eid.clone()],
            )))
        }
    }
}

/// Connects to the agent at `agent`, reconnecting every `retry` after loss.
///
/// On each (re)connect the registration snapshot is diffed against what
/// was last reported and the agent FIB is reconciled with the FIB the ERDS
/// has installed, so either side may restart without stale state.
pub fn spawn_bp_adapter(
    agent: SocketAddr,
    clas: BTreeMap<String, ClaEndpoint>,
    retry: Duration,
) -> Adapter<ReachabilityEvent, ReachabilityEvent> {
    let (events_tx, events_rx) = mpsc::unbounded_channel();
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let mut state = BpState {
        clas,
        known: BTreeMap::new(),
        fib: BTreeMap::new(),
        events: events_tx,
        commands: cmd_rx,
    };
    tokio::spawn(async move {
        loop {
            match TcpStream::connect(agent).await {
                Ok(stream) => match state.session(stream).await {
                    Ok(Flow::Stop) => return,
                    Ok(Flow::Reconnect) => tracing::info!(%agent, "agent connection closed"),
                    Err(err) => tracing::warn!(%agent, %err, "agent connection failed"),
                },
                Err(err) => tracing::debug!(%agent, %err, "agent unreachable"),
            }
            if state.wait(retry).await == Flow::Stop {
                return;
            }
        }
    });
    Adapter {
        listen: events_rx,
        send: cmd_tx,
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Flow {
    Reconnect,
    Stop,
}

struct BpState {
    clas: BTreeMap<String, ClaEndpoint>,
    known: BTreeMap<EndpointId, String>,
    fib: BTreeMap<EndpointId, ClaEndpoint>,
    events: UnboundedSender<ReachabilityEvent>,
    commands: UnboundedReceiver<ReachabilityEvent>,
}

impl BpState {
    /// Sleeps for `retry` while still tracking FIB commands.
    async fn wait(&mut self, retry: Duration) -> Flow {
        let sleep = tokio::time::sleep(retry);
        tokio::pin!(sleep);
        loop {
            tokio::select! {
                _ = &mut sleep => return Flow::Reconnect,
                cmd = self.commands.recv() => match cmd {
                    Some(cmd) => {
                        self.apply_fib(&cmd);
                    }
                    None => return Flow::Stop,
                },
            }
        }
    }

    fn apply_fib(&mut self, cmd: &ReachabilityEvent) -> AgentMessage {
        match cmd {
            ReachabilityEvent::Announce(a) => {
                for e in &a.entries {
                    self.fib.insert(e.eid.clone(), a.next_hop);
                }
                AgentMessage::FibSet {
                    entries: a
                        .entries
                        .iter()
                        .map(|e| FibEntryMsg::new(&e.eid, &a.next_hop))
                        .collect(),
                }
            }
            ReachabilityEvent::Withdraw(w) => {
                for e in &w.entries {
                    self.fib.remove(&e.eid);
                }
                AgentMessage::FibDel {
                    entries: w
                        .entries
                        .iter()
                        .map(|e| EidRef {
                            eid: e.eid.to_string(),
                        })
                        .collect(),
                }
            }
        }
    }

    fn report(&mut self, event: BpEvent) -> Result<(), ErdsError> {
        let translated = translate_bp_event(&event, &self.clas)?;
        match event {
            BpEvent::Register { eid, cla } => {
                if self.known.get(&eid) == Some(&cla) {
                    return Ok(());
                }
                self.known.insert(eid, cla);
            }
            BpEvent::Deregister { eid } => {
                if self.known.remove(&eid).is_none() {
                    return Ok(());
                }
            }
        }
        let _ = self.events.send(translated);
        Ok(())
    }

    fn apply_snapshot(&mut self, registrations: Vec<crate::agent::Registration>) {
        let mut current = BTreeMap::new();
        for r in registrations {
            match EndpointId::parse(&r.eid) {
                Ok(eid) => {
                    current.insert(eid, r.cla);
                }
                Err(err) => tracing::warn!(eid = %r.eid, %err, "ignoring registration"),
            }
        }
        let gone: Vec<_> = self
            .known
            .keys()
            .filter(|e| !current.contains_key(*e))
            .cloned()
            .collect();
        for eid in gone {
            let _ = self.report(BpEvent::Deregister { eid });
        }
        for (eid, cla) in current {
            if let Err(err) = self.report(BpEvent::Register { eid, cla }) {
                tracing::warn!(%err, "ignoring registration");
            }
        }
    }

    fn reconcile(&self, agent_fib: Vec<FibEntryMsg>) -> Vec<AgentMessage> {
        let stale: Vec<EidRef> = agent_fib
            .iter()
            .filter(|e| EndpointId::parse(&e.eid).map_or(true, |eid| !self.fib.contains_key(&eid)))
            .map(|e| EidRef { eid: e.eid.clone() })
            .collect();
        let mut out = Vec::new();
        if !stale.is_empty() {
            out.push(AgentMessage::FibDel { entries: stale });
        }
        if !self.fib.is_empty() {
            out.push(AgentMessage::FibSet {
                entries: self
                    .fib
                    .iter()
                    .map(|(e, c)| FibEntryMsg::new(e, c))
                    .collect(),
            });
        }
        out
    }

    async fn session(&mut self, stream: TcpStream) -> io::Result<Flow> {
        let (read, mut write) = stream.into_split();
        let mut lines = BufReader::new(read).lines();
        write
            .write_all(
                AgentMessage::Hello { role: Role::Erds }
                    .to_line()
                    .as_bytes(),
            )
            .await?;
        let registrations = match lines.next_line().await? {
            Some(line) => match serde_json::from_str::<AgentMessage>(&line) {
                Ok(AgentMessage::Ok {
                    registrations: Some(r),
                    ..
                }) => r,
                other => {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("unexpected hello reply: {other:?}"),
                    ))
                }
            },
            None => return Ok(Flow::Reconnect),
        };
        tracing::info!(count = registrations.len(), "agent connected");
        self.apply_snapshot(registrations);
        write
            .write_all(AgentMessage::FibGet.to_line().as_bytes())
            .await?;

        loop {
            tokio::select! {
                line = lines.next_line() => {
                    let Some(line) = line? else { return Ok(Flow::Reconnect) };
                    let reply = match serde_json::from_str::<AgentMessage>(&line) {
                        Ok(msg) => self.handle_agent(msg),
                        Err(err) => {
                            tracing::warn!(%err, "malformed line from agent");
                            Vec::new()
                        }
                    };
                    for msg in reply {
                        write.write_all(msg.to_line().as_bytes()).await?;
                    }
                }
                cmd = self.commands.recv() => {
                    let Some(cmd) = cmd else { return Ok(Flow::Stop) };
                    let msg = self.apply_fib(&cmd);
                    write.write_all(msg.to_line().as_bytes()).await?;
                }
            }
        }
    }

    fn handle_agent(&mut self, msg: AgentMessage) -> Vec<AgentMessage> {
        let event = match msg {
            AgentMessage::Register { eid, cla } => {
                EndpointId::parse(&eid).map(|eid| BpEvent::Register { eid, cla })
            }
            AgentMessage::Deregister { eid } => {
                EndpointId::parse(&eid).map(|eid| BpEvent::Deregister { eid })
            }
            AgentMessage::Ok { fib: Some(fib), .. } => return self.reconcile(fib),
            AgentMessage::Error { reason } => {
                tracing::warn!(%reason, "agent rejected request");
                return Vec::new();
            }
            AgentMessage::Ok { .. } => return Vec::new(),
            other => return vec![AgentMessage::error(format!("unsupported op {other:?}"))],
        };
        let result = match event {
            Ok(event) => self.report(event).map_err(|e| e.to_string()),
            Err(err) => Err(err.to_string()),
        };
        vec![match result {
            Ok(()) => AgentMessage::ok(),
            Err(reason) => AgentMessage::error(reason),
        }]
    }
}

/// Events from the BGP side, tagged with the session they arrived on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BgpEvent {
    PeerUp {
        peer: PeerId,
        params: SessionParams,
    },
    PeerDown {
        peer: PeerId,
    },
    Reachability {
        peer: PeerId,
        as_path: Vec<u16>,
        event: ReachabilityEvent,
    },
}

/// A running BGP adapter around the in-process speaker.
#[derive(Debug)]
pub struct BgpAdapter {
    pub adapter: Adapter<BgpEvent, SpeakerCommand>,
    pub stats: Arc<SpeakerStats>,
    pub local_addr: Option<SocketAddr>,
}

pub async fn start_bgp_adapter(config: SpeakerConfig) -> io::Result<BgpAdapter> {
    let (speaker_tx, mut speaker_rx) = mpsc::unbounded_channel();
    let speaker = Speaker::start(config, speaker_tx).await?;
    let (events_tx, events_rx) = mpsc::unbounded_channel();
    tokio::spawn(async move {
        while let Some(event) = speaker_rx.recv().await {
            for out in translate_speaker_event(event) {
                if events_tx.send(out).is_err() {
                    return;
                }
            }
        }
    });
    Ok(BgpAdapter {
        adapter: Adapter {
            listen: events_rx,
            send: speaker.commands,
        },
        stats: speaker.stats,
        local_addr: speaker.local_addr,
    })
}

/// Withdrawals in an UPDATE are processed before its announcements.
fn translate_speaker_event(event: SpeakerEvent) -> Vec<BgpEvent> {
    match event {
        SpeakerEvent::PeerUp { peer, params } => vec![BgpEvent::PeerUp { peer, params }],
        SpeakerEvent::PeerDown { peer, reason } => {
            tracing::info!(%peer, ?reason, "session down");
            vec![BgpEvent::PeerDown { peer }]
        }
        SpeakerEvent::Update { peer, update } => {
            let mut out = Vec::new();
            if let Some(w) = update.mp_unreach {
                out.push(BgpEvent::Reachability {
                    peer: peer.clone(),
                    as_path: update.as_path.clone(),
                    event: ReachabilityEvent::Withdraw(w),
                });
            }
            if let Some(a) = update.mp_reach {
                out.push(BgpEvent::Reachability {
                    peer,
                    as_path: update.as_path,
                    event: ReachabilityEvent::Announce(a),
                });
            }
            out
        }
    }
}

/// SAFIs usable on a session: negotiated and backed by a local CLA.
pub(crate) fn session_clas(
    params: &SessionParams,
    local: &BTreeMap<u8, ClaEndpoint>,
) -> BTreeMap<u8, ClaEndpoint> {
    let safis: &BTreeSet<u8> = &params.safis;
    local
        .iter()
        .filter(|(s, _)| safis.contains(s))
        .map(|(s, c)| (*s, *c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlri::{decode_mp_reach, encode_mp_reach, NHNA_BITS_V4};

    fn clas() -> BTreeMap<String, ClaEndpoint> {
        BTreeMap::from([(
            "mtcp0".to_string(),
            ClaEndpoint::new(0, "10.0.0.2:4556".parse().unwrap()),
        )])
    }

    #[test]
    fn register_translates_to_v4_announcement() {
        let eid = EndpointId::parse("ipn:5.1").unwrap();
        let event = BpEvent::Register {
            eid: eid.clone(),
            cla: "mtcp0".into(),
        };
        let ReachabilityEvent::Announce(a) = translate_bp_event(&event, &clas()).unwrap() else {
            panic!("expected announcement")
        };
        assert_eq!(a.entries, vec![EidEntry::new(eid)]);
        let bytes = encode_mp_reach(&a).unwrap();
        assert_eq!(bytes[3], NHNA_BITS_V4);
        assert_eq!(decode_mp_reach(&bytes).unwrap(), a);
    }

    #[test]
    fn deregister_translates_to_withdrawal() {
        let eid = EndpointId::parse("ipn:5.1").unwrap();
        let out = translate_bp_event(&BpEvent::Deregister { eid: eid.clone() }, &clas()).unwrap();
        assert_eq!(
            out,
            ReachabilityEvent::Withdraw(ReachabilityWithdrawal::new(0, [eid]))
        );
    }

    #[test]
    fn unknown_cla_rejected() {
        let event = BpEvent::Register {
            eid: EndpointId::parse("ipn:5.1").unwrap(),
            cla: "nope".into(),
        };
        assert!(
            matches!(translate_bp_event(&event, &clas()), Err(ErdsError::UnknownCla(c)) if c == "nope")
        );
    }
}
