//! Transport-independent BGP session state machine.
//!
//! [`Session`] consumes events (transport up/down, parsed messages, clock
//! ticks) and returns [`Action`]s for whoever owns the transport. It never
//! touches a socket or reads the clock itself, so tests can drive it step by
//! step with synthetic instants.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::message::{notify, Message, MessageError, Multiprotocol, Notification, Open, Update};
use crate::nlri::NlriError;

/// Hold time proposed while waiting for the peer's OPEN.
const OPEN_HOLD: Duration = Duration::from_secs(240);

/// Fixed reconnect backoff.
pub const RETRY_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerMode {
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    Idle,
    Connect,
    OpenSent,
    OpenConfirm,
    Established,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SessionState::Idle => "Idle",
            SessionState::Connect => "Connect",
            SessionState::OpenSent => "OpenSent",
            SessionState::OpenConfirm => "OpenConfirm",
            SessionState::Established => "Established",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub local_asn: u16,
    pub bgp_id: Ipv4Addr,
    pub hold_time: u16,
    /// DTN SAFIs this node can serve, advertised as multiprotocol capabilities.
    pub local_safis: BTreeSet<u8>,
    /// Capabilities for other address families, advertised verbatim.
    pub extra_capabilities: Vec<Multiprotocol>,
    pub remote_asn: Option<u16>,
    pub mode: PeerMode,
    pub retry_interval: Duration,
}

impl SessionConfig {
    pub fn local_open(&self) -> Open {
        let mut caps: Vec<_> = self
            .local_safis
            .iter()
            .map(|&s| Multiprotocol::dtn(s))
            .collect();
        caps.extend_from_slice(&self.extra_capabilities);
        Open::new(self.local_asn, self.hold_time, self.bgp_id, caps)
    }
}

/// Parameters agreed once both OPENs have been exchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionParams {
    pub remote_asn: u16,
    pub remote_bgp_id: Ipv4Addr,
    pub hold_time: u16,
    /// DTN SAFIs both sides advertised.
    pub safis: BTreeSet<u8>,
    pub dtn_capable: bool,
}

impl SessionParams {
    /// Keepalive interval, `None` when timers are disabled.
    pub fn keepalive_interval(&self) -> Option<Duration> {
        (self.hold_time > 0).then(|| Duration::from_secs(u64::from(self.hold_time / 3).max(1)))
    }
}

/// Checks the peer's OPEN against ours.
pub fn negotiate(
    sent: &Open,
    received: &Open,
    expected_remote_asn: Option<u16>,
) -> Result<SessionParams, Notification> {
    if received.version != super::message::BGP_VERSION {
        return Err(Notification {
            code: notify::OPEN_ERROR,
            subcode: notify::OPEN_UNSUPPORTED_VERSION,
            data: 4u16.to_be_bytes().to_vec(),
        });
    }
    if expected_remote_asn.is_some_and(|asn| asn != received.asn) || received.asn == 0 {
        return Err(Notification::new(
            notify::OPEN_ERROR,
            notify::OPEN_BAD_PEER_AS,
        ));
    }
    if received.bgp_id.is_unspecified() || received.bgp_id == sent.bgp_id {
        return Err(Notification::new(
            notify::OPEN_ERROR,
            notify::OPEN_BAD_BGP_ID,
        ));
    }
    if matches!(received.hold_time, 1 | 2) {
        return Err(Notification::new(
            notify::OPEN_ERROR,
            notify::OPEN_UNACCEPTABLE_HOLD_TIME,
        ));
    }
    let ours: BTreeSet<u8> = sent.dtn_safis().collect();
    let safis: BTreeSet<u8> = received.dtn_safis().filter(|s| ours.contains(s)).collect();
    Ok(SessionParams {
        remote_asn: received.asn,
        remote_bgp_id: received.bgp_id,
        hold_time: sent.hold_time.min(received.hold_time),
        dtn_capable: !safis.is_empty(),
        safis,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownReason {
    HoldTimerExpired,
    TransportClosed,
    NotificationReceived(Notification),
    ProtocolError(Notification),
    AdminDown,
}

impl fmt::Display for DownReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DownReason::HoldTimerExpired => f.write_str("hold timer expired"),
            DownReason::TransportClosed => f.write_str("transport closed"),
            DownReason::NotificationReceived(n) => {
                write!(f, "notification received ({}/{})", n.code, n.subcode)
            }
            DownReason::ProtocolError(n) => write!(f, "protocol error ({}/{})", n.code, n.subcode),
            DownReason::AdminDown => f.write_str("administratively down"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Open a transport toward the peer.
    Connect,
    Send(Message),
    /// Tear down the current transport.
    Close,
    Up(SessionParams),
    /// The session left Established.
    Down(DownReason),
    /// A received UPDATE for the RIB layer.
    Deliver(Update),
}

#[derive(Debug)]
pub struct Session {
    config: SessionConfig,
    state: SessionState,
    params: Option<SessionParams>,
    enabled: bool,
    hold_deadline: Option<Instant>,
    keepalive_deadline: Option<Instant>,
    retry_deadline: Option<Instant>,
}

impl Session {
    pub fn new(config: SessionConfig) -> Self {
        Self {
            config,
            state: SessionState::Idle,
            params: None,
            enabled: false,
            hold_deadline: None,
            keepalive_deadline: None,
            retry_deadline: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Negotiated parameters, present from OpenConfirm onwards.
    pub fn params(&self) -> Option<&SessionParams> {
        self.params.as_ref()
    }

    pub fn is_established(&self) -> bool {
        self.state == SessionState::Established
    }

    pub fn dtn_capable(&self) -> bool {
        self.is_established() && self.params.as_ref().is_some_and(|p| p.dtn_capable)
    }

    /// Whether a new inbound transport may be handed to this session.
    pub fn accepts_inbound(&self) -> bool {
        self.enabled && matches!(self.state, SessionState::Idle | SessionState::Connect)
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// The earliest instant at which [`Session::tick`] has work to do.
    pub fn next_deadline(&self) -> Option<Instant> {
        [
            self.hold_deadline,
            self.keepalive_deadline,
            self.retry_deadline,
        ]
        .into_iter()
        .flatten()
        .min()
    }

    pub fn start(&mut self, now: Instant) -> Vec<Action> {
        self.enabled = true;
        self.state = SessionState::Connect;
        self.retry_deadline = None;
        match self.config.mode {
            PeerMode::Active => {
                let _ = now;
                vec![Action::Connect]
            }
            PeerMode::Passive => Vec::new(),
        }
    }

    /// Administrative shutdown; the session stays Idle until restarted.
    pub fn stop(&mut self) -> Vec<Action> {
        let mut actions = Vec::new();
        if matches!(
            self.state,
            SessionState::OpenSent | SessionState::OpenConfirm | SessionState::Established
        ) {
            actions.push(Action::Send(Message::Notification(Notification::new(
                notify::CEASE,
                notify::CEASE_ADMIN_SHUTDOWN,
            ))));
            actions.push(Action::Close);
        }
        if self.state == SessionState::Established {
            actions.push(Action::Down(DownReason::AdminDown));
        }
        self.enabled = false;
        self.reset();
        self.retry_deadline = None;
        actions
    }

    /// A transport to the peer is up.
    pub fn connected(&mut self, now: Instant) -> Vec<Action> {
        if !self.accepts_inbound() {
            return vec![Action::Close];
        }
        self.state = SessionState::OpenSent;
        self.retry_deadline = None;
        self.hold_deadline = Some(now + OPEN_HOLD);
        vec![Action::Send(Message::Open(self.config.local_open()))]
    }

    pub fn connect_failed(&mut self, now: Instant) -> Vec<Action> {
        if self.state == SessionState::Connect && self.enabled {
            self.state = SessionState::Idle;
            self.retry_deadline = Some(now + self.config.retry_interval);
        }
        Vec::new()
    }

    pub fn transport_closed(&mut self, now: Instant) -> Vec<Action> {
        let was_established = self.state == SessionState::Established;
        self.fail(now);
        if was_established {
            vec![Action::Down(DownReason::TransportClosed)]
        } else {
            Vec::new()
        }
    }

    pub fn received(&mut self, msg: Message, now: Instant) -> Vec<Action> {
        match (self.state, msg) {
            (_, Message::Notification(n)) => {
                self.teardown(now, None, DownReason::NotificationReceived(n))
            }
            (SessionState::OpenSent, Message::Open(open)) => {
                match negotiate(&self.config.local_open(), &open, self.config.remote_asn) {
                    Ok(params) => {
                        self.arm_timers(&params, now);
                        self.params = Some(params);
                        self.state = SessionState::OpenConfirm;
                        vec![Action::Send(Message::Keepalive)]
                    }
                    Err(n) => self.teardown(now, Some(n.clone()), DownReason::ProtocolError(n)),
                }
            }
            (SessionState::OpenConfirm, Message::Keepalive) => {
                self.refresh_hold(now);
                self.state = SessionState::Established;
                vec![Action::Up(
                    self.params.clone().expect("params set in OpenConfirm"),
                )]
            }
            (SessionState::Established, Message::Keepalive) => {
                self.refresh_hold(now);
                Vec::new()
            }
            (SessionState::Established, Message::Update(update)) => {
                self.refresh_hold(now);
                if self.dtn_capable() {
                    vec![Action::Deliver(update)]
                } else {
                    tracing::debug!("ignoring DTN UPDATE from peer without DTN capability");
                    Vec::new()
                }
            }
            (SessionState::Idle | SessionState::Connect, _) => Vec::new(),
            (_, _) => {
                let n = Notification::new(notify::FSM_ERROR, 0);
                self.teardown(now, Some(n.clone()), DownReason::ProtocolError(n))
            }
        }
    }

    /// The transport delivered bytes that did not parse.
    pub fn receive_error(&mut self, err: &MessageError, now: Instant) -> Vec<Action> {
        use super::message::AttributeError;
        let n = match err {
            MessageError::NoDtnReachability
            | MessageError::Attribute(AttributeError::Nlri(NlriError::UnsupportedSafi(_))) => {
                tracing::debug!(%err, "skipping UPDATE");
                self.refresh_hold(now);
                return Vec::new();
            }
            MessageError::Framing(_) => Notification::new(notify::HEADER_ERROR, 0),
            MessageError::UnknownMessageType(t) => Notification {
                code: notify::HEADER_ERROR,
                subcode: 3,
                data: vec![*t],
            },
            MessageError::Open(_) => Notification::new(notify::OPEN_ERROR, 0),
            MessageError::Attribute(AttributeError::Nlri(_)) => Notification::new(
                notify::UPDATE_ERROR,
                notify::UPDATE_OPTIONAL_ATTRIBUTE_ERROR,
            ),
            MessageError::Attribute(_) => Notification::new(
                notify::UPDATE_ERROR,
                notify::UPDATE_MALFORMED_ATTRIBUTE_LIST,
            ),
            MessageError::Notification | MessageError::TooLarge(_) => {
                Notification::new(notify::HEADER_ERROR, 2)
            }
        };
        self.teardown(now, Some(n.clone()), DownReason::ProtocolError(n))
    }

    pub fn tick(&mut self, now: Instant) -> Vec<Action> {
        if self.hold_deadline.is_some_and(|d| d <= now) {
            let n = Notification::new(notify::HOLD_TIMER_EXPIRED, 0);
            return self.teardown(now, Some(n), DownReason::HoldTimerExpired);
        }
        let mut actions = Vec::new();
        if let Some(deadline) = self.keepalive_deadline.filter(|d| *d <= now) {
            let interval = self
                .params
                .as_ref()
                .and_then(SessionParams::keepalive_interval)
                .expect("keepalive armed without interval");
            let mut next = deadline + interval;
            if next <= now {
                next = now + interval;
            }
            self.keepalive_deadline = Some(next);
            actions.push(Action::Send(Message::Keepalive));
        }
        if self.retry_deadline.is_some_and(|d| d <= now) {
            self.retry_deadline = None;
            if self.enabled {
                actions.extend(self.start(now));
            }
        }
        actions
    }

    /// Filters outgoing UPDATEs by what the session may carry.
    ///
    /// DTN reachability only leaves an Established, DTN-capable session and
    /// only for SAFIs the peer advertised.
    pub fn send_updates(&mut self, updates: Vec<Update>) -> Vec<Action> {
        let Some(params) = self.params.as_ref().filter(|_| self.dtn_capable()) else {
            return Vec::new();
        };
        updates
            .into_iter()
            .filter(|u| {
                u.mp_reach
                    .as_ref()
                    .is_none_or(|a| params.safis.contains(&a.safi()))
                    && u.mp_unreach
                        .as_ref()
                        .is_none_or(|w| params.safis.contains(&w.safi))
            })
            .map(|u| Action::Send(Message::Update(u)))
            .collect()
    }

    fn arm_timers(&mut self, params: &SessionParams, now: Instant) {
        match params.keepalive_interval() {
            Some(interval) => {
                self.hold_deadline = Some(now + Duration::from_secs(u64::from(params.hold_time)));
                self.keepalive_deadline = Some(now + interval);
            }
            None => {
                self.hold_deadline = None;
                self.keepalive_deadline = None;
            }
        }
    }

    fn refresh_hold(&mut self, now: Instant) {
        if let Some(p) = &self.params {
            if p.hold_time > 0 {
                self.hold_deadline = Some(now + Duration::from_secs(u64::from(p.hold_time)));
            }
        }
    }

    fn reset(&mut self) {
        self.state = SessionState::Idle;
        self.params = None;
        self.hold_deadline = None;
        self.keepalive_deadline = None;
    }

    fn fail(&mut self, now: Instant) {
        self.reset();
        if self.enabled {
            self.retry_deadline = Some(now + self.config.retry_interval);
        }
    }

    fn teardown(
        &mut self,
        now: Instant,
        notify: Option<Notification>,
        reason: DownReason,
    ) -> Vec<Action> {
        let was_established = self.state == SessionState::Established;
        let mut actions = Vec::new();
        if let Some(n) = notify {
            actions.push(Action::Send(Message::Notification(n)));
        }
        actions.push(Action::Close);
        if was_established {
            actions.push(Action::Down(reason));
        } else {
            tracing::debug!(%reason, "session setup failed");
        }
        self.fail(now);
        actions
    }
}
