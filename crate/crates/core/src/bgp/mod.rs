//! Minimal BGP-4 speaker carrying the DTN reachability attributes.

pub mod chunk;
pub mod fsm;
pub mod message;
pub mod speaker;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use chunk::{chunk_updates, chunk_withdrawals, ChunkError};
pub use fsm::{
    negotiate, Action, DownReason, PeerMode, Session, SessionConfig, SessionParams, SessionState,
};
pub use message::{
    frame_message, parse_message, Message, MessageError, Multiprotocol, Notification, Open, Update,
};
pub use speaker::{
    Outgoing, PeerConfig, Speaker, SpeakerCommand, SpeakerConfig, SpeakerEvent, SpeakerStats,
};

/// Identifies a configured peer within one node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeerId(pub String);

impl PeerId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
