//! A simulated Bundle Protocol agent.
//!
//! The agent keeps local EID registrations and a forwarding table, speaks a
//! line-delimited JSON protocol to one ERDS connection and any number of
//! control clients, and runs minimal stream CLA listeners so reachability
//! learned over BGP can be exercised with real payloads.

pub mod cla;
pub mod client;
pub mod server;

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};

use serde::{Deserialize, Serialize};

use crate::nlri::ClaEndpoint;
use crate::EndpointId;

pub use cla::{cla_listen, cla_probe, DeliveryReport, ProbeError, PROBE_TIMEOUT};
pub use client::{AgentClient, ClientError};
pub use server::{serve_agent, AgentHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Erds,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub eid: String,
    pub cla: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FibEntryMsg {
    pub eid: String,
    pub safi: u8,
    pub host: IpAddr,
    pub port: u16,
}

impl FibEntryMsg {
    pub fn new(eid: &EndpointId, next_hop: &ClaEndpoint) -> Self {
        Self {
            eid: eid.to_string(),
            safi: next_hop.safi,
            host: next_hop.addr.ip(),
            port: next_hop.addr.port(),
        }
    }

    pub fn next_hop(&self) -> ClaEndpoint {
        ClaEndpoint::new(self.safi, SocketAddr::new(self.host, self.port))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EidRef {
    pub eid: String,
}

/// A payload received on a CLA listener.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub cla: String,
    pub from: SocketAddr,
    pub bytes: usize,
    pub payload_b64: String,
}

/// One line of the agent protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AgentMessage {
    Hello {
        role: Role,
    },
    Register {
        eid: String,
        cla: String,
    },
    Deregister {
        eid: String,
    },
    FibSet {
        entries: Vec<FibEntryMsg>,
    },
    FibDel {
        entries: Vec<EidRef>,
    },
    /// Reads the forwarding table.
    FibGet,
    BundleSend {
        eid: String,
        payload_b64: String,
    },
    /// Reads the log of received payloads.
    BundleRecv,
    Ok {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        registrations: Option<Vec<Registration>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fib: Option<Vec<FibEntryMsg>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bundles: Option<Vec<BundleRecord>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<DeliveryReport>,
    },
    Error {
        reason: String,
    },
}

impl AgentMessage {
    pub fn ok() -> Self {
        AgentMessage::Ok {
            registrations: None,
            fib: None,
            bundles: None,
            report: None,
        }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        AgentMessage::Error {
            reason: reason.into(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("agent messages serialize");
        line.push('\n');
        line
    }

    pub fn is_reply(&self) -> bool {
        matches!(self, AgentMessage::Ok { .. } | AgentMessage::Error { .. })
    }
}

/// The forwarding table: next-hop CLA endpoint per destination EID.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FibTable {
    entries: BTreeMap<EndpointId, ClaEndpoint>,
}

impl FibTable {
    pub fn set(&mut self, eid: EndpointId, next_hop: ClaEndpoint) {
        self.entries.insert(eid, next_hop);
    }

    pub fn remove(&mut self, eid: &EndpointId) -> Option<ClaEndpoint> {
        self.entries.remove(eid)
    }

    pub fn get(&self, eid: &EndpointId) -> Option<&ClaEndpoint> {
        self.entries.get(eid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EndpointId, &ClaEndpoint)> {
        self.entries.iter()
    }

    pub fn to_messages(&self) -> Vec<FibEntryMsg> {
        self.entries
            .iter()
            .map(|(e, c)| FibEntryMsg::new(e, c))
            .collect()
    }
}

/// Renders FIB entries as `eid | next_hop | safi`, sorted by EID text.
pub fn render_fib(entries: &[FibEntryMsg]) -> String {
    let mut rows: Vec<_> = entries.iter().collect();
    rows.sort_by(|a, b| a.eid.cmp(&b.eid));
    rows.iter()
        .map(|e| {
            format!(
                "{} | {} | {}\n",
                e.eid,
                SocketAddr::new(e.host, e.port),
                e.safi
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shape() {
        let line = AgentMessage::Register {
            eid: "ipn:5.1".into(),
            cla: "mtcp0".into(),
        }
        .to_line();
        assert_eq!(
            line,
            "{\"op\":\"register\",\"eid\":\"ipn:5.1\",\"cla\":\"mtcp0\"}\n"
        );
        assert_eq!(AgentMessage::ok().to_line(), "{\"op\":\"ok\"}\n");
        let parsed: AgentMessage = serde_json::from_str(
            r#"{"op":"fib_set","entries":[{"eid":"ipn:3.0","safi":0,"host":"127.0.0.1","port":4556}]}"#,
        )
        .unwrap();
        let AgentMessage::FibSet { entries } = parsed else {
            panic!()
        };
        assert_eq!(
            entries[0].next_hop().addr,
            "127.0.0.1:4556".parse().unwrap()
        );
        let get: AgentMessage = serde_json::from_str(r#"{"op":"fib_get"}"#).unwrap();
        assert_eq!(get, AgentMessage::FibGet);
    }

    #[test]
    fn fib_render() {
        let mut fib = FibTable::default();
        let nh = ClaEndpoint::new(0, "127.0.0.1:4556".parse().unwrap());
        fib.set(EndpointId::parse("ipn:3.0").unwrap(), nh);
        fib.set(EndpointId::parse("dtn://x/").unwrap(), nh);
        assert_eq!(
            render_fib(&fib.to_messages()),
            "dtn://x/ | 127.0.0.1:4556 | 0\nipn:3.0 | 127.0.0.1:4556 | 0\n"
        );
    }
}
