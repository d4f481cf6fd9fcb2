use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedSender};

use super::cla::{cla_listen, cla_probe, probe_supported, PROBE_TIMEOUT};
use super::{AgentMessage, BundleRecord, FibTable, Registration, Role};
use crate::nlri::ClaEndpoint;
use crate::EndpointId;

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

#[derive(Debug, Default)]
struct AgentState {
    clas: BTreeMap<String, ClaEndpoint>,
    fib: Mutex<FibTable>,
    registrations: Mutex<BTreeMap<EndpointId, String>>,
    erds: Mutex<Option<(u64, UnboundedSender<AgentMessage>)>>,
    received: Mutex<Vec<BundleRecord>>,
    next_conn: AtomicU64,
}

/// Read access to a running agent.
#[derive(Debug, Clone)]
pub struct AgentHandle {
    state: Arc<AgentState>,
    local_addr: SocketAddr,
}

impl AgentHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn fib(&self) -> FibTable {
        self.state.fib.lock().unwrap().clone()
    }

    pub fn registrations(&self) -> BTreeMap<EndpointId, String> {
        self.state.registrations.lock().unwrap().clone()
    }

    pub fn received(&self) -> Vec<BundleRecord> {
        self.state.received.lock().unwrap().clone()
    }

    pub fn erds_connected(&self) -> bool {
        self.state.erds.lock().unwrap().is_some()
    }
}

/// Binds the agent protocol listener and one CLA listener per configured
/// stream CLA, then serves connections on the current runtime.
pub async fn serve_agent(
    listen: SocketAddr,
    clas: BTreeMap<String, ClaEndpoint>,
) -> io::Result<AgentHandle> {
    let listener = TcpListener::bind(listen).await?;
    let local_addr = listener.local_addr()?;
    let state = Arc::new(AgentState {
        clas,
        ..AgentState::default()
    });

    for (name, cla) in &state.clas {
        if !probe_supported(cla.safi) {
            tracing::info!(cla = %name, safi = cla.safi, "no listener for SAFI");
            continue;
        }
        let cla_listener = TcpListener::bind(cla.addr).await?;
        let sink = state.clone();
        let name = name.clone();
        tokio::spawn(cla_listen(cla_listener, move |from, payload| {
            tracing::info!(cla = %name, %from, bytes = payload.len(), "bundle received");
            sink.received.lock().unwrap().push(BundleRecord {
                cla: name.clone(),
                from,
                bytes: payload.len(),
                payload_b64: B64.encode(&payload),
            });
        }));
    }

    let accept_state = state.clone();
    tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((stream, _)) => {
                    tokio::spawn(handle_connection(stream, accept_state.clone()));
                }
                Err(err) => {
                    tracing::warn!(%err, "agent accept failed");
                    tokio::time::sleep(std::time::Duration::from_millis(100)).await;
                }
            }
        }
    });

    Ok(AgentHandle { state, local_addr })
}

async fn handle_connection(stream: TcpStream, state: Arc<AgentState>) {
    let conn_id = state.next_conn.fetch_add(1, Ordering::Relaxed);
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<AgentMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if write.write_all(msg.to_line().as_bytes()).await.is_err() {
                break;
            }
        }
    });

    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        let msg = match serde_json::from_str::<AgentMessage>(&line) {
            Ok(msg) => msg,
            Err(err) => {
                let _ = tx.send(AgentMessage::error(format!("malformed message: {err}")));
                continue;
            }
        };
        if let Some(reply) = handle_message(msg, &state, conn_id, &tx).await {
            let _ = tx.send(reply);
        }
    }

    {
        let mut erds = state.erds.lock().unwrap();
        if erds.as_ref().is_some_and(|(id, _)| *id == conn_id) {
            tracing::info!("ERDS disconnected");
            *erds = None;
        }
    }
    drop(tx);
    let _ = writer.await;
}

fn push_to_erds(state: &AgentState, msg: AgentMessage) {
    if let Some((_, tx)) = state.erds.lock().unwrap().as_ref() {
        let _ = tx.send(msg);
    }
}

fn parse_eid(text: &str) -> Result<EndpointId, AgentMessage> {
    EndpointId::parse(text).map_err(|e| AgentMessage::error(e.to_string()))
}

async fn handle_message(
    msg: AgentMessage,
    state: &AgentState,
    conn_id: u64,
    tx: &UnboundedSender<AgentMessage>,
) -> Option<AgentMessage> {
    let reply = match msg {
        AgentMessage::Hello { role: Role::Erds } => {
            let regs = state.registrations.lock().unwrap();
            let snapshot = regs
                .iter()
                .map(|(eid, cla)| Registration {
                    eid: eid.to_string(),
                    cla: cla.clone(),
                })
                .collect();
            // Reply and install the push channel under the registrations
            // lock so no push can precede the snapshot.
            let _ = tx.send(AgentMessage::Ok {
                registrations: Some(snapshot),
                fib: None,
                bundles: None,
                report: None,
            });
            *state.erds.lock().unwrap() = Some((conn_id, tx.clone()));
            tracing::info!("ERDS connected");
            return None;
        }
        AgentMessage::Hello {
            role: Role::Control,
        } => AgentMessage::ok(),
        AgentMessage::Register { eid, cla } => {
            let eid = match parse_eid(&eid) {
                Ok(eid) => eid,
                Err(e) => return Some(e),
            };
            if !state.clas.contains_key(&cla) {
                return Some(AgentMessage::error(format!("unknown cla {cla:?}")));
            }
            let mut regs = state.registrations.lock().unwrap();
            if regs.get(&eid) != Some(&cla) {
                regs.insert(eid.clone(), cla.clone());
                push_to_erds(
                    state,
                    AgentMessage::Register {
                        eid: eid.to_string(),
                        cla,
                    },
                );
            }
            AgentMessage::ok()
        }
        AgentMessage::Deregister { eid } => {
            let eid = match parse_eid(&eid) {
                Ok(eid) => eid,
                Err(e) => return Some(e),
            };
            let mut regs = state.registrations.lock().unwrap();
            if regs.remove(&eid).is_some() {
                push_to_erds(
                    state,
                    AgentMessage::Deregister {
                        eid: eid.to_string(),
                    },
                );
            }
            AgentMessage::ok()
        }
        AgentMessage::FibSet { entries } => {
            let parsed: Result<Vec<_>, _> = entries
                .iter()
                .map(|e| parse_eid(&e.eid).map(|eid| (eid, e.next_hop())))
                .collect();
            match parsed {
                Ok(parsed) => {
                    let mut fib = state.fib.lock().unwrap();
                    for (eid, next_hop) in parsed {
                        fib.set(eid, next_hop);
                    }
                    AgentMessage::ok()
                }
                Err(e) => e,
            }
        }
        AgentMessage::FibDel { entries } => {
            let parsed: Result<Vec<_>, _> = entries.iter().map(|e| parse_eid(&e.eid)).collect();
            match parsed {
                Ok(parsed) => {
                    let mut fib = state.fib.lock().unwrap();
                    for eid in parsed {
                        fib.remove(&eid);
                    }
                    AgentMessage::ok()
                }
                Err(e) => e,
            }
        }
        AgentMessage::FibGet => AgentMessage::Ok {
            registrations: None,
            fib: Some(state.fib.lock().unwrap().to_messages()),
            bundles: None,
            report: None,
        },
        AgentMessage::BundleRecv => AgentMessage::Ok {
            registrations: None,
            fib: None,
            bundles: Some(state.received.lock().unwrap().clone()),
            report: None,
        },
        AgentMessage::BundleSend { eid, payload_b64 } => {
            let eid = match parse_eid(&eid) {
                Ok(eid) => eid,
                Err(e) => return Some(e),
            };
            let payload = match B64.decode(payload_b64.as_bytes()) {
                Ok(p) => p,
                Err(err) => return Some(AgentMessage::error(format!("bad payload_b64: {err}"))),
            };
            let target = state.fib.lock().unwrap().get(&eid).copied();
            match target {
                None => AgentMessage::error(format!("no route to {eid}")),
                Some(target) => match cla_probe(&target, &payload, PROBE_TIMEOUT).await {
                    Ok(report) => AgentMessage::Ok {
                        registrations: None,
                        fib: None,
                        bundles: None,
                        report: Some(report),
                    },
                    Err(err) => AgentMessage::error(err.to_string()),
                },
            }
        }
        AgentMessage::Ok { .. } => return None,
        AgentMessage::Error { reason } => {
            tracing::warn!(%reason, "peer reported error");
            return None;
        }
    };
    Some(reply)
}
