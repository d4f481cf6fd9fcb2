//! Scripted multi-node runs on loopback.
//!
//! A scenario file lists nodes (each an inline node configuration plus a
//! name) and a timeline of events. Expectations poll node snapshots every
//! 100 ms until they hold or their timeout elapses.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{render_fib, AgentClient};
use crate::bgp::{PeerId, SessionState};
use crate::erds::ErdsConfig;
use crate::node::{NodeError, NodeHandle};
use crate::EndpointId;

pub const POLL_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("setup failed: {0}")]
    Setup(#[from] NodeError),
    #[error("setup failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<ScenarioNode>,
    #[serde(default)]
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioNode {
    pub name: String,
    #[serde(flatten)]
    pub config: ErdsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    /// Seconds since the scenario started.
    #[serde(default)]
    pub at: f64,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Register {
        node: String,
        eid: String,
        cla: String,
    },
    Deregister {
        node: String,
        eid: String,
    },
    /// Waits for the session from `node` towards `peer` to be Established.
    ExpectEstablished {
        node: String,
        peer: String,
        timeout: f64,
    },
    ExpectRib {
        node: String,
        eid: String,
        #[serde(default = "yes")]
        present: bool,
        #[serde(default)]
        next_hop: Option<SocketAddr>,
        #[serde(default)]
        as_path_len: Option<usize>,
        timeout: f64,
    },
    ExpectFib {
        node: String,
        eid: String,
        #[serde(default = "yes")]
        present: bool,
        #[serde(default)]
        next_hop: Option<SocketAddr>,
        timeout: f64,
    },
    /// Sends `payload` from `node` towards `eid` through its FIB and, when
    /// `deliver_to` is set, waits until that node logged the same bytes.
    Probe {
        node: String,
        eid: String,
        payload: String,
        #[serde(default)]
        deliver_to: Option<String>,
        timeout: f64,
    },
    KillPeer {
        node: String,
        peer: String,
    },
    /// No node holds a route whose AS path contains its own ASN.
    ExpectNoLoops {
        timeout: f64,
    },
    /// The UPDATE count summed over all nodes does not change for `window`
    /// seconds.
    ExpectQuiet {
        window: f64,
    },
}

fn yes() -> bool {
    true
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Register { .. } => "register",
            Action::Deregister { .. } => "deregister",
            Action::ExpectEstablished { .. } => "expect_established",
            Action::ExpectRib { .. } => "expect_rib",
            Action::ExpectFib { .. } => "expect_fib",
            Action::Probe { .. } => "probe",
            Action::KillPeer { .. } => "kill_peer",
            Action::ExpectNoLoops { .. } => "expect_no_loops",
            Action::ExpectQuiet { .. } => "expect_quiet",
        }
    }

    fn nodes(&self) -> Vec<&str> {
        match self {
            Action::Register { node, .. }
            | Action::Deregister { node, .. }
            | Action::ExpectRib { node, .. }
            | Action::ExpectFib { node, .. } => vec![node],
            Action::ExpectEstablished { node, peer, .. } | Action::KillPeer { node, peer } => {
                vec![node, peer]
            }
            Action::Probe {
                node, deliver_to, ..
            } => {
                let mut v = vec![node.as_str()];
                v.extend(deliver_to.as_deref());
                v
            }
            Action::ExpectNoLoops { .. } | Action::ExpectQuiet { .. } => vec![],
        }
    }
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut file: Self = text.parse()?;
        if file.name.is_empty() {
            file.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        let mut names = BTreeMap::new();
        for node in &self.nodes {
            if names.insert(node.name.as_str(), node).is_some() {
                return invalid(format!("duplicate node {:?}", node.name));
            }
            node.config
                .validate()
                .map_err(|e| ScenarioError::Invalid(format!("node {}: {e}", node.name)))?;
        }
        let mut last = 0.0;
        for (i, event) in self.events.iter().enumerate() {
            if event.at.is_nan() || event.at < last {
                return invalid(format!("event {i}: time {} precedes {last}", event.at));
            }
            last = event.at;
            for node in event.action.nodes() {
                if !names.contains_key(node) {
                    return invalid(format!("event {i}: unknown node {node:?}"));
                }
            }
            if let Action::ExpectEstablished { node, peer, .. } | Action::KillPeer { node, peer } =
                &event.action
            {
                let asn = names[peer.as_str()].config.node.asn;
                if !names[node.as_str()]
                    .config
                    .peers
                    .iter()
                    .any(|p| p.remote_asn == asn)
                {
                    return invalid(format!("event {i}: {node} has no peer {peer}"));
                }
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for ScenarioFile {
    type Err = ScenarioError;

    fn from_str(text: &str) -> Result<Self, ScenarioError> {
        let file: Self = toml::from_str(text)?;
        file.validate()?;
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    pub index: usize,
    pub label: String,
    pub action: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Seconds from scenario start until the step finished.
    pub finished_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeDump {
    pub rib: String,
    pub fib: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: Vec<StepResult>,
    /// Final RIB and FIB dump text per node.
    pub dumps: BTreeMap<String, NodeDump>,
    pub updates_sent: u64,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &StepResult> {
        self.steps.iter().filter(|s| !s.passed)
    }
}

impl StepResult {
    pub fn line(&self) -> String {
        format!(
            "[{:6.2}s] {} {}: {}",
            self.finished_at,
            if self.passed { "ok  " } else { "FAIL" },
            self.label,
            self.detail
        )
    }
}

/// Runs the scenario to completion. Nodes are shut down before returning.
/// Logs go to `log_dir/<node>.log` and `log_dir/scenario.log` when given.
pub fn run_scenario(
    file: &ScenarioFile,
    log_dir: Option<&Path>,
) -> Result<ScenarioReport, ScenarioError> {
    file.validate()?;
    if let Some(dir) = log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut nodes = BTreeMap::new();
    for node in &file.nodes {
        let log = log_dir.map(|d| d.join(format!("{}.log", node.name)));
        let handle = NodeHandle::start(&node.name, node.config.clone(), log.as_deref())?;
        nodes.insert(node.name.clone(), handle);
    }

    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    let start = Instant::now();
    let mut steps = Vec::new();
    for (index, event) in file.events.iter().enumerate() {
        let due = start + Duration::from_secs_f64(event.at);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let label = event
            .label
            .clone()
            .unwrap_or_else(|| format!("event {index} ({})", event.action.name()));
        let outcome = runtime.block_on(execute(&event.action, &nodes));
        let (passed, detail) = match outcome {
            Ok(detail) => (true, detail),
            Err(detail) => (false, detail),
        };
        steps.push(StepResult {
            index,
            label,
            action: event.action.name(),
            passed,
            detail,
            finished_at: start.elapsed().as_secs_f64(),
        });
    }

    let dumps = nodes
        .iter()
        .map(|(name, n)| {
            let fib = render_fib(&n.fib().to_messages());
            (
                name.clone(),
                NodeDump {
                    rib: n.rib_text(),
                    fib,
                },
            )
        })
        .collect();
    let updates_sent = total_updates(&nodes);
    for node in nodes.into_values() {
        node.shutdown();
    }
    let report = ScenarioReport {
        name: file.name.clone(),
        steps,
        dumps,
        updates_sent,
    };
    if let Some(dir) = log_dir {
        let mut journal: String = report.steps.iter().map(|s| s.line() + "\n").collect();
        journal.push_str(if report.passed() { "PASS\n" } else { "FAIL\n" });
        std::fs::write(dir.join("scenario.log"), journal)?;
    }
    Ok(report)
}

fn total_updates(nodes: &BTreeMap<String, NodeHandle>) -> u64 {
    use std::sync::atomic::Ordering;
    nodes
        .values()
        .map(|n| n.stats().updates_sent.load(Ordering::Relaxed))
        .sum()
}

fn peer_id(nodes: &BTreeMap<String, NodeHandle>, node: &str, peer: &str) -> Result<PeerId, String> {
    let asn = nodes[peer].config().node.asn;
    nodes[node]
        .peer_for_asn(asn)
        .ok_or_else(|| format!("{node} has no peer {peer}"))
}

fn parse_eid(text: &str) -> Result<EndpointId, String> {
    EndpointId::parse(text).map_err(|e| e.to_string())
}

/// Polls `check` until it returns `Ok` or `timeout` elapses; the last
/// error is reported.
async fn poll<T>(timeout: f64, mut check: impl FnMut() -> Result<T, String>) -> Result<T, String> {
    let deadline = Instant::now() + Duration::from_secs_f64(timeout);
    loop {
        match check() {
            Ok(v) => return Ok(v),
            Err(e) if Instant::now() >= deadline => {
                return Err(format!("timed out after {timeout}s: {e}"))
            }
            Err(_) => tokio::time::sleep(POLL_INTERVAL).await,
        }
    }
}

async fn execute(action: &Action, nodes: &BTreeMap<String, NodeHandle>) -> Result<String, String> {
    match action {
        Action::Register { node, eid, cla } => {
            let mut client = AgentClient::connect(nodes[node].agent().local_addr())
                .await
                .map_err(|e| e.to_string())?;
            client.register(eid, cla).await.map_err(|e| e.to_string())?;
            Ok(format!("{node} registered {eid} on {cla}"))
        }
        Action::Deregister { node, eid } => {
            let mut client = AgentClient::connect(nodes[node].agent().local_addr())
                .await
                .map_err(|e| e.to_string())?;
            client.deregister(eid).await.map_err(|e| e.to_string())?;
            Ok(format!("{node} deregistered {eid}"))
        }
        Action::ExpectEstablished {
            node,
            peer,
            timeout,
        } => {
            let id = peer_id(nodes, node, peer)?;
            poll(*timeout, || match nodes[node].peer_state(&id) {
                Some(SessionState::Established) => Ok(()),
                other => Err(format!("session {node}->{peer} is {other:?}")),
            })
            .await?;
            Ok(format!("session {node}->{peer} established"))
        }
        Action::ExpectRib {
            node,
            eid,
            present,
            next_hop,
            as_path_len,
            timeout,
        } => {
            let eid = parse_eid(eid)?;
            let text = eid.to_string();
            poll(*timeout, || {
                let rows = nodes[node].rib_rows();
                let row = rows.iter().find(|r| r.eid == text);
                match (row, present) {
                    (None, false) => Ok(format!("{node} RIB has no {text}")),
                    (Some(r), false) => {
                        Err(format!("{node} RIB still has {text} via {}", r.next_hop))
                    }
                    (None, true) => Err(format!("{node} RIB has no {text}")),
                    (Some(r), true) => {
                        if let Some(nh) = next_hop {
                            if r.next_hop != *nh {
                                return Err(format!(
                                    "{text} next hop is {}, want {nh}",
                                    r.next_hop
                                ));
                            }
                        }
                        if let Some(len) = as_path_len {
                            if r.as_path.len() != *len {
                                return Err(format!(
                                    "{text} AS path {:?}, want length {len}",
                                    r.as_path
                                ));
                            }
                        }
                        Ok(format!(
                            "{node} RIB has {text} via {} path {:?} ({})",
                            r.next_hop, r.as_path, r.source
                        ))
                    }
                }
            })
            .await
        }
        Action::ExpectFib {
            node,
            eid,
            present,
            next_hop,
            timeout,
        } => {
            let eid = parse_eid(eid)?;
            poll(*timeout, || {
                let fib = nodes[node].fib();
                match (fib.get(&eid), present) {
                    (None, false) => Ok(format!("{node} FIB has no {eid}")),
                    (Some(nh), false) => Err(format!("{node} FIB still has {eid} via {}", nh.addr)),
                    (None, true) => Err(format!("{node} FIB has no {eid}")),
                    (Some(nh), true) => match next_hop {
                        Some(want) if nh.addr != *want => {
                            Err(format!("{eid} FIB next hop {}, want {want}", nh.addr))
                        }
                        _ => Ok(format!("{node} FIB has {eid} via {nh}")),
                    },
                }
            })
            .await
        }
        Action::Probe {
            node,
            eid,
            payload,
            deliver_to,
            timeout,
        } => {
            parse_eid(eid)?;
            let before = deliver_to
                .as_ref()
                .map(|d| nodes[d].agent().received().len());
            let mut client = AgentClient::connect(nodes[node].agent().local_addr())
                .await
                .map_err(|e| e.to_string())?;
            let report = client
                .send_bundle(eid, payload.as_bytes())
                .await
                .map_err(|e| e.to_string())?;
            let mut detail = format!(
                "{node} sent {} bytes to {eid} in {:.1} ms",
                report.bytes, report.rtt_ms
            );
            if let (Some(target), Some(before)) = (deliver_to, before) {
                let want = base64::engine::general_purpose::STANDARD.encode(payload.as_bytes());
                poll(*timeout, || {
                    let received = nodes[target].agent().received();
                    if received[before.min(received.len())..]
                        .iter()
                        .any(|r| r.payload_b64 == want)
                    {
                        Ok(())
                    } else {
                        Err(format!("{target} has not received the payload"))
                    }
                })
                .await?;
                detail.push_str(&format!(", {target} received identical payload"));
            }
            Ok(detail)
        }
        Action::KillPeer { node, peer } => {
            let id = peer_id(nodes, node, peer)?;
            nodes[node].kill_peer(&id);
            Ok(format!("{node} shut down session to {peer}"))
        }
        Action::ExpectNoLoops { timeout } => {
            poll(*timeout, || {
                for (name, n) in nodes {
                    let asn = n.config().node.asn;
                    if let Some(r) = n.rib_rows().iter().find(|r| r.as_path.contains(&asn)) {
                        return Err(format!(
                            "{name} holds {} with looped path {:?}",
                            r.eid, r.as_path
                        ));
                    }
                }
                Ok("no RIB holds a path containing its own ASN".to_string())
            })
            .await
        }
        Action::ExpectQuiet { window } => {
            let before = total_updates(nodes);
            tokio::time::sleep(Duration::from_secs_f64(*window)).await;
            let after = total_updates(nodes);
            if before == after {
                Ok(format!("UPDATE count stayed at {after} for {window}s"))
            } else {
                Err(format!(
                    "UPDATE count went from {before} to {after} in {window}s"
                ))
            }
        }
    }
}
