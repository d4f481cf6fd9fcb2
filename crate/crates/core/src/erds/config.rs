use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bgp::{PeerConfig, PeerId, PeerMode};
use crate::nlri::{is_known_safi, ClaEndpoint};

pub const DEFAULT_HOLD: u16 = 90;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Node configuration, one file per ERDS instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErdsConfig {
    pub node: NodeSection,
    #[serde(default, rename = "cla")]
    pub clas: Vec<ClaSection>,
    pub bp: BpSection,
    #[serde(default, rename = "peer")]
    pub peers: Vec<PeerSection>,
    #[serde(default)]
    pub timers: TimersSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub asn: u16,
    pub bgp_id: Ipv4Addr,
    /// BGP listen address. Required when any peer is passive.
    #[serde(default)]
    pub listen: Option<SocketAddr>,
    #[serde(default)]
    pub rib_dump_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaSection {
    pub name: String,
    pub safi: u8,
    pub host: IpAddr,
    pub port: u16,
}

impl ClaSection {
    pub fn endpoint(&self) -> ClaEndpoint {
        ClaEndpoint::new(self.safi, SocketAddr::new(self.host, self.port))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpSection {
    pub listen: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSection {
    pub host: IpAddr,
    pub port: u16,
    pub remote_asn: u16,
    #[serde(default = "default_mode")]
    pub mode: PeerMode,
}

fn default_mode() -> PeerMode {
    PeerMode::Active
}

impl PeerSection {
    pub fn id(&self) -> PeerId {
        PeerId::new(format!(
            "AS{}@{}",
            self.remote_asn,
            SocketAddr::new(self.host, self.port)
        ))
    }

    pub fn to_peer_config(&self) -> PeerConfig {
        PeerConfig {
            id: self.id(),
            addr: SocketAddr::new(self.host, self.port),
            remote_asn: self.remote_asn,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimersSection {
    #[serde(default = "default_hold")]
    pub hold: u16,
}

fn default_hold() -> u16 {
    DEFAULT_HOLD
}

impl Default for TimersSection {
    fn default() -> Self {
        Self { hold: DEFAULT_HOLD }
    }
}

impl ErdsConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let config: Self = text.parse()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.node.asn == 0 {
            return invalid("node.asn must be nonzero".into());
        }
        if self.node.bgp_id.is_unspecified() {
            return invalid("node.bgp_id must be nonzero".into());
        }
        if self.timers.hold != 0 && self.timers.hold < 3 {
            return invalid(format!(
                "timers.hold {} must be 0 or at least 3",
                self.timers.hold
            ));
        }
        let mut names = BTreeSet::new();
        let mut safis = BTreeSet::new();
        for cla in &self.clas {
            if !is_known_safi(cla.safi) {
                return invalid(format!("cla {:?}: unknown SAFI {}", cla.name, cla.safi));
            }
            if !names.insert(cla.name.as_str()) {
                return invalid(format!("duplicate cla name {:?}", cla.name));
            }
            if !safis.insert(cla.safi) {
                return invalid(format!("more than one cla with SAFI {}", cla.safi));
            }
        }
        let mut ids = BTreeSet::new();
        for peer in &self.peers {
            if !ids.insert(peer.id()) {
                return invalid(format!("duplicate peer {}", peer.id()));
            }
            if peer.mode == PeerMode::Passive && self.node.listen.is_none() {
                return invalid(format!(
                    "peer {} is passive but node.listen is unset",
                    peer.id()
                ));
            }
        }
        Ok(())
    }

    /// Local CLA endpoints keyed by name.
    pub fn clas_by_name(&self) -> BTreeMap<String, ClaEndpoint> {
        self.clas
            .iter()
            .map(|c| (c.name.clone(), c.endpoint()))
            .collect()
    }

    /// Local CLA endpoints keyed by SAFI.
    pub fn clas_by_safi(&self) -> BTreeMap<u8, ClaEndpoint> {
        self.clas.iter().map(|c| (c.safi, c.endpoint())).collect()
    }
}

impl std::str::FromStr for ErdsConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }
}
