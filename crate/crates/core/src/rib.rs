//! Reachability RIB: per-EID route sets, best-route selection and export.
//!
//! Every mutation returns a [`RibDelta`] describing changes to the
//! *selected* route of each EID. Deltas drive both FIB programming on the
//! local Bundle Protocol agent and re-advertisement to peers.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::net::{Ipv4Addr, SocketAddr};

use serde::Serialize;
use thiserror::Error;

use crate::bgp::{Outgoing, PeerId};
use crate::nlri::{
    ClaEndpoint, EidAttribute, EidEntry, ReachabilityAnnouncement, ReachabilityWithdrawal,
};
use crate::EndpointId;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RouteSource {
    /// Originated by the local Bundle Protocol agent.
    Local,
    Peer {
        peer: PeerId,
        bgp_id: Ipv4Addr,
        as_path: Vec<u16>,
    },
}

impl RouteSource {
    pub fn peer(peer: PeerId, bgp_id: Ipv4Addr, as_path: Vec<u16>) -> Self {
        RouteSource::Peer {
            peer,
            bgp_id,
            as_path,
        }
    }

    pub fn as_path(&self) -> &[u16] {
        match self {
            RouteSource::Local => &[],
            RouteSource::Peer { as_path, .. } => as_path,
        }
    }

    pub fn peer_id(&self) -> Option<&PeerId> {
        match self {
            RouteSource::Local => None,
            RouteSource::Peer { peer, .. } => Some(peer),
        }
    }

    fn same_origin(&self, other: &RouteSource) -> bool {
        match (self, other) {
            (RouteSource::Local, RouteSource::Local) => true,
            (RouteSource::Peer { peer: a, .. }, RouteSource::Peer { peer: b, .. }) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub source: RouteSource,
    pub next_hop: ClaEndpoint,
    pub attributes: Vec<EidAttribute>,
    /// Logical insertion time; strictly increasing across the RIB.
    pub learned_at: u64,
}

impl Route {
    fn selected(&self, eid: &EndpointId) -> SelectedRoute {
        SelectedRoute {
            eid: eid.clone(),
            next_hop: self.next_hop,
            attributes: self.attributes.clone(),
            source: self.source.clone(),
        }
    }
}

/// Route preference: Local first, then shorter AS path, lower BGP
/// identifier, earlier arrival.
pub fn compare_routes(a: &Route, b: &Route) -> Ordering {
    let rank = |r: &Route| match &r.source {
        RouteSource::Local => (0u8, 0usize, 0u32),
        RouteSource::Peer {
            bgp_id, as_path, ..
        } => (1, as_path.len(), u32::from(*bgp_id)),
    };
    rank(a).cmp(&rank(b)).then(a.learned_at.cmp(&b.learned_at))
}

pub fn select_best(routes: &[Route]) -> Option<&Route> {
    routes.iter().min_by(|a, b| compare_routes(a, b))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RibEntry {
    pub eid: EndpointId,
    pub routes: Vec<Route>,
    selected: Option<usize>,
}

impl RibEntry {
    pub fn selected(&self) -> Option<&Route> {
        self.selected.map(|i| &self.routes[i])
    }

    fn reselect(&mut self) {
        self.selected = self
            .routes
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| compare_routes(a, b))
            .map(|(i, _)| i);
    }
}

/// The selected route of one EID as seen by consumers of deltas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedRoute {
    pub eid: EndpointId,
    pub next_hop: ClaEndpoint,
    pub attributes: Vec<EidAttribute>,
    pub source: RouteSource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RibDelta {
    /// EIDs whose selected route was added or changed.
    pub updated: Vec<SelectedRoute>,
    /// EIDs that no longer have any route.
    pub removed: Vec<EndpointId>,
}

impl RibDelta {
    pub fn is_empty(&self) -> bool {
        self.updated.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RibError {
    /// The announcement's AS path contains the local ASN. Its routes were
    /// not installed; routes previously learned from the same source for
    /// those EIDs were dropped, as reported in `delta`.
    #[error("AS path contains local AS{asn}")]
    LoopDetected { asn: u16, delta: RibDelta },
}

#[derive(Debug, Clone)]
pub struct Rib {
    local_asn: u16,
    entries: BTreeMap<EndpointId, RibEntry>,
    clock: u64,
    loops_detected: u64,
}

impl Rib {
    pub fn new(local_asn: u16) -> Self {
        Self {
            local_asn,
            entries: BTreeMap::new(),
            clock: 0,
            loops_detected: 0,
        }
    }

    pub fn local_asn(&self) -> u16 {
        self.local_asn
    }

    pub fn loops_detected(&self) -> u64 {
        self.loops_detected
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, eid: &EndpointId) -> Option<&RibEntry> {
        self.entries.get(eid)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RibEntry> {
        self.entries.values()
    }

    /// Every selected route in EID order.
    pub fn selected_routes(&self) -> Vec<SelectedRoute> {
        self.entries
            .values()
            .filter_map(|e| e.selected().map(|r| r.selected(&e.eid)))
            .collect()
    }

    /// A delta that announces the whole table, used for full resends.
    pub fn full_delta(&self) -> RibDelta {
        RibDelta {
            updated: self.selected_routes(),
            removed: Vec::new(),
        }
    }

    pub fn apply_announcement(
        &mut self,
        source: RouteSource,
        a: &ReachabilityAnnouncement,
    ) -> Result<RibDelta, RibError> {
        if source.as_path().contains(&self.local_asn) {
            self.loops_detected += 1;
            let eids: Vec<_> = a.entries.iter().map(|e| e.eid.clone()).collect();
            let delta = self.mutate(&eids, |rib, eid| rib.remove_route(eid, &source));
            return Err(RibError::LoopDetected {
                asn: self.local_asn,
                delta,
            });
        }
        let eids: Vec<_> = a.entries.iter().map(|e| e.eid.clone()).collect();
        let mut by_eid: HashMap<&EndpointId, &EidEntry> = HashMap::new();
        for entry in &a.entries {
            by_eid.insert(&entry.eid, entry);
        }
        Ok(self.mutate(&eids, |rib, eid| {
            let entry = by_eid[eid];
            rib.clock += 1;
            let route = Route {
                source: source.clone(),
                next_hop: a.next_hop,
                attributes: entry.attributes.clone(),
                learned_at: rib.clock,
            };
            let slot = rib.entries.entry(eid.clone()).or_insert_with(|| RibEntry {
                eid: eid.clone(),
                routes: Vec::new(),
                selected: None,
            });
            match slot
                .routes
                .iter_mut()
                .find(|r| r.source.same_origin(&source))
            {
                Some(existing) => *existing = route,
                None => slot.routes.push(route),
            }
            slot.reselect();
        }))
    }

    /// Removes `source`'s routes for the listed EIDs. Routes are matched by
    /// EID alone since each source holds at most one route per EID.
    pub fn apply_withdrawal(
        &mut self,
        source: &RouteSource,
        w: &ReachabilityWithdrawal,
    ) -> RibDelta {
        let eids: Vec<_> = w.entries.iter().map(|e| e.eid.clone()).collect();
        self.mutate(&eids, |rib, eid| rib.remove_route(eid, source))
    }

    pub fn drop_peer(&mut self, peer: &PeerId) -> RibDelta {
        let eids: Vec<_> = self
            .entries
            .values()
            .filter(|e| e.routes.iter().any(|r| r.source.peer_id() == Some(peer)))
            .map(|e| e.eid.clone())
            .collect();
        let marker = RouteSource::peer(peer.clone(), Ipv4Addr::UNSPECIFIED, vec![]);
        self.mutate(&eids, |rib, eid| rib.remove_route(eid, &marker))
    }

    fn remove_route(&mut self, eid: &EndpointId, source: &RouteSource) {
        let Some(entry) = self.entries.get_mut(eid) else {
            return;
        };
        entry.routes.retain(|r| !r.source.same_origin(source));
        if entry.routes.is_empty() {
            self.entries.remove(eid);
        } else {
            entry.reselect();
        }
    }

    /// Runs `f` for each EID and reports selected-route changes in the order
    /// EIDs were first listed.
    fn mutate(
        &mut self,
        eids: &[EndpointId],
        mut f: impl FnMut(&mut Self, &EndpointId),
    ) -> RibDelta {
        let mut before: Vec<(EndpointId, Option<SelectedRoute>)> = Vec::new();
        for eid in eids {
            if !before.iter().any(|(e, _)| e == eid) {
                let old = self
                    .entries
                    .get(eid)
                    .and_then(|e| e.selected().map(|r| r.selected(eid)));
                before.push((eid.clone(), old));
            }
            f(self, eid);
        }
        let mut delta = RibDelta::default();
        for (eid, old) in before {
            let new = self
                .entries
                .get(&eid)
                .and_then(|e| e.selected().map(|r| r.selected(&eid)));
            match (old, new) {
                (Some(_), None) => delta.removed.push(eid),
                (old, Some(new)) if old.as_ref() != Some(&new) => delta.updated.push(new),
                _ => {}
            }
        }
        delta
    }

    pub fn dump(&self) -> Vec<DumpRow> {
        self.entries
            .values()
            .filter_map(|e| e.selected().map(|r| DumpRow::new(&e.eid, r)))
            .collect()
    }
}

/// One line of the RIB inspection dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct DumpRow {
    pub eid: String,
    pub next_hop: SocketAddr,
    pub safi: u8,
    pub as_path: Vec<u16>,
    pub source: String,
    pub attr_count: usize,
}

impl DumpRow {
    fn new(eid: &EndpointId, r: &Route) -> Self {
        Self {
            eid: eid.to_string(),
            next_hop: r.next_hop.addr,
            safi: r.next_hop.safi,
            as_path: r.source.as_path().to_vec(),
            source: match &r.source {
                RouteSource::Local => "local".to_owned(),
                RouteSource::Peer { bgp_id, .. } => format!("peer {bgp_id}"),
            },
            attr_count: r.attributes.len(),
        }
    }
}

/// Renders rows as `eid | next_hop | safi | as_path | source | attr_count`,
/// sorted by EID text.
pub fn render_dump(rows: &[DumpRow]) -> String {
    let mut rows: Vec<_> = rows.iter().collect();
    rows.sort_by(|a, b| a.eid.cmp(&b.eid));
    let mut out = String::new();
    for row in rows {
        let path = if row.as_path.is_empty() {
            "-".to_owned()
        } else {
            row.as_path
                .iter()
                .map(u16::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            out,
            "{} | {} | {} | {} | {} | {}",
            row.eid, row.next_hop, row.safi, path, row.source, row.attr_count
        );
    }
    out
}

/// Computes what to send `peer` for `delta`.
///
/// `local_clas` holds this node's own CLA endpoint per SAFI, restricted to
/// SAFIs usable on the session. Exported routes carry next hop = our
/// endpoint for the route's SAFI. Routes learned from `peer` itself, or
/// whose SAFI has no local endpoint, are withdrawn instead since an earlier
/// selected route for the same EID may have been advertised.
pub fn export_for_peer(
    peer: &PeerId,
    delta: &RibDelta,
    local_clas: &BTreeMap<u8, ClaEndpoint>,
) -> Vec<Outgoing> {
    let Some(withdraw_safi) = local_clas.keys().next().copied() else {
        return Vec::new();
    };
    let mut withdrawn: Vec<EndpointId> = delta.removed.clone();
    let mut groups: Vec<(Vec<u16>, ClaEndpoint, Vec<EidEntry>)> = Vec::new();
    for route in &delta.updated {
        let own = local_clas.get(&route.next_hop.safi);
        match own {
            Some(own) if route.source.peer_id() != Some(peer) => {
                let path = route.source.as_path();
                let entry = EidEntry::with_attributes(route.eid.clone(), route.attributes.clone());
                match groups.iter_mut().find(|(p, nh, _)| p == path && nh == own) {
                    Some((_, _, entries)) => entries.push(entry),
                    None => groups.push((path.to_vec(), *own, vec![entry])),
                }
            }
            _ => withdrawn.push(route.eid.clone()),
        }
    }
    let mut out = Vec::new();
    if !withdrawn.is_empty() {
        out.push(Outgoing::Withdraw {
            safi: withdraw_safi,
            eids: withdrawn,
        });
    }
    out.extend(
        groups
            .into_iter()
            .map(|(as_path, next_hop, entries)| Outgoing::Announce {
                as_path,
                next_hop,
                entries,
            }),
    );
    out
}
