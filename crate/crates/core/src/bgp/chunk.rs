//! Splitting large reachability sets into UPDATEs that respect the 4096
//! octet message ceiling and the one-octet NLRI count.

use thiserror::Error;

use super::message::{Update, MAX_MESSAGE_LEN};
use crate::nlri::{
    ClaEndpoint, EidEntry, ReachabilityAnnouncement, ReachabilityWithdrawal, MAX_ENTRIES,
};
use crate::EndpointId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChunkError {
    #[error("entry for {0} does not fit a single UPDATE")]
    OversizeEntry(EndpointId),
}

/// Packs entries greedily in order; `value_overhead` is the attribute value
/// length before any entry is added.
fn pack<T>(
    items: Vec<EidEntry>,
    frame_overhead: impl Fn(usize) -> usize,
    value_overhead: usize,
    mut build: impl FnMut(Vec<EidEntry>) -> T,
) -> Result<Vec<T>, ChunkError> {
    let mut out = Vec::new();
    let mut current: Vec<EidEntry> = Vec::new();
    let mut value_len = value_overhead;
    for entry in items {
        let entry_len = entry.encoded_len();
        if frame_overhead(value_overhead + entry_len) > MAX_MESSAGE_LEN {
            return Err(ChunkError::OversizeEntry(entry.eid));
        }
        if current.len() == MAX_ENTRIES || frame_overhead(value_len + entry_len) > MAX_MESSAGE_LEN {
            out.push(build(std::mem::take(&mut current)));
            value_len = value_overhead;
        }
        value_len += entry_len;
        current.push(entry);
    }
    if !current.is_empty() {
        out.push(build(current));
    }
    Ok(out)
}

/// Builds the UPDATEs announcing `entries` via `next_hop` with `as_path`.
pub fn chunk_updates(
    as_path: &[u16],
    next_hop: ClaEndpoint,
    entries: Vec<EidEntry>,
) -> Result<Vec<Update>, ChunkError> {
    let probe = |value_len: usize| {
        let skeleton = Update {
            mp_reach: None,
            ..Update::announce(
                as_path.to_vec(),
                ReachabilityAnnouncement::new(next_hop, vec![]),
            )
        };
        skeleton.encoded_len() + super::message::attr_len(value_len)
    };
    let empty = ReachabilityAnnouncement::new(next_hop, vec![]);
    pack(entries, probe, empty.encoded_len(), |chunk| {
        Update::announce(
            as_path.to_vec(),
            ReachabilityAnnouncement::new(next_hop, chunk),
        )
    })
}

/// Builds the UPDATEs withdrawing `eids` for `safi`.
pub fn chunk_withdrawals(
    as_path: &[u16],
    safi: u8,
    eids: Vec<EndpointId>,
) -> Result<Vec<Update>, ChunkError> {
    let probe = |value_len: usize| {
        let skeleton = Update {
            mp_unreach: None,
            ..Update::withdraw(as_path.to_vec(), ReachabilityWithdrawal::new(safi, []))
        };
        skeleton.encoded_len() + super::message::attr_len(value_len)
    };
    let empty = ReachabilityWithdrawal::new(safi, []);
    pack(
        eids.into_iter().map(EidEntry::new).collect(),
        probe,
        empty.encoded_len(),
        |chunk| {
            Update::withdraw(
                as_path.to_vec(),
                ReachabilityWithdrawal {
                    safi,
                    entries: chunk,
                },
            )
        },
    )
}
