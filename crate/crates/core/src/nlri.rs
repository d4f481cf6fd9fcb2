//! Wire codec for the DTN multiprotocol reachability attributes.
//!
//! `MP_REACH_NLRI` value layout (all integers big-endian):
//!
//! ```text
//! AFI (2) | SAFI (1) | NHNA length in bits (1) | NHNA (address, port)
//! Number of NLRI (1) | per entry:
//!     URI code (1) | EID length (1) | EID text | attribute count (1)
//!     per attribute: type (1) | length (2) | value
//! ```
//!
//! `MP_UNREACH_NLRI` drops the next hop and carries entries in the same form
//! with an attribute count of zero.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use thiserror::Error;

use crate::eid::{EidError, EndpointId};

/// Address family identifier provisionally assigned to DTN reachability.
pub const AFI_DTN: u16 = 23042;

pub const SAFI_MTCP: u8 = 0;
pub const SAFI_TCPCL_V3: u8 = 1;
pub const SAFI_TCPCL_V4: u8 = 2;
pub const SAFI_UDPCL: u8 = 3;

/// NHNA bit length of an IPv4 address followed by a port.
pub const NHNA_BITS_V4: u8 = 48;
/// NHNA bit length of an IPv6 address followed by a port.
pub const NHNA_BITS_V6: u8 = 144;

pub const MAX_ENTRIES: usize = 255;
pub const MAX_ATTRIBUTES: usize = 255;
pub const MAX_ATTRIBUTE_LEN: usize = u16::MAX as usize;

/// Whether `safi` names a convergence layer this codec knows how to address.
pub fn is_known_safi(safi: u8) -> bool {
    safi <= SAFI_UDPCL
}

pub fn safi_name(safi: u8) -> &'static str {
    match safi {
        SAFI_MTCP => "mtcp",
        SAFI_TCPCL_V3 => "tcpclv3",
        SAFI_TCPCL_V4 => "tcpclv4",
        SAFI_UDPCL => "udpcl",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NlriError {
    #[error("invariant violation: {0}")]
    Invariant(InvariantViolation),
    #[error("malformed NLRI: {0}")]
    Malformed(Malformed),
    #[error("unsupported SAFI {0}")]
    UnsupportedSafi(u8),
    #[error("unsupported next hop address length of {0} bits")]
    UnsupportedNhnaLength(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("no EID entries")]
    NoEntries,
    #[error("{0} EID entries exceed the one-octet count")]
    TooManyEntries(usize),
    #[error("{0} attributes exceed the one-octet count")]
    TooManyAttributes(usize),
    #[error("attribute value of {0} octets exceeds the two-octet length")]
    AttributeTooLong(usize),
    #[error("withdrawn EID {0} carries attributes")]
    WithdrawalAttributes(String),
    #[error("SAFI {0} has no next hop encoding")]
    UnsupportedSafi(u8),
    #[error(transparent)]
    Eid(#[from] EidError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Malformed {
    #[error("truncated in {0}")]
    Truncated(&'static str),
    #[error("bad AFI {0}")]
    BadAfi(u16),
    #[error("NLRI count of zero")]
    NoEntries,
    #[error("declared {declared} entries, found {found}")]
    CountMismatch { declared: u8, found: u8 },
    #[error("EID is not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid EID: {0}")]
    InvalidEid(EidError),
    #[error("withdrawn entry declares {0} attributes")]
    WithdrawalAttributes(u8),
    #[error("{0} trailing octets")]
    TrailingBytes(usize),
}

impl From<InvariantViolation> for NlriError {
    fn from(v: InvariantViolation) -> Self {
        NlriError::Invariant(v)
    }
}

impl From<Malformed> for NlriError {
    fn from(m: Malformed) -> Self {
        NlriError::Malformed(m)
    }
}

/// Convergence layer endpoint of a next-hop DTN node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClaEndpoint {
    pub safi: u8,
    pub addr: SocketAddr,
}

impl ClaEndpoint {
    pub fn new(safi: u8, addr: SocketAddr) -> Self {
        Self { safi, addr }
    }
}

impl fmt::Display for ClaEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", safi_name(self.safi), self.addr)
    }
}

/// Opaque auxiliary attribute bound to an EID (a public key, a node id, ...).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EidAttribute {
    pub attr_type: u8,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EidEntry {
    pub eid: EndpointId,
    pub attributes: Vec<EidAttribute>,
}

impl EidEntry {
    pub fn new(eid: EndpointId) -> Self {
        Self {
            eid,
            attributes: Vec::new(),
        }
    }

    pub fn with_attributes(eid: EndpointId, attributes: Vec<EidAttribute>) -> Self {
        Self { eid, attributes }
    }

    /// Octets this entry occupies on the wire.
    pub fn encoded_len(&self) -> usize {
        3 + self.eid.as_str().len()
            + self
                .attributes
                .iter()
                .map(|a| 3 + a.value.len())
                .sum::<usize>()
    }

    fn validate(&self) -> Result<(), InvariantViolation> {
        // Re-check in case the EID was built through a path that skipped it.
        EndpointId::new(self.eid.uri_code(), self.eid.as_str())?;
        if self.attributes.len() > MAX_ATTRIBUTES {
            return Err(InvariantViolation::TooManyAttributes(self.attributes.len()));
        }
        if let Some(a) = self
            .attributes
            .iter()
            .find(|a| a.value.len() > MAX_ATTRIBUTE_LEN)
        {
            return Err(InvariantViolation::AttributeTooLong(a.value.len()));
        }
        Ok(())
    }
}

/// EIDs reachable through one next-hop CLA endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityAnnouncement {
    pub next_hop: ClaEndpoint,
    pub entries: Vec<EidEntry>,
}

impl ReachabilityAnnouncement {
    pub fn new(next_hop: ClaEndpoint, entries: Vec<EidEntry>) -> Self {
        Self { next_hop, entries }
    }

    pub fn afi(&self) -> u16 {
        AFI_DTN
    }

    pub fn safi(&self) -> u8 {
        self.next_hop.safi
    }

    pub fn validate(&self) -> Result<(), NlriError> {
        check_entry_count(self.entries.len())?;
        nhna_bits(&self.next_hop)?;
        self.entries.iter().try_for_each(EidEntry::validate)?;
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        let nhna = match self.next_hop.addr {
            SocketAddr::V4(_) => 6,
            SocketAddr::V6(_) => 18,
        };
        5 + nhna
            + self
                .entries
                .iter()
                .map(EidEntry::encoded_len)
                .sum::<usize>()
    }
}

/// EIDs no longer reachable for a SAFI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityWithdrawal {
    pub safi: u8,
    pub entries: Vec<EidEntry>,
}

impl ReachabilityWithdrawal {
    pub fn new(safi: u8, eids: impl IntoIterator<Item = EndpointId>) -> Self {
        Self {
            safi,
            entries: eids.into_iter().map(EidEntry::new).collect(),
        }
    }

    pub fn afi(&self) -> u16 {
        AFI_DTN
    }

    pub fn validate(&self) -> Result<(), NlriError> {
        check_entry_count(self.entries.len())?;
        if !is_known_safi(self.safi) {
            return Err(InvariantViolation::UnsupportedSafi(self.safi).into());
        }
        for entry in &self.entries {
            if !entry.attributes.is_empty() {
                return Err(InvariantViolation::WithdrawalAttributes(entry.eid.to_string()).into());
            }
            entry.validate()?;
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        4 + self
            .entries
            .iter()
            .map(EidEntry::encoded_len)
            .sum::<usize>()
    }
}

fn check_entry_count(n: usize) -> Result<(), InvariantViolation> {
    match n {
        0 => Err(InvariantViolation::NoEntries),
        n if n > MAX_ENTRIES => Err(InvariantViolation::TooManyEntries(n)),
        _ => Ok(()),
    }
}

fn nhna_bits(e: &ClaEndpoint) -> Result<u8, InvariantViolation> {
    if !is_known_safi(e.safi) {
        return Err(InvariantViolation::UnsupportedSafi(e.safi));
    }
    Ok(match e.addr {
        SocketAddr::V4(_) => NHNA_BITS_V4,
        SocketAddr::V6(_) => NHNA_BITS_V6,
    })
}

/// Encodes the next hop as `(bit length, address ‖ port)`.
pub fn encode_nhna(e: &ClaEndpoint) -> Result<(u8, Vec<u8>), NlriError> {
    let bits = nhna_bits(e)?;
    let mut out = Vec::with_capacity(usize::from(bits / 8));
    match e.addr.ip() {
        IpAddr::V4(ip) => out.extend_from_slice(&ip.octets()),
        IpAddr::V6(ip) => out.extend_from_slice(&ip.octets()),
    }
    out.extend_from_slice(&e.addr.port().to_be_bytes());
    Ok((bits, out))
}

pub fn decode_nhna(safi: u8, bit_len: u8, bytes: &[u8]) -> Result<ClaEndpoint, NlriError> {
    if !is_known_safi(safi) {
        return Err(NlriError::UnsupportedSafi(safi));
    }
    let ip: IpAddr = match (bit_len, bytes.len()) {
        (NHNA_BITS_V4, 6) => Ipv4Addr::from(<[u8; 4]>::try_from(&bytes[..4]).unwrap()).into(),
        (NHNA_BITS_V6, 18) => Ipv6Addr::from(<[u8; 16]>::try_from(&bytes[..16]).unwrap()).into(),
        (NHNA_BITS_V4 | NHNA_BITS_V6, _) => return Err(Malformed::Truncated("next hop").into()),
        _ => return Err(NlriError::UnsupportedNhnaLength(bit_len)),
    };
    let port = u16::from_be_bytes([bytes[bytes.len() - 2], bytes[bytes.len() - 1]]);
    Ok(ClaEndpoint::new(safi, SocketAddr::new(ip, port)))
}

pub fn encode_mp_reach(a: &ReachabilityAnnouncement) -> Result<Vec<u8>, NlriError> {
    a.validate()?;
    let mut out = Vec::with_capacity(a.encoded_len());
    out.extend_from_slice(&AFI_DTN.to_be_bytes());
    out.push(a.next_hop.safi);
    let (bits, nhna) = encode_nhna(&a.next_hop)?;
    out.push(bits);
    out.extend_from_slice(&nhna);
    put_entries(&mut out, &a.entries);
    Ok(out)
}

pub fn encode_mp_unreach(w: &ReachabilityWithdrawal) -> Result<Vec<u8>, NlriError> {
    w.validate()?;
    let mut out = Vec::with_capacity(w.encoded_len());
    out.extend_from_slice(&AFI_DTN.to_be_bytes());
    out.push(w.safi);
    put_entries(&mut out, &w.entries);
    Ok(out)
}

fn put_entries(out: &mut Vec<u8>, entries: &[EidEntry]) {
    out.push(entries.len() as u8);
    for entry in entries {
        let text = entry.eid.as_str().as_bytes();
        out.push(entry.eid.uri_code());
        out.push(text.len() as u8);
        out.extend_from_slice(text);
        out.push(entry.attributes.len() as u8);
        for attr in &entry.attributes {
            out.push(attr.attr_type);
            out.extend_from_slice(&(attr.value.len() as u16).to_be_bytes());
            out.extend_from_slice(&attr.value);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], Malformed> {
        if self.buf.len() < n {
            return Err(Malformed::Truncated(field));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, Malformed> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, Malformed> {
        let b = self.take(2, field)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<u8, NlriError> {
    let afi = r.u16("AFI")?;
    if afi != AFI_DTN {
        return Err(Malformed::BadAfi(afi).into());
    }
    let safi = r.u8("SAFI")?;
    if !is_known_safi(safi) {
        return Err(NlriError::UnsupportedSafi(safi));
    }
    Ok(safi)
}

fn read_entries(r: &mut Reader<'_>, withdrawal: bool) -> Result<Vec<EidEntry>, NlriError> {
    let declared = r.u8("NLRI count")?;
    if declared == 0 {
        return Err(Malformed::NoEntries.into());
    }
    let mut entries = Vec::with_capacity(usize::from(declared));
    for found in 0..declared {
        if r.is_empty() {
            return Err(Malformed::CountMismatch { declared, found }.into());
        }
        entries.push(read_entry(r, withdrawal)?);
    }
    if !r.is_empty() {
        return Err(Malformed::TrailingBytes(r.buf.len()).into());
    }
    Ok(entries)
}

fn read_entry(r: &mut Reader<'_>, withdrawal: bool) -> Result<EidEntry, NlriError> {
    let code = r.u8("URI code")?;
    let len = r.u8("EID length")?;
    let raw = r.take(usize::from(len), "EID value")?;
    let text = std::str::from_utf8(raw).map_err(|_| Malformed::InvalidUtf8)?;
    let eid = EndpointId::new(code, text).map_err(Malformed::InvalidEid)?;
    let count = r.u8("attribute count")?;
    if withdrawal && count != 0 {
        return Err(Malformed::WithdrawalAttributes(count).into());
    }
    let mut attributes = Vec::with_capacity(usize::from(count));
    for _ in 0..count {
        let attr_type = r.u8("attribute type")?;
        let len = r.u16("attribute length")?;
        let value = r.take(usize::from(len), "attribute value")?.to_vec();
        attributes.push(EidAttribute { attr_type, value });
    }
    Ok(EidEntry { eid, attributes })
}

pub fn decode_mp_reach(bytes: &[u8]) -> Result<ReachabilityAnnouncement, NlriError> {
    let mut r = Reader { buf: bytes };
    let safi = read_header(&mut r)?;
    let bits = r.u8("NHNA length")?;
    if bits != NHNA_BITS_V4 && bits != NHNA_BITS_V6 {
        return Err(NlriError::UnsupportedNhnaLength(bits));
    }
    let nhna = r.take(usize::from(bits / 8), "next hop")?;
    let next_hop = decode_nhna(safi, bits, nhna)?;
    let entries = read_entries(&mut r, false)?;
    Ok(ReachabilityAnnouncement { next_hop, entries })
}

pub fn decode_mp_unreach(bytes: &[u8]) -> Result<ReachabilityWithdrawal, NlriError> {
    let mut r = Reader { buf: bytes };
    let safi = read_header(&mut r)?;
    let entries = read_entries(&mut r, true)?;
    Ok(ReachabilityWithdrawal { safi, entries })
}
