//! BGP-4 message framing with the DTN path attributes.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::nlri::{self, NlriError, ReachabilityAnnouncement, ReachabilityWithdrawal, AFI_DTN};

pub const MARKER: [u8; 16] = [0xff; 16];
pub const HEADER_LEN: usize = 19;
pub const MAX_MESSAGE_LEN: usize = 4096;
pub const BGP_VERSION: u8 = 4;

pub const MSG_OPEN: u8 = 1;
pub const MSG_UPDATE: u8 = 2;
pub const MSG_NOTIFICATION: u8 = 3;
pub const MSG_KEEPALIVE: u8 = 4;

pub const ATTR_ORIGIN: u8 = 1;
pub const ATTR_AS_PATH: u8 = 2;
pub const ATTR_MP_REACH_NLRI: u8 = 14;
pub const ATTR_MP_UNREACH_NLRI: u8 = 15;

pub const FLAG_OPTIONAL: u8 = 0x80;
pub const FLAG_TRANSITIVE: u8 = 0x40;
pub const FLAG_EXTENDED_LENGTH: u8 = 0x10;

pub const ORIGIN_INCOMPLETE: u8 = 2;

const AS_SET: u8 = 1;
const AS_SEQUENCE: u8 = 2;
const OPT_PARAM_CAPABILITIES: u8 = 2;
const CAP_MULTIPROTOCOL: u8 = 1;

/// NOTIFICATION error codes and the subcodes this speaker emits.
pub mod notify {
    pub const HEADER_ERROR: u8 = 1;
    pub const OPEN_ERROR: u8 = 2;
    pub const UPDATE_ERROR: u8 = 3;
    pub const HOLD_TIMER_EXPIRED: u8 = 4;
    pub const FSM_ERROR: u8 = 5;
    pub const CEASE: u8 = 6;

    pub const OPEN_UNSUPPORTED_VERSION: u8 = 1;
    pub const OPEN_BAD_PEER_AS: u8 = 2;
    pub const OPEN_BAD_BGP_ID: u8 = 3;
    pub const OPEN_UNACCEPTABLE_HOLD_TIME: u8 = 6;

    pub const UPDATE_MALFORMED_ATTRIBUTE_LIST: u8 = 1;
    pub const UPDATE_OPTIONAL_ATTRIBUTE_ERROR: u8 = 9;

    pub const CEASE_ADMIN_SHUTDOWN: u8 = 2;
    pub const CEASE_COLLISION: u8 = 7;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("framing error: {0}")]
    Framing(FramingError),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("attribute error: {0}")]
    Attribute(#[from] AttributeError),
    #[error("malformed OPEN: {0}")]
    Open(&'static str),
    #[error("malformed NOTIFICATION")]
    Notification,
    #[error("message of {0} octets exceeds the 4096 octet limit")]
    TooLarge(usize),
    #[error("UPDATE carries no DTN reachability")]
    NoDtnReachability,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("bad marker")]
    BadMarker,
    #[error("bad length {0}")]
    BadLength(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttributeError {
    #[error("truncated attribute section")]
    Truncated,
    #[error("duplicate attribute type {0}")]
    Duplicate(u8),
    #[error("bad ORIGIN")]
    BadOrigin,
    #[error("bad AS_PATH")]
    BadAsPath,
    #[error(transparent)]
    Nlri(#[from] NlriError),
}

impl From<FramingError> for MessageError {
    fn from(e: FramingError) -> Self {
        MessageError::Framing(e)
    }
}

impl From<NlriError> for MessageError {
    fn from(e: NlriError) -> Self {
        MessageError::Attribute(AttributeError::Nlri(e))
    }
}

/// A multiprotocol capability tuple advertised in OPEN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Multiprotocol {
    pub afi: u16,
    pub safi: u8,
}

impl Multiprotocol {
    pub fn dtn(safi: u8) -> Self {
        Self { afi: AFI_DTN, safi }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Open {
    pub version: u8,
    pub asn: u16,
    pub hold_time: u16,
    pub bgp_id: Ipv4Addr,
    pub capabilities: Vec<Multiprotocol>,
}

impl Open {
    pub fn new(
        asn: u16,
        hold_time: u16,
        bgp_id: Ipv4Addr,
        capabilities: Vec<Multiprotocol>,
    ) -> Self {
        Self {
            version: BGP_VERSION,
            asn,
            hold_time,
            bgp_id,
            capabilities,
        }
    }

    /// SAFIs offered for the DTN address family.
    pub fn dtn_safis(&self) -> impl Iterator<Item = u8> + '_ {
        self.capabilities
            .iter()
            .filter(|c| c.afi == AFI_DTN)
            .map(|c| c.safi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Update {
    pub as_path: Vec<u16>,
    pub origin: u8,
    pub mp_reach: Option<ReachabilityAnnouncement>,
    pub mp_unreach: Option<ReachabilityWithdrawal>,
}

impl Update {
    pub fn announce(as_path: Vec<u16>, a: ReachabilityAnnouncement) -> Self {
        Self {
            as_path,
            origin: ORIGIN_INCOMPLETE,
            mp_reach: Some(a),
            mp_unreach: None,
        }
    }

    pub fn withdraw(as_path: Vec<u16>, w: ReachabilityWithdrawal) -> Self {
        Self {
            as_path,
            origin: ORIGIN_INCOMPLETE,
            mp_reach: None,
            mp_unreach: Some(w),
        }
    }

    /// Length of the complete framed message.
    pub fn encoded_len(&self) -> usize {
        let mut len = HEADER_LEN + 4 + attr_len(1) + attr_len(as_path_len(&self.as_path));
        if let Some(a) = &self.mp_reach {
            len += attr_len(a.encoded_len());
        }
        if let Some(w) = &self.mp_unreach {
            len += attr_len(w.encoded_len());
        }
        len
    }

    pub fn entry_count(&self) -> usize {
        self.mp_reach.as_ref().map_or(0, |a| a.entries.len())
            + self.mp_unreach.as_ref().map_or(0, |w| w.entries.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub code: u8,
    pub subcode: u8,
    pub data: Vec<u8>,
}

impl Notification {
    pub fn new(code: u8, subcode: u8) -> Self {
        Self {
            code,
            subcode,
            data: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Open(Open),
    Update(Update),
    Notification(Notification),
    Keepalive,
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Open(_) => MSG_OPEN,
            Message::Update(_) => MSG_UPDATE,
            Message::Notification(_) => MSG_NOTIFICATION,
            Message::Keepalive => MSG_KEEPALIVE,
        }
    }
}

pub(crate) fn attr_len(value_len: usize) -> usize {
    value_len + if value_len > 255 { 4 } else { 3 }
}

fn as_path_len(path: &[u16]) -> usize {
    path.chunks(255).map(|seg| 2 + 2 * seg.len()).sum()
}

fn put_attr(out: &mut Vec<u8>, flags: u8, code: u8, value: &[u8]) {
    if value.len() > 255 {
        out.push(flags | FLAG_EXTENDED_LENGTH);
        out.push(code);
        out.extend_from_slice(&(value.len() as u16).to_be_bytes());
    } else {
        out.push(flags);
        out.push(code);
        out.push(value.len() as u8);
    }
    out.extend_from_slice(value);
}

/// Serializes a message into one complete frame.
pub fn frame_message(m: &Message) -> Result<Vec<u8>, MessageError> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MARKER);
    out.extend_from_slice(&[0, 0]);
    out.push(m.type_code());
    match m {
        Message::Open(open) => put_open(&mut out, open),
        Message::Update(update) => put_update(&mut out, update)?,
        Message::Notification(n) => {
            out.push(n.code);
            out.push(n.subcode);
            out.extend_from_slice(&n.data);
        }
        Message::Keepalive => {}
    }
    if out.len() > MAX_MESSAGE_LEN {
        return Err(MessageError::TooLarge(out.len()));
    }
    let len = (out.len() as u16).to_be_bytes();
    out[16..18].copy_from_slice(&len);
    Ok(out)
}

fn put_open(out: &mut Vec<u8>, open: &Open) {
    out.push(open.version);
    out.extend_from_slice(&open.asn.to_be_bytes());
    out.extend_from_slice(&open.hold_time.to_be_bytes());
    out.extend_from_slice(&open.bgp_id.octets());
    if open.capabilities.is_empty() {
        out.push(0);
        return;
    }
    let caps_len = open.capabilities.len() * 6;
    out.push((caps_len + 2) as u8);
    out.push(OPT_PARAM_CAPABILITIES);
    out.push(caps_len as u8);
    for cap in &open.capabilities {
        out.push(CAP_MULTIPROTOCOL);
        out.push(4);
        out.extend_from_slice(&cap.afi.to_be_bytes());
        out.push(0);
        out.push(cap.safi);
    }
}

fn put_update(out: &mut Vec<u8>, u: &Update) -> Result<(), MessageError> {
    if u.mp_reach.is_none() && u.mp_unreach.is_none() {
        return Err(MessageError::NoDtnReachability);
    }
    let mut attrs = Vec::new();
    put_attr(&mut attrs, FLAG_TRANSITIVE, ATTR_ORIGIN, &[u.origin]);
    let mut path = Vec::with_capacity(as_path_len(&u.as_path));
    for seg in u.as_path.chunks(255) {
        path.push(AS_SEQUENCE);
        path.push(seg.len() as u8);
        for asn in seg {
            path.extend_from_slice(&asn.to_be_bytes());
        }
    }
    put_attr(&mut attrs, FLAG_TRANSITIVE, ATTR_AS_PATH, &path);
    if let Some(a) = &u.mp_reach {
        put_attr(
            &mut attrs,
            FLAG_OPTIONAL,
            ATTR_MP_REACH_NLRI,
            &nlri::encode_mp_reach(a)?,
        );
    }
    if let Some(w) = &u.mp_unreach {
        put_attr(
            &mut attrs,
            FLAG_OPTIONAL,
            ATTR_MP_UNREACH_NLRI,
            &nlri::encode_mp_unreach(w)?,
        );
    }
    if attrs.len() > u16::MAX as usize {
        return Err(MessageError::TooLarge(attrs.len()));
    }
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(attrs.len() as u16).to_be_bytes());
    out.extend_from_slice(&attrs);
    Ok(())
}

/// Validates a frame header and returns `(total length, type)`.
pub fn parse_header(header: &[u8]) -> Result<(usize, u8), MessageError> {
    if header.len() < HEADER_LEN {
        return Err(FramingError::BadLength(header.len()).into());
    }
    if header[..16] != MARKER {
        return Err(FramingError::BadMarker.into());
    }
    let len = usize::from(u16::from_be_bytes([header[16], header[17]]));
    if !(HEADER_LEN..=MAX_MESSAGE_LEN).contains(&len) {
        return Err(FramingError::BadLength(len).into());
    }
    Ok((len, header[18]))
}

/// Parses exactly one complete frame.
pub fn parse_message(bytes: &[u8]) -> Result<Message, MessageError> {
    let (len, kind) = parse_header(bytes)?;
    if len != bytes.len() {
        return Err(FramingError::BadLength(bytes.len()).into());
    }
    let body = &bytes[HEADER_LEN..];
    match kind {
        MSG_OPEN => parse_open(body).map(Message::Open),
        MSG_UPDATE => parse_update(body).map(Message::Update),
        MSG_NOTIFICATION => {
            if body.len() < 2 {
                return Err(MessageError::Notification);
            }
            Ok(Message::Notification(Notification {
                code: body[0],
                subcode: body[1],
                data: body[2..].to_vec(),
            }))
        }
        MSG_KEEPALIVE if body.is_empty() => Ok(Message::Keepalive),
        MSG_KEEPALIVE => Err(FramingError::BadLength(len).into()),
        other => Err(MessageError::UnknownMessageType(other)),
    }
}

fn parse_open(body: &[u8]) -> Result<Open, MessageError> {
    if body.len() < 10 {
        return Err(MessageError::Open("short"));
    }
    let version = body[0];
    let asn = u16::from_be_bytes([body[1], body[2]]);
    let hold_time = u16::from_be_bytes([body[3], body[4]]);
    let bgp_id = Ipv4Addr::new(body[5], body[6], body[7], body[8]);
    let opt_len = usize::from(body[9]);
    let mut params = body
        .get(10..)
        .filter(|p| p.len() == opt_len)
        .ok_or(MessageError::Open("optional parameter length mismatch"))?;
    let mut capabilities = Vec::new();
    while !params.is_empty() {
        let [ptype, plen, rest @ ..] = params else {
            return Err(MessageError::Open("truncated parameter"));
        };
        let plen = usize::from(*plen);
        if rest.len() < plen {
            return Err(MessageError::Open("truncated parameter"));
        }
        let (mut caps, tail) = rest.split_at(plen);
        params = tail;
        if *ptype != OPT_PARAM_CAPABILITIES {
            continue;
        }
        while !caps.is_empty() {
            let [code, clen, rest @ ..] = caps else {
                return Err(MessageError::Open("truncated capability"));
            };
            let clen = usize::from(*clen);
            if rest.len() < clen {
                return Err(MessageError::Open("truncated capability"));
            }
            let (value, tail) = rest.split_at(clen);
            caps = tail;
            if *code == CAP_MULTIPROTOCOL && clen == 4 {
                capabilities.push(Multiprotocol {
                    afi: u16::from_be_bytes([value[0], value[1]]),
                    safi: value[3],
                });
            }
        }
    }
    Ok(Open {
        version,
        asn,
        hold_time,
        bgp_id,
        capabilities,
    })
}

fn parse_update(body: &[u8]) -> Result<Update, MessageError> {
    let take_u16 = |b: &[u8], at: usize| -> Result<usize, AttributeError> {
        b.get(at..at + 2)
            .map(|s| usize::from(u16::from_be_bytes([s[0], s[1]])))
            .ok_or(AttributeError::Truncated)
    };
    let withdrawn = take_u16(body, 0)?;
    let attrs_at = 2 + withdrawn;
    let attrs_len = take_u16(body, attrs_at)?;
    let mut attrs = body
        .get(attrs_at + 2..attrs_at + 2 + attrs_len)
        .ok_or(AttributeError::Truncated)?;
    let mut update = Update {
        as_path: Vec::new(),
        origin: ORIGIN_INCOMPLETE,
        mp_reach: None,
        mp_unreach: None,
    };
    let mut seen = [false; 256];
    while !attrs.is_empty() {
        let [flags, code, rest @ ..] = attrs else {
            return Err(AttributeError::Truncated.into());
        };
        let (len, rest) = if flags & FLAG_EXTENDED_LENGTH != 0 {
            let len = take_u16(rest, 0)?;
            (len, &rest[2..])
        } else {
            let (len, rest) = rest.split_first().ok_or(AttributeError::Truncated)?;
            (usize::from(*len), rest)
        };
        if rest.len() < len {
            return Err(AttributeError::Truncated.into());
        }
        let (value, tail) = rest.split_at(len);
        attrs = tail;
        if std::mem::replace(&mut seen[usize::from(*code)], true) {
            return Err(AttributeError::Duplicate(*code).into());
        }
        match *code {
            ATTR_ORIGIN => match value {
                [origin] if *origin <= ORIGIN_INCOMPLETE => update.origin = *origin,
                _ => return Err(AttributeError::BadOrigin.into()),
            },
            ATTR_AS_PATH => update.as_path = parse_as_path(value)?,
            ATTR_MP_REACH_NLRI if is_dtn_afi(value) => {
                update.mp_reach = Some(nlri::decode_mp_reach(value)?);
            }
            ATTR_MP_UNREACH_NLRI if is_dtn_afi(value) => {
                update.mp_unreach = Some(nlri::decode_mp_unreach(value)?);
            }
            _ => {}
        }
    }
    if update.mp_reach.is_none() && update.mp_unreach.is_none() {
        return Err(MessageError::NoDtnReachability);
    }
    Ok(update)
}

fn is_dtn_afi(value: &[u8]) -> bool {
    value.len() < 2 || u16::from_be_bytes([value[0], value[1]]) == AFI_DTN
}

fn parse_as_path(mut value: &[u8]) -> Result<Vec<u16>, AttributeError> {
    let mut path = Vec::new();
    while !value.is_empty() {
        let [kind, count, rest @ ..] = value else {
            return Err(AttributeError::BadAsPath);
        };
        let n = usize::from(*count) * 2;
        if !matches!(*kind, AS_SET | AS_SEQUENCE) || rest.len() < n {
            return Err(AttributeError::BadAsPath);
        }
        path.extend(
            rest[..n]
                .chunks(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]])),
        );
        value = &rest[n..];
    }
    Ok(path)
}
