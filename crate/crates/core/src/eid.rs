//! DTN endpoint identifiers.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// URI scheme code for `dtn:` endpoints.
pub const URI_CODE_DTN: u8 = 1;
/// URI scheme code for `ipn:` endpoints.
pub const URI_CODE_IPN: u8 = 2;

/// Longest EID text that fits the one-octet length field.
pub const MAX_EID_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EidError {
    #[error("empty endpoint identifier")]
    Empty,
    #[error("endpoint identifier is {0} octets, at most 255 allowed")]
    TooLong(usize),
    #[error("unknown EID scheme in {0:?}, expected dtn: or ipn:")]
    UnknownScheme(String),
    #[error("URI code {code} does not match scheme of {text:?}")]
    SchemeMismatch { code: u8, text: String },
    #[error("malformed ipn EID {0:?}, expected ipn:<node>.<service>")]
    BadIpn(String),
}

/// A DTN endpoint identifier: a scheme code plus the full URI text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId {
    uri_code: u8,
    uri_text: String,
}

impl EndpointId {
    /// Builds an EID from an explicit scheme code and URI text.
    ///
    /// Codes other than dtn and ipn are carried opaquely; only the length
    /// rules apply to them.
    pub fn new(uri_code: u8, uri_text: impl Into<String>) -> Result<Self, EidError> {
        let uri_text = uri_text.into();
        validate(uri_code, &uri_text)?;
        Ok(Self { uri_code, uri_text })
    }

    /// Parses URI text and infers the scheme code from its prefix.
    pub fn parse(text: &str) -> Result<Self, EidError> {
        let code = if text.starts_with("dtn:") {
            URI_CODE_DTN
        } else if text.starts_with("ipn:") {
            URI_CODE_IPN
        } else if text.is_empty() {
            return Err(EidError::Empty);
        } else {
            return Err(EidError::UnknownScheme(text.to_owned()));
        };
        Self::new(code, text)
    }

    pub fn uri_code(&self) -> u8 {
        self.uri_code
    }

    pub fn as_str(&self) -> &str {
        &self.uri_text
    }

    /// Node and service numbers of an `ipn:` EID.
    pub fn ipn_parts(&self) -> Option<(u64, u64)> {
        if self.uri_code == URI_CODE_IPN {
            parse_ipn(&self.uri_text)
        } else {
            None
        }
    }
}

fn parse_ipn(text: &str) -> Option<(u64, u64)> {
    let rest = text.strip_prefix("ipn:")?;
    let (node, service) = rest.split_once('.')?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(node) || !digits(service) {
        return None;
    }
    Some((node.parse().ok()?, service.parse().ok()?))
}

fn validate(code: u8, text: &str) -> Result<(), EidError> {
    if text.is_empty() {
        return Err(EidError::Empty);
    }
    if text.len() > MAX_EID_LEN {
        return Err(EidError::TooLong(text.len()));
    }
    match code {
        URI_CODE_DTN if !text.starts_with("dtn:") => Err(EidError::SchemeMismatch {
            code,
            text: text.to_owned(),
        }),
        URI_CODE_IPN if !text.starts_with("ipn:") => Err(EidError::SchemeMismatch {
            code,
            text: text.to_owned(),
        }),
        URI_CODE_IPN if parse_ipn(text).is_none() => Err(EidError::BadIpn(text.to_owned())),
        _ => Ok(()),
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.uri_text)
    }
}

impl FromStr for EndpointId {
    type Err = EidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
