//! BGP-based distribution of Delay-Tolerant Networking endpoint reachability.
//!
//! The crate is organised bottom-up:
//!
//! * [`eid`] and [`nlri`]: endpoint identifiers and the wire codec for the
//!   DTN `MP_REACH_NLRI` / `MP_UNREACH_NLRI` attribute values.
//! * [`bgp`]: BGP-4 message framing, the session state machine and the
//!   speaker that drives sessions over TCP.
//! * [`rib`]: the reachability RIB with best-route selection and export.
//! * [`erds`]: the reachability distribution service gluing a Bundle Protocol
//!   agent to the BGP speaker through adapters.
//! * [`agent`]: a simulated Bundle Protocol agent with a CLA listener/probe.
//! * [`node`] and [`scenario`]: in-process nodes and the scripted runner.

pub mod agent;
pub mod bgp;
pub mod eid;
pub mod erds;
pub mod nlri;
pub mod node;
pub mod rib;
pub mod scenario;

pub use eid::EndpointId;
pub use nlri::{
    ClaEndpoint, EidAttribute, EidEntry, NlriError, ReachabilityAnnouncement,
    ReachabilityWithdrawal,
};
