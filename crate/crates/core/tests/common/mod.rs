#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use dtnbgp::bgp::message::{MSG_NOTIFICATION, MSG_UPDATE};
use dtnbgp::bgp::{frame_message, Message, Multiprotocol, Open, PeerMode};
use dtnbgp::erds::config::{BpSection, ClaSection, NodeSection, PeerSection, TimersSection};
use dtnbgp::erds::ErdsConfig;
use proptest::prelude::*;

use dtnbgp::nlri::{
    ClaEndpoint, EidAttribute, EidEntry, ReachabilityAnnouncement, ReachabilityWithdrawal,
};
use dtnbgp::EndpointId;

/// Parses a commented hexdump: text after `#` is ignored, the rest must be
/// whitespace-separated hex octets.
pub fn parse_hexdump(text: &str) -> Vec<u8> {
    text.lines()
        .map(|l| l.split('#').next().unwrap())
        .flat_map(str::split_whitespace)
        .map(|b| u8::from_str_radix(b, 16).unwrap_or_else(|_| panic!("bad hex octet {b:?}")))
        .collect()
}

pub fn testdata(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("testdata")
        .join(name);
    parse_hexdump(&std::fs::read_to_string(&path).unwrap())
}

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if f() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(50));
    }
}

pub const LOCALHOST: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

pub fn local(port: u16) -> SocketAddr {
    SocketAddr::new(LOCALHOST, port)
}

/// A node with one MTCP CLA on `base`, agent on `base + 1` and BGP on
/// `base + 2`.
pub fn node_config(asn: u16, id: u8, base: u16, peers: &[(u16, u16, PeerMode)]) -> ErdsConfig {
    ErdsConfig {
        node: NodeSection {
            asn,
            bgp_id: Ipv4Addr::new(10, 0, 0, id),
            listen: Some(local(base + 2)),
            rib_dump_path: None,
        },
        clas: vec![ClaSection {
            name: "mtcp0".into(),
            safi: 0,
            host: LOCALHOST,
            port: base,
        }],
        bp: BpSection {
            listen: local(base + 1),
        },
        peers: peers
            .iter()
            .map(|&(port, remote_asn, mode)| PeerSection {
                host: LOCALHOST,
                port,
                remote_asn,
                mode,
            })
            .collect(),
        timers: TimersSection { hold: 3 },
    }
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut header = [0u8; 19];
    stream.read_exact(&mut header)?;
    let len = u16::from_be_bytes([header[16], header[17]]) as usize;
    let mut frame = header.to_vec();
    frame.resize(len.max(19), 0);
    stream.read_exact(&mut frame[19..])?;
    Ok(frame)
}

/// A hand-driven BGP peer on blocking sockets that records every frame it
/// receives after the handshake.
pub struct RawPeer {
    pub remote_open: Vec<u8>,
    frames: Arc<Mutex<Vec<Vec<u8>>>>,
    closed: Arc<AtomicBool>,
    keepalives: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    writer: Arc<Mutex<TcpStream>>,
}

impl RawPeer {
    /// Waits for the node to connect, then completes the handshake with
    /// `open`.
    pub fn accept(listener: &TcpListener, open: Open, timeout: Duration) -> RawPeer {
        listener.set_nonblocking(true).unwrap();
        let deadline = Instant::now() + timeout;
        let mut stream = loop {
            match listener.accept() {
                Ok((s, _)) => break s,
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock && Instant::now() < deadline =>
                {
                    thread::sleep(Duration::from_millis(20))
                }
                Err(e) => panic!("raw peer accept: {e}"),
            }
        };
        stream.set_nonblocking(false).unwrap();
        let remote_open = read_frame(&mut stream).unwrap();
        assert_eq!(remote_open[18], 1, "expected OPEN");
        stream
            .write_all(&frame_message(&Message::Open(open)).unwrap())
            .unwrap();
        stream
            .write_all(&frame_message(&Message::Keepalive).unwrap())
            .unwrap();

        let frames = Arc::new(Mutex::new(Vec::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let keepalives = Arc::new(AtomicBool::new(true));
        let stop = Arc::new(AtomicBool::new(false));
        let writer = Arc::new(Mutex::new(stream.try_clone().unwrap()));

        let (f, c) = (frames.clone(), closed.clone());
        let mut reader = stream;
        thread::spawn(move || {
            while let Ok(frame) = read_frame(&mut reader) {
                f.lock().unwrap().push(frame);
            }
            c.store(true, Ordering::SeqCst);
        });
        let (w, k, s) = (writer.clone(), keepalives.clone(), stop.clone());
        thread::spawn(move || {
            let ka = frame_message(&Message::Keepalive).unwrap();
            while !s.load(Ordering::SeqCst) {
                if k.load(Ordering::SeqCst) && w.lock().unwrap().write_all(&ka).is_err() {
                    return;
                }
                thread::sleep(Duration::from_millis(500));
            }
        });
        RawPeer {
            remote_open,
            frames,
            closed,
            keepalives,
            stop,
            writer,
        }
    }

    pub fn send(&self, msg: &Message) {
        self.writer
            .lock()
            .unwrap()
            .write_all(&frame_message(msg).unwrap())
            .unwrap();
    }

    pub fn set_keepalives(&self, on: bool) {
        self.keepalives.store(on, Ordering::SeqCst);
    }

    pub fn frames(&self) -> Vec<Vec<u8>> {
        self.frames.lock().unwrap().clone()
    }

    pub fn frames_of_type(&self, t: u8) -> Vec<Vec<u8>> {
        self.frames().into_iter().filter(|f| f[18] == t).collect()
    }

    pub fn updates(&self) -> Vec<Vec<u8>> {
        self.frames_of_type(MSG_UPDATE)
    }

    pub fn notifications(&self) -> Vec<Vec<u8>> {
        self.frames_of_type(MSG_NOTIFICATION)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }
}

impl Drop for RawPeer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self
            .writer
            .lock()
            .unwrap()
            .shutdown(std::net::Shutdown::Both);
    }
}

pub fn raw_open(asn: u16, id: u8, safis: &[u8]) -> Open {
    Open::new(
        asn,
        3,
        Ipv4Addr::new(10, 0, 9, id),
        safis.iter().map(|&s| Multiprotocol::dtn(s)).collect(),
    )
}

/// Path attributes of an UPDATE frame as (type, first two value octets),
/// walked without the library parser.
pub fn sniff_attributes(frame: &[u8]) -> Vec<(u8, Option<u16>)> {
    assert_eq!(frame[18], MSG_UPDATE);
    let body = &frame[19..];
    let withdrawn = u16::from_be_bytes([body[0], body[1]]) as usize;
    let mut i = 2 + withdrawn;
    let attrs_len = u16::from_be_bytes([body[i], body[i + 1]]) as usize;
    i += 2;
    let end = i + attrs_len;
    let mut out = Vec::new();
    while i < end {
        let flags = body[i];
        let t = body[i + 1];
        let (len, hdr) = if flags & 0x10 != 0 {
            (u16::from_be_bytes([body[i + 2], body[i + 3]]) as usize, 4)
        } else {
            (body[i + 2] as usize, 3)
        };
        let value = &body[i + hdr..i + hdr + len];
        let afi = (value.len() >= 2).then(|| u16::from_be_bytes([value[0], value[1]]));
        out.push((t, afi));
        i += hdr + len;
    }
    out
}

/// True if the frame carries MP_REACH or MP_UNREACH for the DTN AFI.
pub fn carries_dtn_reachability(frame: &[u8]) -> bool {
    sniff_attributes(frame)
        .iter()
        .any(|&(t, afi)| (t == 14 || t == 15) && afi == Some(23042))
}

// Strategies shared by the property tests.

pub fn arb_eid() -> impl Strategy<Value = EndpointId> {
    prop_oneof![
        (0u64..u64::MAX, 0u64..100_000)
            .prop_map(|(n, s)| EndpointId::parse(&format!("ipn:{n}.{s}")).unwrap()),
        "[a-z0-9.-]{1,40}(/[a-z0-9~_]{0,20}){0,3}"
            .prop_map(|p| EndpointId::parse(&format!("dtn://{p}")).unwrap()),
        (3u8..=255, "[ -~]{1,60}").prop_map(|(c, t)| EndpointId::new(c, t).unwrap()),
    ]
}

pub fn arb_cla() -> impl Strategy<Value = ClaEndpoint> {
    let addr = prop_oneof![
        (any::<[u8; 4]>(), any::<u16>()).prop_map(|(ip, p)| SocketAddr::from((ip, p))),
        (any::<[u8; 16]>(), any::<u16>()).prop_map(|(ip, p)| SocketAddr::from((ip, p))),
    ];
    (0u8..=3, addr).prop_map(|(s, a)| ClaEndpoint::new(s, a))
}

pub fn arb_attribute() -> impl Strategy<Value = EidAttribute> {
    (any::<u8>(), proptest::collection::vec(any::<u8>(), 0..300))
        .prop_map(|(attr_type, value)| EidAttribute { attr_type, value })
}

pub fn arb_entry() -> impl Strategy<Value = EidEntry> {
    (arb_eid(), proptest::collection::vec(arb_attribute(), 0..4))
        .prop_map(|(eid, attrs)| EidEntry::with_attributes(eid, attrs))
}

pub fn arb_announcement() -> impl Strategy<Value = ReachabilityAnnouncement> {
    (arb_cla(), proptest::collection::vec(arb_entry(), 1..20))
        .prop_map(|(nh, entries)| ReachabilityAnnouncement::new(nh, entries))
}

pub fn arb_withdrawal() -> impl Strategy<Value = ReachabilityWithdrawal> {
    (0u8..=3, proptest::collection::vec(arb_eid(), 1..40))
        .prop_map(|(s, e)| ReachabilityWithdrawal::new(s, e))
}
