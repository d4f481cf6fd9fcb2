//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, TcpListener};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use dtnbgp::agent::AgentClient;
use dtnbgp::bgp::{parse_message, Message, Multiprotocol, Open, PeerId, PeerMode, SessionState};
use dtnbgp::nlri::*;
use dtnbgp::node::NodeHandle;
use dtnbgp::rib::{Rib, RouteSource};
use dtnbgp::scenario::{run_scenario, NodeDump, ScenarioFile, ScenarioReport};
use dtnbgp::EndpointId;
use proptest::prelude::Rng;
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn block_on<T>(f: impl std::future::Future<Output = T>) -> T {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(f)
}

fn criterion_1() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        Config::default(),
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let reach = arb_announcement();
    let unreach = arb_withdrawal();
    let mut failures = 0;
    for _ in 0..1000 {
        let a = reach.new_tree(&mut runner).unwrap().current();
        if encode_mp_reach(&a)
            .ok()
            .and_then(|b| decode_mp_reach(&b).ok())
            != Some(a)
        {
            failures += 1;
        }
        let w = unreach.new_tree(&mut runner).unwrap().current();
        if encode_mp_unreach(&w)
            .ok()
            .and_then(|b| decode_mp_unreach(&b).ok())
            != Some(w)
        {
            failures += 1;
        }
    }
    check(failures == 0, || format!("{failures} round-trip failures"))?;
    Ok("1000 announcements and 1000 withdrawals, 0 failures".into())
}

fn criterion_2() -> Outcome {
    let reach = ReachabilityAnnouncement::new(
        ClaEndpoint::new(SAFI_MTCP, "[2001:db8::1]:4556".parse().unwrap()),
        vec![EidEntry::new(EndpointId::parse("ipn:5.1").unwrap())],
    );
    let want = testdata("mp_reach_ipv6_ipn5_1.hex");
    check(want[..4] == [0x5a, 0x02, 0x00, 0x90], || {
        "golden header is not AFI 23042 / SAFI 0 / 0x90".into()
    })?;
    let got = encode_mp_reach(&reach).map_err(|e| e.to_string())?;
    check(got == want, || format!("MP_REACH mismatch: {got:02x?}"))?;
    let unreach = ReachabilityWithdrawal::new(SAFI_MTCP, [EndpointId::parse("ipn:5.1").unwrap()]);
    let want = testdata("mp_unreach_ipn5_1.hex");
    let got = encode_mp_unreach(&unreach).map_err(|e| e.to_string())?;
    check(got == want, || format!("MP_UNREACH mismatch: {got:02x?}"))?;
    Ok("IPv6 announcement (33 octets) and ipn:5.1 withdrawal match byte for byte".into())
}

fn criterion_3() -> Outcome {
    let mut rng = TestRng::deterministic_rng(RngAlgorithm::XorShift);
    let mut runner = TestRunner::new_with_rng(
        Config::default(),
        TestRng::deterministic_rng(RngAlgorithm::XorShift),
    );
    let valid = arb_announcement();
    let seeds: Vec<Vec<u8>> = (0..256)
        .map(|_| encode_mp_reach(&valid.new_tree(&mut runner).unwrap().current()).unwrap())
        .collect();
    let (mut ok, mut err, mut aborts) = (0u64, 0u64, 0u64);
    let mut buf = vec![0u8; 4097];
    for i in 0..100_000 {
        let input: Vec<u8> = if i % 4 == 3 {
            // A valid encoding with a few octets overwritten or cut short.
            let mut bytes = seeds[rng.next_u32() as usize % seeds.len()].clone();
            bytes.truncate(4096);
            for _ in 0..(rng.next_u32() % 3) {
                let at = rng.next_u32() as usize % bytes.len();
                bytes[at] = rng.next_u32() as u8;
            }
            if rng.next_u32().is_multiple_of(4) {
                bytes.truncate(rng.next_u32() as usize % (bytes.len() + 1));
            }
            bytes
        } else {
            let len = (rng.next_u32() % 4097) as usize;
            let bytes = &mut buf[..len];
            rng.fill_bytes(bytes);
            // Some inputs get a plausible header so the decoder goes deeper.
            if i % 4 == 1 && len >= 4 {
                bytes[..2].copy_from_slice(&AFI_DTN.to_be_bytes());
                bytes[2] &= 0x03;
                bytes[3] = if bytes[3] & 1 == 0 {
                    NHNA_BITS_V4
                } else {
                    NHNA_BITS_V6
                };
            }
            bytes.to_vec()
        };
        let input = &input[..];
        match catch_unwind(|| {
            (
                decode_mp_reach(input).is_ok(),
                decode_mp_unreach(input).is_ok(),
            )
        }) {
            Ok((a, b)) => {
                ok += u64::from(a) + u64::from(b);
                err += u64::from(!a) + u64::from(!b);
            }
            Err(_) => aborts += 1,
        }
    }
    check(aborts == 0, || format!("{aborts} inputs panicked"))?;
    Ok(format!(
        "100000 inputs through both decoders: {ok} decoded, {err} classified errors, 0 aborts"
    ))
}

fn scenario(name: &str) -> Result<ScenarioReport, String> {
    let file =
        ScenarioFile::load(&scenario_path(&format!("{name}.toml"))).map_err(|e| e.to_string())?;
    let report = run_scenario(&file, None).map_err(|e| e.to_string())?;
    if let Some(f) = report.failures().next() {
        return Err(format!("{name}: {}: {}", f.label, f.detail));
    }
    Ok(report)
}

fn scenario_summary(report: &ScenarioReport) -> String {
    format!(
        "{} steps passed in {:.1}s",
        report.steps.len(),
        report.steps.last().map_or(0.0, |s| s.finished_at)
    )
}

fn criterion_4(reports: &mut BTreeMap<&'static str, ScenarioReport>) -> Outcome {
    let r = scenario("two_node")?;
    let s = scenario_summary(&r);
    reports.insert("two_node", r);
    Ok(format!("two_node: {s}"))
}

fn criterion_5(reports: &mut BTreeMap<&'static str, ScenarioReport>) -> Outcome {
    let r = scenario("chain")?;
    let s = scenario_summary(&r);
    reports.insert("chain", r);
    Ok(format!("chain A-B-D: {s}"))
}

fn criterion_6(reports: &mut BTreeMap<&'static str, ScenarioReport>) -> Outcome {
    let r = scenario("invalidate")?;
    let s = scenario_summary(&r);
    reports.insert("invalidate", r);
    Ok(format!("withdrawal and session kill: {s}"))
}

fn criterion_7(reports: &mut BTreeMap<&'static str, ScenarioReport>) -> Outcome {
    let r = scenario("ring")?;
    let s = scenario_summary(&r);
    let updates = r.updates_sent;
    reports.insert("ring", r);
    Ok(format!("ring A-B-D-A: {s}, {updates} UPDATEs total"))
}

fn register_all(node: &NodeHandle, eids: &[String]) -> Result<(), String> {
    block_on(async {
        let mut c = AgentClient::connect(node.agent().local_addr())
            .await
            .map_err(|e| e.to_string())?;
        for e in eids {
            c.register(e, "mtcp0").await.map_err(|e| e.to_string())?;
        }
        Ok(())
    })
}

fn established(node: &NodeHandle, peer: &PeerId) -> bool {
    node.peer_state(peer) == Some(SessionState::Established)
}

fn criterion_8() -> Outcome {
    let plain_listener = TcpListener::bind(local(23010)).map_err(|e| e.to_string())?;
    let dtn_listener = TcpListener::bind(local(23011)).map_err(|e| e.to_string())?;
    let node = NodeHandle::start(
        "A",
        node_config(
            64512,
            1,
            23000,
            &[
                (23010, 64601, PeerMode::Active),
                (23011, 64602, PeerMode::Active),
            ],
        ),
        None,
    )
    .map_err(|e| e.to_string())?;
    register_all(&node, &["ipn:1.0".into()])?;
    // IPv4 unicast only, no DTN capability.
    let plain_open = Open::new(
        64601,
        3,
        Ipv4Addr::new(10, 0, 9, 1),
        vec![Multiprotocol { afi: 1, safi: 1 }],
    );
    let plain = RawPeer::accept(&plain_listener, plain_open, Duration::from_secs(5));
    let control = RawPeer::accept(
        &dtn_listener,
        raw_open(64602, 2, &[0]),
        Duration::from_secs(5),
    );
    let plain_id = node.peer_for_asn(64601).unwrap();
    check(
        wait_until(Duration::from_secs(2), || established(&node, &plain_id)),
        || "session to the non-DTN peer did not establish".into(),
    )?;
    register_all(&node, &["ipn:2.0".into(), "dtn://late/".into()])?;
    // Outlast the hold time so liveness is shown, not assumed.
    std::thread::sleep(Duration::from_secs(4));
    let leaked = plain
        .updates()
        .iter()
        .filter(|f| carries_dtn_reachability(f))
        .count();
    check(leaked == 0, || {
        format!("{leaked} DTN UPDATEs reached the non-DTN peer")
    })?;
    check(
        established(&node, &plain_id) && !plain.is_closed() && plain.notifications().is_empty(),
        || "session to the non-DTN peer did not stay Established".into(),
    )?;
    let keepalives = plain.frames_of_type(4).len();
    let control_updates = control
        .updates()
        .iter()
        .filter(|f| carries_dtn_reachability(f))
        .count();
    check(control_updates > 0, || {
        "DTN-capable control peer received nothing".into()
    })?;
    Ok(format!(
        "0 DTN UPDATEs to the plain peer over 4s ({keepalives} keepalives, still Established); control peer got {control_updates}"
    ))
}

fn criterion_9() -> Outcome {
    let raw_listener = TcpListener::bind(local(23110)).map_err(|e| e.to_string())?;
    let a = NodeHandle::start(
        "A",
        node_config(
            64512,
            1,
            23100,
            &[
                (23110, 64601, PeerMode::Active),
                (23122, 64513, PeerMode::Active),
            ],
        ),
        None,
    )
    .map_err(|e| e.to_string())?;
    let eids: Vec<String> = (0..300)
        .map(|i| format!("dtn://node-a.example/service-{i:03}"))
        .collect();
    register_all(&a, &eids)?;
    check(
        wait_until(Duration::from_secs(5), || a.rib_rows().len() == 300),
        || format!("A's RIB holds {} of 300 local EIDs", a.rib_rows().len()),
    )?;

    let b = NodeHandle::start(
        "B",
        node_config(64513, 2, 23120, &[(23102, 64512, PeerMode::Passive)]),
        None,
    )
    .map_err(|e| e.to_string())?;
    let raw = RawPeer::accept(
        &raw_listener,
        raw_open(64601, 1, &[0]),
        Duration::from_secs(5),
    );
    let count_entries = |raw: &RawPeer| -> usize {
        raw.updates()
            .iter()
            .filter_map(|f| match parse_message(f) {
                Ok(Message::Update(u)) => Some(u.entry_count()),
                _ => None,
            })
            .sum()
    };
    check(
        wait_until(Duration::from_secs(5), || count_entries(&raw) >= 300),
        || format!("raw peer saw {} entries", count_entries(&raw)),
    )?;
    let frames: Vec<_> = raw
        .updates()
        .into_iter()
        .filter(|f| carries_dtn_reachability(f))
        .collect();
    let sizes: Vec<usize> = frames.iter().map(Vec::len).collect();
    let mut rib = Rib::new(64601);
    let mut counts = Vec::new();
    for f in &frames {
        let Ok(Message::Update(u)) = parse_message(f) else {
            return Err("unparseable UPDATE".into());
        };
        counts.push(u.entry_count());
        if let Some(reach) = &u.mp_reach {
            let source = RouteSource::peer(
                PeerId::new("A"),
                Ipv4Addr::new(10, 0, 0, 1),
                u.as_path.clone(),
            );
            rib.apply_announcement(source, reach)
                .map_err(|e| e.to_string())?;
        }
    }
    check(frames.len() >= 2, || {
        format!("only {} UPDATE(s)", frames.len())
    })?;
    check(sizes.iter().all(|&s| s <= 4096), || {
        format!("frame sizes {sizes:?}")
    })?;
    check(counts.iter().sum::<usize>() == 300, || {
        format!("entry counts {counts:?}")
    })?;
    check(rib.len() == 300, || {
        format!("receiver RIB holds {}", rib.len())
    })?;
    check(
        wait_until(Duration::from_secs(5), || b.rib_rows().len() == 300),
        || format!("node B's RIB holds {}", b.rib_rows().len()),
    )?;
    Ok(format!(
        "{} UPDATEs of {:?} octets carrying {:?} entries; raw receiver and node B each hold 300",
        frames.len(),
        sizes,
        counts
    ))
}

fn criterion_10(first: &BTreeMap<&'static str, ScenarioReport>) -> Outcome {
    let mut compared = 0;
    for name in ["two_node", "chain", "invalidate", "ring"] {
        let Some(before) = first.get(name) else {
            return Err(format!("first {name} run did not complete"));
        };
        let again = scenario(name)?;
        let diff: Vec<&String> = before
            .dumps
            .iter()
            .filter(|(node, d)| again.dumps.get(*node) != Some(*d))
            .map(|(node, _)| node)
            .collect();
        check(diff.is_empty(), || {
            format!("{name}: dumps differ on {diff:?}")
        })?;
        compared += before
            .dumps
            .values()
            .map(|d: &NodeDump| d.rib.lines().count() + d.fib.lines().count())
            .sum::<usize>();
    }
    Ok(format!(
        "second runs of 4 scenarios match the first ({compared} dump lines)"
    ))
}

fn run(number: u32, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {number:>2} PASS [{secs:5.1}s] {title}: {detail}"),
        Err(reason) => println!("criterion {number:>2} FAIL [{secs:5.1}s] {title}: {reason}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut reports = BTreeMap::new();
    let results = [
        run(1, "codec round-trip", criterion_1),
        run(2, "golden vectors", criterion_2),
        run(3, "decoder robustness", criterion_3),
        run(4, "two-node exchange", || criterion_4(&mut reports)),
        run(5, "transitivity", || criterion_5(&mut reports)),
        run(6, "invalidation", || criterion_6(&mut reports)),
        run(7, "loop safety", || criterion_7(&mut reports)),
        run(8, "capability gating", criterion_8),
        run(9, "chunking", criterion_9),
        run(10, "determinism", || criterion_10(&reports)),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
