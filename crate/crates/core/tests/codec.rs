mod common;

use std::net::SocketAddr;

use common::*;
use dtnbgp::bgp::{frame_message, parse_message, Message, Update};
use dtnbgp::nlri::*;
use dtnbgp::EndpointId;
use proptest::prelude::*;

#[test]
fn golden_ipv6_announcement() {
    let a = ReachabilityAnnouncement::new(
        ClaEndpoint::new(SAFI_MTCP, "[2001:db8::1]:4556".parse().unwrap()),
        vec![EidEntry::new(EndpointId::parse("ipn:5.1").unwrap())],
    );
    let want = testdata("mp_reach_ipv6_ipn5_1.hex");
    assert_eq!(&want[..4], &[0x5a, 0x02, 0x00, 0x90]);
    assert_eq!(encode_mp_reach(&a).unwrap(), want);
    assert_eq!(decode_mp_reach(&want).unwrap(), a);
}

#[test]
fn golden_withdrawal() {
    let w = ReachabilityWithdrawal::new(SAFI_MTCP, [EndpointId::parse("ipn:5.1").unwrap()]);
    let want = testdata("mp_unreach_ipn5_1.hex");
    assert_eq!(encode_mp_unreach(&w).unwrap(), want);
    assert_eq!(decode_mp_unreach(&want).unwrap(), w);
}

#[test]
fn golden_ipv4_with_attributes() {
    let a = ReachabilityAnnouncement::new(
        ClaEndpoint::new(SAFI_MTCP, "10.0.0.2:4556".parse().unwrap()),
        vec![EidEntry::with_attributes(
            EndpointId::parse("dtn://gs/").unwrap(),
            vec![
                EidAttribute {
                    attr_type: 1,
                    value: vec![0xde, 0xad, 0xbe, 0xef],
                },
                EidAttribute {
                    attr_type: 7,
                    value: vec![],
                },
            ],
        )],
    );
    let want = testdata("mp_reach_ipv4_attrs.hex");
    assert_eq!(encode_mp_reach(&a).unwrap(), want);
    assert_eq!(decode_mp_reach(&want).unwrap(), a);
}

#[test]
fn golden_keepalive() {
    assert_eq!(
        frame_message(&Message::Keepalive).unwrap(),
        testdata("keepalive.hex")
    );
}

#[test]
fn ipv4_nhna_is_48_bits() {
    let nh = ClaEndpoint::new(SAFI_TCPCL_V4, SocketAddr::from(([192, 0, 2, 7], 4556)));
    let (bits, bytes) = encode_nhna(&nh).unwrap();
    assert_eq!(bits, NHNA_BITS_V4);
    assert_eq!(decode_nhna(SAFI_TCPCL_V4, bits, &bytes).unwrap(), nh);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn announcement_round_trip(a in arb_announcement()) {
        let bytes = encode_mp_reach(&a).unwrap();
        prop_assert_eq!(bytes.len(), a.encoded_len());
        prop_assert_eq!(decode_mp_reach(&bytes).unwrap(), a);
    }

    #[test]
    fn withdrawal_round_trip(w in arb_withdrawal()) {
        let bytes = encode_mp_unreach(&w).unwrap();
        prop_assert_eq!(bytes.len(), w.encoded_len());
        prop_assert_eq!(decode_mp_unreach(&bytes).unwrap(), w);
    }

    #[test]
    fn update_frame_round_trip(
        path in proptest::collection::vec(1u16..u16::MAX, 0..6),
        a in arb_announcement(),
    ) {
        let update = Update::announce(path, a);
        let Ok(frame) = frame_message(&Message::Update(update.clone())) else {
            // Only oversized updates may fail to frame.
            prop_assert!(update.encoded_len() > 4096);
            return Ok(());
        };
        prop_assert_eq!(frame.len(), update.encoded_len());
        prop_assert_eq!(parse_message(&frame).unwrap(), Message::Update(update));
    }

    /// Whatever the strict decoder accepts re-encodes to the same bytes.
    #[test]
    fn decoder_is_canonical(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        if let Ok(a) = decode_mp_reach(&bytes) {
            prop_assert_eq!(encode_mp_reach(&a).unwrap(), bytes.clone());
        }
        if let Ok(w) = decode_mp_unreach(&bytes) {
            prop_assert_eq!(encode_mp_unreach(&w).unwrap(), bytes);
        }
    }

    /// Valid encodings with one octet flipped still decode without panicking.
    #[test]
    fn mutated_encodings_are_classified(a in arb_announcement(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_mp_reach(&a).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let _ = decode_mp_reach(&bytes);
        let _ = decode_mp_unreach(&bytes);
        bytes.truncate(i);
        prop_assert!(decode_mp_reach(&bytes).is_err());
    }
}
