use std::io::Cursor;
use std::path::PathBuf;

use olts::wire::{self, decode, encode, FrameReader, WireError, WireMessage, EMPTY_TRAJECTORY};
use proptest::prelude::*;
use proptest::test_runner::TestRunner;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/wire")
}

pub fn golden_messages() -> Vec<(&'static str, WireMessage)> {
    vec![
        (
            "hello",
            WireMessage::Hello {
                client_id: 3,
                sim_id: 7,
                params: vec![1.5, -2.0, 100.0],
                field_shape: vec![32, 32],
            },
        ),
        (
            "timestep",
            WireMessage::Timestep {
                sim_id: 7,
                t_index: 5,
                values: vec![0.0, 1.0, -0.5, 1e-300],
            },
        ),
        ("bye", WireMessage::Bye { sim_id: 7, last_t: 2000 }),
        (
            "bye_empty",
            WireMessage::Bye {
                sim_id: 7,
                last_t: EMPTY_TRAJECTORY,
            },
        ),
        (
            "heartbeat",
            WireMessage::Heartbeat {
                sender_id: 7,
                wallclock_ms: 1_700_000_000_000,
            },
        ),
        ("param_request", WireMessage::ParamRequest { count: 4 }),
        (
            "param_assign",
            WireMessage::ParamAssign {
                sim_id: 2,
                params: vec![10.0, 20.0],
            },
        ),
        ("ack", WireMessage::Ack { ref_msg_type: 5 }),
        ("shutdown", WireMessage::Shutdown),
    ]
}

/// Names of fixtures whose frozen bytes no longer match the encoder, or do
/// not decode back to their message.
pub fn drifted_fixtures() -> Vec<String> {
    golden_messages()
        .into_iter()
        .filter(|(name, msg)| {
            let path = fixture_dir().join(format!("{name}.bin"));
            let frozen = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            encode(msg).unwrap() != frozen || decode(&frozen).ok().as_ref() != Some(msg)
        })
        .map(|(name, _)| name.to_string())
        .collect()
}

#[test]
fn golden_fixtures_are_stable() {
    assert_eq!(drifted_fixtures(), Vec::<String>::new());
}

#[test]
fn golden_hello_layout() {
    let bytes = std::fs::read(fixture_dir().join("hello.bin")).unwrap();
    assert_eq!(&bytes[..4], b"MLSA");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
    let body_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    // client_id, sim_id, n_params, 3 params, n_dims, 2 dims
    assert_eq!(body_len, 8 + 8 + 4 + 24 + 4 + 8);
    assert_eq!(bytes.len(), 12 + body_len + 4);
    let crc = u32::from_le_bytes(bytes[12 + body_len..].try_into().unwrap());
    assert_eq!(crc, wire::crc32(&bytes[12..12 + body_len]));
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

pub fn any_message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (any::<u64>(), any::<u64>(), prop::collection::vec(finite(), 0..8), prop::collection::vec(1u32..64, 0..4))
            .prop_map(|(client_id, sim_id, params, field_shape)| WireMessage::Hello {
                client_id,
                sim_id,
                params,
                field_shape
            }),
        (any::<u64>(), any::<u32>(), prop::collection::vec(finite(), 0..64))
            .prop_map(|(sim_id, t_index, values)| WireMessage::Timestep { sim_id, t_index, values }),
        (any::<u64>(), any::<u32>()).prop_map(|(sim_id, last_t)| WireMessage::Bye { sim_id, last_t }),
        (any::<u64>(), any::<u64>())
            .prop_map(|(sender_id, wallclock_ms)| WireMessage::Heartbeat { sender_id, wallclock_ms }),
        any::<u32>().prop_map(|count| WireMessage::ParamRequest { count }),
        (any::<u64>(), prop::collection::vec(finite(), 0..8))
            .prop_map(|(sim_id, params)| WireMessage::ParamAssign { sim_id, params }),
        any::<u16>().prop_map(|ref_msg_type| WireMessage::Ack { ref_msg_type }),
        Just(WireMessage::Shutdown),
    ]
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    })
}

pub fn round_trips(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&any_message(), |msg| {
            let bytes = encode(&msg).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), msg);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A single flipped bit anywhere in a body must surface as a CRC mismatch.
pub fn bit_flips_are_caught(cases: u32) -> Result<(), String> {
    let strategy = (any_message(), any::<usize>(), 0u8..8);
    runner(cases)
        .run(&strategy, |(msg, pick, bit)| {
            let mut bytes = encode(&msg).unwrap();
            let body_len = bytes.len() - wire::HEADER_LEN - wire::CRC_LEN;
            if body_len == 0 {
                // Shutdown: nothing to corrupt.
                return Ok(());
            }
            bytes[wire::HEADER_LEN + pick % body_len] ^= 1 << bit;
            let is_mismatch = matches!(decode(&bytes), Err(WireError::CrcMismatch { .. }));
            prop_assert!(is_mismatch);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

#[test]
fn round_trip() {
    round_trips(10_000).unwrap();
}

#[test]
fn body_bit_flip_is_crc_mismatch() {
    bit_flips_are_caught(2_000).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn stream_of_frames_reads_back_in_order(msgs in prop::collection::vec(any_message(), 0..20)) {
        let mut stream = Vec::new();
        for m in &msgs {
            wire::write_message(&mut stream, m).unwrap();
        }
        let mut reader = FrameReader::new(Cursor::new(stream));
        let mut got = Vec::new();
        while let Some(m) = reader.next_message().unwrap() {
            got.push(m);
        }
        prop_assert_eq!(got, msgs);
    }
}

#[test]
fn every_single_bit_flip_in_a_timestep_body_is_caught() {
    let msg = WireMessage::Timestep {
        sim_id: 9,
        t_index: 11,
        values: (0..16).map(|i| i as f64 * 0.25).collect(),
    };
    let clean = encode(&msg).unwrap();
    for byte in wire::HEADER_LEN..clean.len() - wire::CRC_LEN {
        for bit in 0..8 {
            let mut b = clean.clone();
            b[byte] ^= 1 << bit;
            assert!(
                matches!(decode(&b), Err(WireError::CrcMismatch { .. })),
                "byte {byte} bit {bit}"
            );
        }
    }
}
