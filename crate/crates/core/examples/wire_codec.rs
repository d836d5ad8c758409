//! Encode a few messages, show the bytes, decode them back, and watch a
//! flipped body bit turn into a checksum error.
//!
//!     cargo run --example wire_codec

use olts::wire::{self, WireMessage};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let msgs = [
        WireMessage::Hello {
            client_id: 1,
            sim_id: 7,
            params: vec![28.0],
            field_shape: vec![3],
        },
        WireMessage::Timestep {
            sim_id: 7,
            t_index: 0,
            values: vec![1.0, 1.0, 1.0],
        },
        WireMessage::Bye { sim_id: 7, last_t: 2000 },
        WireMessage::Shutdown,
    ];
    for m in &msgs {
        let bytes = wire::encode(m).expect("encodes");
        assert_eq!(&wire::decode(&bytes).expect("decodes"), m);
        println!("{:?} ({} bytes)\n  {}", m.msg_type(), bytes.len(), hex(&bytes));
    }

    let mut bye = wire::encode(&msgs[2]).unwrap();
    bye[12] ^= 0x01;
    println!("body bit flipped: {}", wire::decode(&bye).unwrap_err());
}
