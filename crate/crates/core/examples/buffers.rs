//! The same arrival order through a FIFO queue and through the read-once
//! random buffer: the first hands batches out in arrival order, the second
//! mixes them.
//!
//!     cargo run --example buffers

use rand::rngs::StdRng;
use rand::SeedableRng;

use olts::buffer::{BufferPolicy, MemoryBuffer};

fn drain(policy: BufferPolicy) -> Vec<Vec<u32>> {
    let mut buf = MemoryBuffer::<u32>::new(policy, 16, 1).expect("capacity > 0");
    let mut rng = StdRng::seed_from_u64(2);
    let mut batches = Vec::new();
    for x in 0..40 {
        while !buf.put(x) {
            // Read-once refuses puts when full; take a batch to make room.
            batches.push(buf.try_get_batch(4, &mut rng).expect("full buffer serves").samples);
        }
        if let Some(b) = buf.try_get_batch(4, &mut rng) {
            batches.push(b.samples);
        }
    }
    buf.close();
    while let Some(b) = buf.try_get_batch(4, &mut rng) {
        batches.push(b.samples);
    }
    batches
}

fn main() {
    for policy in [BufferPolicy::Fifo, BufferPolicy::ReadOnceRandom { watermark: 12 }] {
        let batches = drain(policy);
        println!("{policy:?}: {} batches", batches.len());
        for b in batches.iter().take(6) {
            println!("  {b:?}");
        }
    }
}
