//! Inspects, round-trips and deliberately corrupts a weight container.

use calf::backbone::{Backbone, BackboneConfig};
use calf::container::Container;
use calf::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let config = BackboneConfig {
        layers: 1,
        width: 16,
        heads: 2,
        max_positions: 8,
        vocab_size: 32,
        causal: true,
    };
    let backbone = Backbone::<f32>::random(config.clone(), &mut ChaCha8Rng::seed_from_u64(8))?;
    let bytes = backbone.to_container().to_bytes();
    println!("{} bytes", bytes.len());

    let container = Container::from_bytes(&bytes)?;
    for (name, t) in container.iter() {
        println!("  {name:<32} {:?} {:?}", t.data.dtype(), t.shape);
    }

    let (reloaded, report) = Backbone::<f32>::from_container(&container, config)?;
    assert_eq!(reloaded.to_container().to_bytes(), bytes);
    println!("round trip byte-identical, {} unused tensors", report.unused.len());

    let mut corrupt = bytes.clone();
    corrupt.truncate(bytes.len() / 2);
    match Container::from_bytes(&corrupt) {
        Err(Error::Format { offset, message }) => println!("truncated file rejected at byte {offset}: {message}"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
