//! Principal directions of a word-embedding table and how much variance
//! each prefix of them keeps.

use calf::backbone::{Backbone, BackboneConfig};
use calf::matching::{PrincipalEmbeddings, WordEmbeddingDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let config = BackboneConfig {
        layers: 1,
        width: 48,
        heads: 4,
        max_positions: 16,
        vocab_size: 2000,
        causal: true,
    };
    let backbone = Backbone::<f32>::random(config, &mut ChaCha8Rng::seed_from_u64(3))?;
    let dict = WordEmbeddingDict::from_backbone(&backbone);
    println!("dictionary: {} words x {} dims", dict.vocab_size(), dict.width());

    for d in [1, 4, 8, 16, 32, 48] {
        let p = PrincipalEmbeddings::extract(&dict, d)?;
        println!("d={d:>2} explained_variance_ratio={:.4}", p.explained_variance_ratio);
    }

    let p = PrincipalEmbeddings::extract(&dict, 16)?;
    let rows = p.rows::<f32>(true);
    println!("key/value rows: {:?}, leading variance {:.3e}", rows.shape(), p.variances[0]);

    let dir = std::env::temp_dir().join("calf-principal-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("principal.calf");
    p.save(&path)?;
    let back = PrincipalEmbeddings::load(&path)?;
    println!("reloaded {} components from {}", back.dim(), path.display());
    Ok(())
}
