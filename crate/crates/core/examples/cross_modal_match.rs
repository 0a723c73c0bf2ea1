//! Channel tokens from a series window attend over principal word
//! directions; prints the attention map and relevance to chosen words.

use calf::data::{instance_normalize, synthetic};
use calf::matching::{
    average_maps, cross_modal_match, embed_series, mhsa, word_relevance, AttentionScale, MatchParams,
    PrincipalEmbeddings, WordEmbeddingDict,
};
use calf::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let (t, m, heads, d) = (48, 32, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Unit-scale rows; a freshly initialised token table is too small
    // for the attention to move away from uniform.
    let dict = WordEmbeddingDict::new(Tensor::randn(&[300, m], 1.0, &mut rng), None)?;
    let principal = PrincipalEmbeddings::extract(&dict, d)?;
    let params = MatchParams::<f64>::new(t, m, &mut rng);

    let series = synthetic(t, 3, 2);
    let (window, _) = instance_normalize(&series.values)?;

    let mut tape = Tape::new();
    let x = tape.constant(window);
    let tokens = embed_series(&mut tape, x, &params)?;
    let x_time = mhsa(&mut tape, tokens, &params, heads)?;
    let rows = tape.constant(principal.rows::<f64>(true));
    let out = cross_modal_match(&mut tape, x_time, rows, &params, heads, AttentionScale::Channels)?;
    println!("text tokens {:?}", tape.shape(out.tokens));

    let map = average_maps(&tape, &out.attention)?;
    println!("head-averaged attention over {d} principal directions:");
    for (c, name) in series.channels.iter().enumerate() {
        let row: Vec<String> = (0..d).map(|k| format!("{:.3}", map.get(&[c, k]))).collect();
        println!("  {name}: {}", row.join(" "));
    }

    let words: Tensor<f64> = dict.select(&[5, 17, 42])?;
    let x_time = tape.value(x_time).clone();
    let rel = word_relevance(&x_time, &words, &params, heads, AttentionScale::Channels)?;
    println!("relevance to words #5 #17 #42:");
    for (c, name) in series.channels.iter().enumerate() {
        println!("  {name}: {:.3} {:.3} {:.3}", rel.get(&[c, 0]), rel.get(&[c, 1]), rel.get(&[c, 2]));
    }
    Ok(())
}
