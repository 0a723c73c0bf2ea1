//! A frozen GPT-2 style backbone driven by two branches: one with LoRA
//! adapters on the query and value projections, one without.

use calf::backbone::{forward_branch, AttnTarget, Backbone, BackboneConfig, Branch, BranchKind, LoraConfig};
use calf::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = BackboneConfig {
        layers: 3,
        width: 32,
        heads: 4,
        max_positions: 16,
        vocab_size: 100,
        causal: true,
    };
    let backbone = Backbone::<f64>::random(config.clone(), &mut rng)?;
    println!("frozen backbone parameters: {}", backbone.parameter_count());

    let plain = Branch::new(BranchKind::Temporal, &backbone, 12, &mut rng);
    let mut adapted = plain.clone();
    let lora = LoraConfig {
        targets: vec![AttnTarget::Query, AttnTarget::Value],
        ..LoraConfig::default()
    };
    adapted.attach_lora(&config, &lora, &mut rng)?;
    for ad in &adapted.adapters {
        println!("adapter block {} {}: A {:?} B {:?}", ad.block, ad.target, ad.a.shape(), ad.b.shape());
    }

    let tokens: Tensor<f64> = Tensor::randn(&[5, 32], 1.0, &mut rng);
    let run = |branch: &Branch<f64>| -> calf::Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let trace = forward_branch(&mut tape, &backbone, branch, x)?;
        Ok(tape.value(trace.output).clone())
    };
    let before = run(&adapted)?;
    println!("B = 0: output differs from the plain branch by {:.1e}", before.max_abs_diff(&run(&plain)?));

    for ad in &mut adapted.adapters {
        for v in ad.b.data_mut() {
            *v = 0.01;
        }
    }
    println!("B = 0.01: output moves by {:.3e}", run(&adapted)?.max_abs_diff(&before));

    let mut textual = Branch::new(BranchKind::Textual, &backbone, 12, &mut rng);
    match textual.attach_lora(&config, &lora, &mut rng) {
        Err(e) => println!("textual branch refuses adapters: {e}"),
        Ok(()) => println!("unexpected: textual branch accepted adapters"),
    }
    Ok(())
}
