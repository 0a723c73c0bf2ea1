//! Loss components of one batch under the full objective and with each
//! alignment term switched off.

use calf::backbone::{Backbone, BackboneConfig};
use calf::data::{batch, synthetic, WindowSpec};
use calf::matching::{PrincipalEmbeddings, WordEmbeddingDict};
use calf::model::{CalfModel, ModelConfig};
use calf::tensor::LossKind;
use calf::train::{LossWeights, SimSpec, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let bb = BackboneConfig {
        layers: 3,
        width: 32,
        heads: 4,
        max_positions: 8,
        vocab_size: 128,
        causal: true,
    };
    let backbone = Backbone::<f64>::random(bb.clone(), &mut rng)?;
    let principal = PrincipalEmbeddings::extract(&WordEmbeddingDict::from_backbone(&backbone), 16)?;
    let mut model = CalfModel::new(ModelConfig::new(bb, 32, 8), backbone, &principal, &mut rng)?;

    let spec = WindowSpec::new(32, 8)?;
    let data = synthetic(200, 3, 9);
    let (x, y) = batch::<f64>(&data, &spec, &[0, 40, 80, 120])?;

    let weights = LossWeights::default();
    println!("gamma={} lambda1={} lambda2={}", weights.gamma, weights.lambda1, weights.lambda2);
    println!("layer weights {:?}", weights.layer_weights(3));

    let variants = [
        ("full", true, true, false),
        ("no feature", false, true, false),
        ("no output", true, false, false),
        ("supervised only", false, false, false),
        ("stop-gradient text", true, true, true),
    ];
    println!("{:<20} {:>9} {:>9} {:>9} {:>9} {:>12}", "variant", "sup", "feature", "output", "total", "|grad proj|");
    for (name, feature, output, stop) in variants {
        let config = TrainConfig {
            enable_feature: feature,
            enable_output: output,
            stop_gradient_textual: stop,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(config, weights, SimSpec::uniform(LossKind::SmoothL1))?;
        let (l, grads) = trainer.gradients(&mut model, &x, &y)?;
        let proj: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with("proj."))
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        println!(
            "{name:<20} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {proj:>12.3e}",
            l.sup, l.feature, l.output, l.total
        );
    }
    Ok(())
}
