//! Trains the full model on a synthetic three-channel series with a small
//! random backbone and compares the test MSE with a repeat-last baseline.

use std::time::Instant;

use calf::backbone::{Backbone, BackboneConfig};
use calf::data::{split, synthetic, GlobalScaler, SplitSpec, WindowSpec};
use calf::matching::{PrincipalEmbeddings, WordEmbeddingDict};
use calf::model::{CalfModel, ModelConfig};
use calf::train::{evaluate, fit, naive_repeat_last_mse, LossWeights, SeriesWindows, SimSpec, TrainConfig, Trainer};
use calf::metrics::Metric;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let started = Instant::now();
    let window = WindowSpec::new(96, 24)?;
    let raw = synthetic(2000, 3, 7);
    let full = split(&raw, &SplitSpec::default(), &window)?;
    let ds = GlobalScaler::fit(&full.train).transform(&raw)?;
    let splits = split(&ds, &SplitSpec::default(), &window)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bb = BackboneConfig {
        layers: 2,
        width: 64,
        heads: 4,
        max_positions: 16,
        vocab_size: 512,
        causal: true,
    };
    let backbone = Backbone::<f32>::random(bb.clone(), &mut rng)?;
    let principal = PrincipalEmbeddings::extract(&WordEmbeddingDict::from_backbone(&backbone), 32)?;
    let mut model = CalfModel::new(ModelConfig::new(bb, 96, 24), backbone, &principal, &mut rng)?;
    let (trainable, total) = model.parameter_counts();
    println!("parameters: {trainable} trainable of {total}");

    let config = TrainConfig { epochs: 10, seed: 7, ..TrainConfig::default() };
    let mut trainer = Trainer::new(config, LossWeights::default(), SimSpec::default())?;
    let train = SeriesWindows { view: &splits.train, spec: window };
    let val = SeriesWindows { view: &splits.val, spec: window };
    let summary = fit(&mut model, &mut trainer, &train, Some(&val))?;

    let report = evaluate(&model, &splits.test, 96, 64)?;
    let mse = report.get(Metric::Mse, 24).unwrap_or(f64::NAN);
    let naive = naive_repeat_last_mse(&splits.test, &window)?;
    println!("{report}");
    println!(
        "steps={} epochs={} test_mse={mse:.4} naive_mse={naive:.4} improvement={:.1}% elapsed={:.1}s",
        summary.steps,
        summary.epochs,
        100.0 * (1.0 - mse / naive),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
