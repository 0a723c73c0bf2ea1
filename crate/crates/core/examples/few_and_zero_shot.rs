//! Trains on the leading tenth of the training split, then evaluates the
//! same model on a dataset it has never seen.

use calf::backbone::{Backbone, BackboneConfig};
use calf::data::{split, synthetic, GlobalScaler, SplitSpec, WindowSpec};
use calf::matching::{PrincipalEmbeddings, WordEmbeddingDict};
use calf::model::{CalfModel, ModelConfig};
use calf::train::{evaluate, fit, naive_repeat_last_mse, LossWeights, SeriesWindows, SimSpec, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scaled(n: usize, channels: usize, seed: u64, spec: &SplitSpec, window: &WindowSpec) -> calf::Result<calf::data::Splits> {
    let raw = synthetic(n, channels, seed);
    let full = split(&raw, &SplitSpec { few_shot_fraction: 1.0, ..spec.clone() }, window)?;
    split(&GlobalScaler::fit(&full.train).transform(&raw)?, spec, window)
}

fn main() -> calf::Result<()> {
    let window = WindowSpec::new(48, 12)?;
    let few = SplitSpec {
        few_shot_fraction: 0.1,
        ..SplitSpec::default()
    };
    let source = scaled(3000, 3, 1, &few, &window)?;
    println!("few-shot: training on {} of {} training rows", source.train.len(), source.full_train_len);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bb = BackboneConfig {
        layers: 2,
        width: 32,
        heads: 4,
        max_positions: 16,
        vocab_size: 256,
        causal: true,
    };
    let backbone = Backbone::<f32>::random(bb.clone(), &mut rng)?;
    let principal = PrincipalEmbeddings::extract(&WordEmbeddingDict::from_backbone(&backbone), 16)?;
    let mut model = CalfModel::new(ModelConfig::new(bb, 48, 12), backbone, &principal, &mut rng)?;
    let mut trainer = Trainer::new(TrainConfig { epochs: 5, ..TrainConfig::default() }, LossWeights::default(), SimSpec::default())?;
    let train = SeriesWindows { view: &source.train, spec: window };
    let val = SeriesWindows { view: &source.val, spec: window };
    let summary = fit(&mut model, &mut trainer, &train, Some(&val))?;
    println!("{} optimizer steps over {} windows", summary.steps, summary.train_windows);
    println!("source test:\n{}", evaluate(&model, &source.test, 48, 64)?);

    // A different generator seed and channel count; no further training.
    let target = scaled(1500, 5, 77, &SplitSpec::default(), &window)?;
    let report = evaluate(&model, &target.test, 48, 64)?;
    println!("zero-shot target (optimizer steps: 0):\n{report}");
    println!("repeat-last baseline mse {:.4}", naive_repeat_last_mse(&target.test, &window)?);
    Ok(())
}
