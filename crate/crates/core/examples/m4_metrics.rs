//! Writes a small yearly collection in the competition's CSV layout,
//! trains briefly and reports SMAPE, MASE and OWA.

use std::fmt::Write as _;

use calf::backbone::{Backbone, BackboneConfig};
use calf::data::{load_m4, M4Group};
use calf::matching::{PrincipalEmbeddings, WordEmbeddingDict};
use calf::metrics;
use calf::model::{CalfModel, ModelConfig};
use calf::tensor::LossKind;
use calf::train::{evaluate_m4, fit, LossWeights, M4Windows, SimSpec, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> calf::Result<()> {
    let dir = std::env::temp_dir().join("calf-m4-example");
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut train, mut test) = (String::from("V1,V2\n"), String::from("V1,V2\n"));
    for i in 0..60 {
        // A few series are too short to cut a window from and are skipped.
        let len = if i % 15 == 0 { 10 } else { rng.random_range(20..40) };
        let (level, slope) = (rng.random_range(500.0..3000.0), rng.random_range(-20.0..60.0));
        let values: Vec<f64> = (0..len + 6)
            .map(|t| level + slope * t as f64 + rng.random_range(-30.0..30.0))
            .collect();
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(train, "Y{i},{}", fmt(&values[..len]));
        let _ = writeln!(test, "Y{i},{}", fmt(&values[len..]));
    }
    std::fs::write(dir.join("Yearly-train.csv"), train)?;
    std::fs::write(dir.join("Yearly-test.csv"), test)?;

    let coll = load_m4(&dir, M4Group::Yearly)?.remove(0);
    println!(
        "{}: {} series kept, {} skipped, T={} H={}",
        coll.frequency,
        coll.series.len(),
        coll.skipped,
        coll.input_len(),
        coll.horizon()
    );

    let bb = BackboneConfig {
        layers: 2,
        width: 32,
        heads: 4,
        max_positions: 4,
        vocab_size: 128,
        causal: true,
    };
    let backbone = Backbone::<f32>::random(bb.clone(), &mut rng)?;
    let principal = PrincipalEmbeddings::extract(&WordEmbeddingDict::from_backbone(&backbone), 16)?;
    let mut model = CalfModel::new(ModelConfig::new(bb, coll.input_len(), coll.horizon()), backbone, &principal, &mut rng)?;
    let sim = SimSpec {
        sup: LossKind::Smape,
        feature: LossKind::SmoothL1,
        output: LossKind::Mase,
    };
    let config = TrainConfig {
        epochs: 20,
        batch_size: 16,
        season: coll.frequency.seasonality(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, LossWeights::default(), sim)?;
    let summary = fit(&mut model, &mut trainer, &M4Windows::new(&coll, 4), None)?;
    println!("{} optimizer steps", summary.steps);

    let (ref_smape, ref_mase) = metrics::seasonal_naive_reference(
        coll.series.iter().map(|s| (&s.train[..], &s.test[..])),
        coll.frequency.seasonality(),
    )?;
    println!("seasonal-naive reference: smape {ref_smape:.3} mase {ref_mase:.3}");
    print!("{}", evaluate_m4(&model, &coll, Some((ref_smape, ref_mase)))?);
    Ok(())
}
