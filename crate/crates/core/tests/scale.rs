//! Parameter budget of the default six-layer configuration.

use calf::backbone::{Backbone, BackboneConfig};
use calf::matching::PrincipalEmbeddings;
use calf::model::{CalfModel, ModelConfig};
use calf::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn default_configuration_parameter_counts_follow_closed_form() {
    let bb = BackboneConfig::default();
    let (l, m, p, v) = (bb.layers, bb.width, bb.max_positions, bb.vocab_size);
    let (t, h, d, r) = (96, 96, 500, 8);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = Backbone::<f32>::random(bb.clone(), &mut rng).unwrap();
    // Zero rows stand in for real principal directions; only shapes matter.
    let principal = PrincipalEmbeddings {
        components: Tensor::zeros(&[d, m]),
        mean: Tensor::zeros(&[m]),
        variances: vec![1.0; d],
        explained_variance_ratio: 1.0,
    };
    let model = CalfModel::new(ModelConfig::new(bb, t, h), backbone, &principal, &mut rng).unwrap();
    let (trainable, total) = model.parameter_counts();

    let linear = |i: usize, o: usize| i * o + o;
    let expected_trainable = linear(t, m)
        + 2 * m
        + 4 * linear(m, m)
        + 3 * m * m
        + 2 * l * linear(m, m)
        + p * m
        + l * 2 * (2 * m * r)
        + 2 * linear(m, h);
    let block = 2 * 2 * m + 4 * linear(m, m) + linear(m, 4 * m) + linear(4 * m, m);
    let expected_frozen = v * m + 2 * p * m + l * block + 2 * m + d * m;

    assert_eq!(trainable, expected_trainable);
    assert_eq!(total, expected_trainable + expected_frozen);
    assert_eq!((trainable, total), (12_376_512, 95_459_520));
    // The identity-initialised alignment projections alone are more than
    // half of the trainable budget.
    let projections: usize = model
        .trainable_parameters()
        .iter()
        .filter(|(n, _)| n.starts_with("proj."))
        .map(|(_, t)| t.len())
        .sum();
    assert_eq!(projections, 2 * l * linear(m, m));
    assert!(projections * 2 > trainable);
}
