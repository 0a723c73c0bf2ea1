//! The dual-branch forecaster.

use std::path::Path;

use rand::Rng;

use crate::backbone::{forward_branch, Backbone, BackboneConfig, Branch, BranchKind, ForwardTrace, LoraConfig};
use crate::container::Container;
use crate::data::instance_normalize;
use crate::error::{Error, Result};
use crate::matching::{cross_modal_match, embed_series, mhsa, AttentionScale, MatchParams, PrincipalEmbeddings};
use crate::nn::{join, Linear, Params};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub input_len: usize,
    pub horizon: usize,
    /// Heads for the series self-attention and the cross-attention;
    /// `None` uses the backbone's head count.
    pub match_heads: Option<usize>,
    pub attention_scale: AttentionScale,
    pub variance_scaled: bool,
    pub lora: LoraConfig,
    pub instance_norm: bool,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, input_len: usize, horizon: usize) -> Self {
        Self {
            backbone,
            input_len,
            horizon,
            match_heads: None,
            attention_scale: AttentionScale::Channels,
            variance_scaled: true,
            lora: LoraConfig::default(),
            instance_norm: true,
        }
    }

    pub fn heads(&self) -> usize {
        self.match_heads.unwrap_or(self.backbone.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.input_len == 0 || self.horizon == 0 {
            return Err(Error::config("input length and horizon must be positive"));
        }
        let h = self.heads();
        if h == 0 || self.backbone.width % h != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by {h} match heads",
                self.backbone.width
            )));
        }
        Ok(())
    }
}

/// One `M → M` map per layer for each branch, applied before the
/// feature loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack<T> {
    pub text: Vec<Linear<T>>,
    pub time: Vec<Linear<T>>,
}

impl<T: Scalar> ProjectionStack<T> {
    /// Identity-initialised trainable maps.
    pub fn identity(layers: usize, width: usize) -> Self {
        Self {
            text: (0..layers).map(|_| Linear::identity(width, true)).collect(),
            time: (0..layers).map(|_| Linear::identity(width, true)).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.text.len()
    }
}

impl<T: Scalar> Params<T> for ProjectionStack<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.text.visit(&join(prefix, "text"), out);
        self.time.visit(&join(prefix, "time"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.text.visit_mut(&join(prefix, "text"), out);
        self.time.visit_mut(&join(prefix, "time"), out);
    }
}

#[derive(Debug, Clone)]
pub struct CalfModel<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    /// Frozen key/value rows `[d, M]` for the cross-attention.
    pub principal: Tensor<T>,
    pub matching: MatchParams<T>,
    pub projections: ProjectionStack<T>,
    pub textual: Branch<T>,
    pub temporal: Branch<T>,
}

impl<T: Scalar> Params<T> for CalfModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.backbone.visit(&join(prefix, "backbone"), out);
        self.principal.visit(&join(prefix, "principal.rows"), out);
        self.matching.visit(&join(prefix, "match"), out);
        self.projections.visit(&join(prefix, "proj"), out);
        self.textual.visit(&join(prefix, "branch.textual"), out);
        self.temporal.visit(&join(prefix, "branch.temporal"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.backbone.visit_mut(&join(prefix, "backbone"), out);
        self.principal.visit_mut(&join(prefix, "principal.rows"), out);
        self.matching.visit_mut(&join(prefix, "match"), out);
        self.projections.visit_mut(&join(prefix, "proj"), out);
        self.textual.visit_mut(&join(prefix, "branch.textual"), out);
        self.temporal.visit_mut(&join(prefix, "branch.temporal"), out);
    }
}

/// Temporal-branch pass over a batch.
#[derive(Debug, Clone)]
pub struct TemporalPass {
    /// Time tokens `[B, C, M]`.
    pub x_time: Var,
    pub trace: ForwardTrace,
    /// Forecast `[B, C, H]` in the input's scale.
    pub forecast: Var,
    /// Per-(sample, channel) location and scale of the input windows.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Textual-branch pass driven by the aligned text tokens.
#[derive(Debug, Clone)]
pub struct TextualPass {
    pub x_text: Var,
    pub attention: Vec<Var>,
    pub trace: ForwardTrace,
    pub forecast: Var,
}

impl<T: Scalar> CalfModel<T> {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        backbone: Backbone<T>,
        principal: &PrincipalEmbeddings,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if backbone.config != config.backbone {
            return Err(Error::config("backbone does not match the model configuration"));
        }
        let m = config.backbone.width;
        if principal.width() != m {
            return Err(Error::config(format!(
                "principal embeddings have width {}, backbone has {m}",
                principal.width()
            )));
        }
        let matching = MatchParams::new(config.input_len, m, rng);
        let projections = ProjectionStack::identity(config.backbone.layers, m);
        let textual = Branch::new(BranchKind::Textual, &backbone, config.horizon, rng);
        let mut temporal = Branch::new(BranchKind::Temporal, &backbone, config.horizon, rng);
        temporal.attach_lora(&config.backbone, &config.lora, rng)?;
        Ok(Self {
            principal: principal.rows(config.variance_scaled),
            backbone,
            matching,
            projections,
            textual,
            temporal,
            config,
        })
    }

    /// Every tensor a training step updates, in a stable order.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_tensors_mut().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    /// Tensors no training step may change.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors().into_iter().filter(|(_, t)| !t.requires_grad()).collect()
    }

    /// `(trainable, total)` scalar counts.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let all = self.named_tensors();
        let trainable = all.iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.len()).sum();
        (trainable, all.iter().map(|(_, t)| t.len()).sum())
    }

    fn check_inputs(&self, inputs: &Tensor<T>) -> Result<()> {
        let s = inputs.shape();
        if s.len() != 3 || s[1] != self.config.input_len {
            return Err(Error::shape("model_input", s, &[self.config.input_len]));
        }
        Ok(())
    }

    /// Embeds `[B, T, C]` windows, runs the temporal branch and maps the
    /// head output back to the input scale.
    pub fn forward_temporal(&self, tape: &mut Tape<T>, inputs: &Tensor<T>) -> Result<TemporalPass> {
        self.check_inputs(inputs)?;
        let (b, c) = (inputs.shape()[0], inputs.shape()[2]);
        let (normalized, mean, std) = if self.config.instance_norm {
            let (x, st) = instance_normalize(inputs)?;
            (x, st.mean, st.std)
        } else {
            (inputs.clone(), vec![T::zero(); b * c], vec![T::one(); b * c])
        };
        let x = tape.constant(normalized);
        let tokens = embed_series(tape, x, &self.matching)?;
        let x_time = mhsa(tape, tokens, &self.matching, self.config.heads())?;
        tape.label(x_time, "x_time");
        let trace = forward_branch(tape, &self.backbone, &self.temporal, x_time)?;
        let forecast = tape.scale_shift_rows(trace.output, &std, &mean)?;
        Ok(TemporalPass {
            x_time,
            trace,
            forecast,
            mean: mean.iter().map(|v| v.as_f64()).collect(),
            std: std.iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Cross-attends the time tokens to the principal rows and runs the
    /// textual branch. Output is rescaled with the temporal pass's state.
    pub fn forward_textual(&self, tape: &mut Tape<T>, temporal: &TemporalPass) -> Result<TextualPass> {
        let rows = tape.input(&self.principal)?;
        let matched = cross_modal_match(
            tape,
            temporal.x_time,
            rows,
            &self.matching,
            self.config.heads(),
            self.config.attention_scale,
        )?;
        tape.label(matched.tokens, "x_text");
        let trace = forward_branch(tape, &self.backbone, &self.textual, matched.tokens)?;
        let std: Vec<T> = temporal.std.iter().map(|&v| T::lit(v)).collect();
        let mean: Vec<T> = temporal.mean.iter().map(|&v| T::lit(v)).collect();
        let forecast = tape.scale_shift_rows(trace.output, &std, &mean)?;
        Ok(TextualPass {
            x_text: matched.tokens,
            attention: matched.attention,
            trace,
            forecast,
        })
    }

    /// Temporal-only forecast of `[B, T, C]` windows, returned as `[B, H, C]`.
    pub fn forecast(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_temporal(&mut tape, inputs)?;
        tape.value(pass.forecast).transpose_last2()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, t) in self.named_tensors() {
            c.insert(name, t);
        }
        c
    }

    /// Rebuilds a model with `config` from a checkpoint; every expected
    /// tensor must be present with the configured shape.
    pub fn from_container(container: &Container, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self::shell(config, container)?;
        let mut problems = Vec::new();
        for (name, slot) in model.named_tensors_mut() {
            match container.stored(&name) {
                None => problems.push(format!("{name}: missing")),
                Some(st) if st.shape != slot.shape() => {
                    problems.push(format!("{name}: expected {:?}, found {:?}", slot.shape(), st.shape))
                }
                Some(st) => {
                    let trainable = slot.requires_grad();
                    *slot = st.to_tensor::<T>().with_requires_grad(trainable);
                }
            }
        }
        let expected: std::collections::HashSet<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        problems.extend(container.names().filter(|n| !expected.contains(*n)).map(|n| format!("{n}: unexpected")));
        if !problems.is_empty() {
            return Err(Error::config(format!(
                "checkpoint does not match the configuration:\n  {}",
                problems.join("\n  ")
            )));
        }
        Ok(model)
    }

    /// Correctly shaped placeholder model; the principal row count is
    /// taken from the checkpoint.
    fn shell(config: ModelConfig, container: &Container) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = config.backbone.width;
        let d = container
            .stored("principal.rows")
            .filter(|s| s.shape.len() == 2)
            .map(|s| s.shape[0])
            .ok_or_else(|| Error::config("checkpoint does not match the configuration:\n  principal.rows: missing"))?;
        let backbone = Backbone::random(config.backbone.clone(), &mut rng)?;
        let principal = PrincipalEmbeddings {
            components: Tensor::zeros(&[d, m]),
            mean: Tensor::zeros(&[m]),
            variances: vec![0.0; d],
            explained_variance_ratio: 0.0,
        };
        Self::new(config, backbone, &principal, &mut rng)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        Self::from_container(&Container::load(path)?, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::WordEmbeddingDict;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model(seed: u64) -> CalfModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = BackboneConfig {
            layers: 2,
            width: 8,
            heads: 2,
            max_positions: 8,
            vocab_size: 40,
            causal: true,
        };
        let backbone = Backbone::random(bb.clone(), &mut rng).unwrap();
        let pca = PrincipalEmbeddings::extract(&WordEmbeddingDict::from_backbone(&backbone), 4).unwrap();
        CalfModel::new(ModelConfig::new(bb, 6, 3), backbone, &pca, &mut rng).unwrap()
    }

    #[test]
    fn trainable_set_excludes_frozen_tensors() {
        let m = tiny_model(0);
        let names: Vec<String> = m.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.starts_with("backbone.") && n != "principal.rows"));
        assert!(!names.iter().any(|n| n.starts_with("branch.textual.position")));
        assert!(names.contains(&"branch.temporal.position_embedding".to_string()));
        assert!(names.contains(&"branch.textual.head.weight".to_string()));
        assert!(names.contains(&"branch.temporal.lora.1.v.b".to_string()));
        assert!(names.contains(&"proj.text.1.weight".to_string()));
        assert!(names.contains(&"match.cross.w_k".to_string()));
        let again: Vec<String> = m.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, again);
    }

    #[test]
    fn forecast_shape_and_counter() {
        let m = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 6, 3], 1.0, &mut rng);
        let y = m.forecast(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert_eq!(m.textual.forward_count(), 0);
        assert_eq!(m.temporal.forward_count(), 1);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let m = tiny_model(3);
        let bytes = m.to_container().to_bytes();
        let back = CalfModel::<f64>::from_container(&Container::from_bytes(&bytes).unwrap(), m.config.clone()).unwrap();
        assert_eq!(back.to_container().to_bytes(), bytes);
        let mut other = m.config.clone();
        other.horizon = 5;
        let err = CalfModel::<f64>::from_container(&Container::from_bytes(&bytes).unwrap(), other).unwrap_err();
        assert!(matches!(err, Error::Config(ref s) if s.contains("branch.temporal.head.weight")), "{err}");
    }
}
