//! GPT-2-shaped transformer stack shared by both branches.
//!
//! Block weights are frozen. Each branch owns a positional table, its own
//! forecasting head and (temporal branch only) LoRA adapters on the
//! attention projections.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{affine, impl_params, join, multi_head_attention, AttentionWeights, LayerNorm, Linear, Params};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Keep the pretrained causal mask over channel tokens.
    pub causal: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::gpt2_small(6)
    }
}

impl BackboneConfig {
    /// The first `layers` blocks of GPT-2 small.
    pub fn gpt2_small(layers: usize) -> Self {
        Self {
            layers,
            width: 768,
            heads: 12,
            max_positions: 1024,
            vocab_size: 50257,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("backbone needs at least one layer"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::config("max_positions and vocab_size must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

impl_params!(Mlp {
    fc_weight => "fc_weight",
    fc_bias => "fc_bias",
    proj_weight => "proj_weight",
    proj_bias => "proj_bias",
});

/// Pre-norm transformer block; every tensor is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln_1: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub ln_2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl_params!(Block {
    ln_1 => "ln_1",
    attn => "attn",
    ln_2 => "ln_2",
    mlp => "mlp",
});

impl<T: Scalar> Block<T> {
    fn random<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Self {
        let m = config.width;
        let std = 0.02;
        let out_std = std / (2.0 * config.layers as f64).sqrt();
        Self {
            ln_1: LayerNorm::new(m, false),
            attn: AttentionWeights::gaussian(m, std, out_std, false, rng),
            ln_2: LayerNorm::new(m, false),
            mlp: Mlp {
                fc_weight: Tensor::randn(&[m, 4 * m], std, rng),
                fc_bias: Tensor::zeros(&[4 * m]),
                proj_weight: Tensor::randn(&[4 * m, m], out_std, rng),
                proj_bias: Tensor::zeros(&[m]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    /// Token-embedding dictionary `[vocab, width]`.
    pub token_embedding: Tensor<T>,
    /// Pretrained positional table `[max_positions, width]`.
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

impl<T: Scalar> Params<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.token_embedding.visit(&join(prefix, "token_embedding"), out);
        self.position_embedding.visit(&join(prefix, "position_embedding"), out);
        self.blocks.visit(&join(prefix, "block"), out);
        self.ln_f.visit(&join(prefix, "ln_f"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.token_embedding.visit_mut(&join(prefix, "token_embedding"), out);
        self.position_embedding.visit_mut(&join(prefix, "position_embedding"), out);
        self.blocks.visit_mut(&join(prefix, "block"), out);
        self.ln_f.visit_mut(&join(prefix, "ln_f"), out);
    }
}

/// Tensors present in a container but not consumed by the loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub unused: Vec<String>,
}

impl<T: Scalar> Backbone<T> {
    /// GPT-2-style random initialisation (N(0, 0.02) weights, unit norms).
    pub fn random<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = config.width;
        let blocks = (0..config.layers).map(|_| Block::random(&config, rng)).collect();
        Ok(Self {
            token_embedding: Tensor::randn(&[config.vocab_size, m], 0.02, rng),
            position_embedding: Tensor::randn(&[config.max_positions, m], 0.01, rng),
            blocks,
            ln_f: LayerNorm::new(m, false),
            config,
        })
    }

    /// Builds the backbone from a container. Blocks beyond `config.layers`
    /// are ignored and listed in the report.
    pub fn from_container(container: &Container, config: BackboneConfig) -> Result<(Self, LoadReport)> {
        config.validate()?;
        let mut shell = Self::shell(&config);
        let mut used = HashSet::new();
        for (name, slot) in shell.named_tensors_mut() {
            *slot = container.get_shaped(&name, slot.shape())?;
            used.insert(name);
        }
        let unused: Vec<String> = container
            .names()
            .filter(|n| !used.contains(*n))
            .map(str::to_string)
            .collect();
        if !unused.is_empty() {
            log::warn!(
                "{} container tensors not used by a {}-layer backbone (first: {})",
                unused.len(),
                config.layers,
                unused[0]
            );
        }
        Ok((shell, LoadReport { unused }))
    }

    pub fn load(path: impl AsRef<Path>, config: BackboneConfig) -> Result<(Self, LoadReport)> {
        Self::from_container(&Container::load(path)?, config)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, t) in self.named_tensors() {
            c.insert(name, t);
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    /// Zero-filled tensors with the right shapes.
    fn shell(config: &BackboneConfig) -> Self {
        let m = config.width;
        let z = |s: &[usize]| Tensor::zeros(s);
        let block = || Block {
            ln_1: LayerNorm::new(m, false),
            attn: AttentionWeights {
                q_weight: z(&[m, m]),
                q_bias: z(&[m]),
                k_weight: z(&[m, m]),
                k_bias: z(&[m]),
                v_weight: z(&[m, m]),
                v_bias: z(&[m]),
                o_weight: z(&[m, m]),
                o_bias: z(&[m]),
            },
            ln_2: LayerNorm::new(m, false),
            mlp: Mlp {
                fc_weight: z(&[m, 4 * m]),
                fc_bias: z(&[4 * m]),
                proj_weight: z(&[4 * m, m]),
                proj_bias: z(&[m]),
            },
        };
        Self {
            token_embedding: z(&[config.vocab_size, m]),
            position_embedding: z(&[config.max_positions, m]),
            blocks: (0..config.layers).map(|_| block()).collect(),
            ln_f: LayerNorm::new(m, false),
            config: config.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Runs `branch` over `tokens` (`[C, M]` or `[B, C, M]`).
    pub fn forward_branch(&self, tape: &mut Tape<T>, branch: &Branch<T>, tokens: Var) -> Result<ForwardTrace> {
        forward_branch(tape, self, branch, tokens)
    }
}

/// Attention projection a LoRA adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnTarget {
    Query,
    Key,
    Value,
    Output,
}

impl AttnTarget {
    pub fn short(self) -> &'static str {
        match self {
            AttnTarget::Query => "q",
            AttnTarget::Key => "k",
            AttnTarget::Value => "v",
            AttnTarget::Output => "o",
        }
    }
}

impl fmt::Display for AttnTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for AttnTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "q" | "query" => Ok(AttnTarget::Query),
            "k" | "key" => Ok(AttnTarget::Key),
            "v" | "value" => Ok(AttnTarget::Value),
            "o" | "output" => Ok(AttnTarget::Output),
            other => Err(Error::config(format!("unknown attention matrix `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<AttnTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![AttnTarget::Query, AttnTarget::Value],
        }
    }
}

/// Low-rank delta `(alpha / rank) · A · B` added to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub block: usize,
    pub target: AttnTarget,
    /// Down-projection `[M, r]`.
    pub a: Tensor<T>,
    /// Up-projection `[r, M]`, zero at creation.
    pub b: Tensor<T>,
    pub alpha: f64,
    pub rank: usize,
}

impl_params!(LoraAdapter { a => "a", b => "b" });

impl<T: Scalar> LoraAdapter<T> {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn delta(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let a = tape.input(&self.a)?;
        let b = tape.input(&self.b)?;
        let down = tape.matmul(x, a)?;
        let up = tape.matmul(down, b)?;
        Ok(tape.scale(up, self.scaling()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Consumes aligned text tokens; never adapted, never used at inference.
    Textual,
    /// Consumes time tokens and produces the model output.
    Temporal,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Textual => "textual",
            BranchKind::Temporal => "temporal",
        }
    }
}

/// Per-branch state: positional table copy, adapters and forecasting head.
#[derive(Debug)]
pub struct Branch<T> {
    pub kind: BranchKind,
    pub position_embedding: Tensor<T>,
    pub adapters: Vec<LoraAdapter<T>>,
    pub head: Linear<T>,
    forwards: AtomicUsize,
}

impl<T: Clone> Clone for Branch<T> {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind,
            position_embedding: self.position_embedding.clone(),
            adapters: self.adapters.clone(),
            head: self.head.clone(),
            forwards: AtomicUsize::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> Params<T> for Branch<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.position_embedding.visit(&join(prefix, "position_embedding"), out);
        for ad in &self.adapters {
            ad.visit(&join(prefix, &format!("lora.{}.{}", ad.block, ad.target)), out);
        }
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.position_embedding.visit_mut(&join(prefix, "position_embedding"), out);
        for ad in &mut self.adapters {
            let name = format!("lora.{}.{}", ad.block, ad.target);
            ad.visit_mut(&join(prefix, &name), out);
        }
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

impl<T: Scalar> Branch<T> {
    /// Copies the backbone's positional table (trainable only for the
    /// temporal branch) and creates a `width → horizon` head.
    pub fn new<R: Rng + ?Sized>(kind: BranchKind, backbone: &Backbone<T>, horizon: usize, rng: &mut R) -> Self {
        let trainable = kind == BranchKind::Temporal;
        Self {
            kind,
            position_embedding: backbone.position_embedding.clone().with_requires_grad(trainable),
            adapters: Vec::new(),
            head: Linear::new(backbone.config.width, horizon, true, true, rng),
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn horizon(&self) -> usize {
        self.head.outputs()
    }

    /// Number of forward passes run through this branch.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Adds one adapter per (block, target) with Gaussian `A` and zero `B`.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, config: &BackboneConfig, lora: &LoraConfig, rng: &mut R) -> Result<()> {
        if self.kind != BranchKind::Temporal {
            return Err(Error::usage("LoRA adapters can only be attached to the temporal branch"));
        }
        if lora.rank == 0 {
            return Err(Error::usage("LoRA rank must be at least 1"));
        }
        if lora.targets.is_empty() {
            return Err(Error::usage("LoRA needs at least one target matrix"));
        }
        let m = config.width;
        let std = 1.0 / (m as f64).sqrt();
        for block in 0..config.layers {
            for &target in &lora.targets {
                if self.adapters.iter().any(|a| a.block == block && a.target == target) {
                    return Err(Error::usage(format!("block {block} already has a `{target}` adapter")));
                }
                self.adapters.push(LoraAdapter {
                    block,
                    target,
                    a: Tensor::randn(&[m, lora.rank], std, rng).with_requires_grad(true),
                    b: Tensor::zeros(&[lora.rank, m]).with_requires_grad(true),
                    alpha: lora.alpha,
                    rank: lora.rank,
                });
            }
        }
        Ok(())
    }

    fn adapter(&self, block: usize, target: AttnTarget) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.block == block && a.target == target)
    }
}

/// Per-block hidden states and the head output of one branch pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `F¹ … Fᴸ`, each shaped like the input tokens.
    pub features: Vec<Var>,
    /// Head output `[.., C, H]`.
    pub output: Var,
}

fn projection<T: Scalar>(
    tape: &mut Tape<T>,
    branch: &Branch<T>,
    block: usize,
    target: AttnTarget,
    x: Var,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Var> {
    let y = affine(tape, x, w, b)?;
    match branch.adapter(block, target) {
        Some(ad) => {
            let d = ad.delta(tape, x)?;
            tape.add(y, d)
        }
        None => Ok(y),
    }
}

fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    index: usize,
    block: &Block<T>,
    branch: &Branch<T>,
    h: Var,
) -> Result<Var> {
    let w = &block.attn;
    let a = block.ln_1.forward(tape, h)?;
    let q = projection(tape, branch, index, AttnTarget::Query, a, &w.q_weight, &w.q_bias)?;
    let k = projection(tape, branch, index, AttnTarget::Key, a, &w.k_weight, &w.k_bias)?;
    let v = projection(tape, branch, index, AttnTarget::Value, a, &w.v_weight, &w.v_bias)?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let (attn, _) = multi_head_attention(tape, q, k, v, config.heads, scale, config.causal)?;
    let o = projection(tape, branch, index, AttnTarget::Output, attn, &w.o_weight, &w.o_bias)?;
    let h = tape.add(h, o)?;

    let m = block.ln_2.forward(tape, h)?;
    let m = affine(tape, m, &block.mlp.fc_weight, &block.mlp.fc_bias)?;
    let m = tape.gelu(m);
    let m = affine(tape, m, &block.mlp.proj_weight, &block.mlp.proj_bias)?;
    tape.add(h, m)
}

/// Adds the branch's first `C` positions, runs every block (with the
/// branch's LoRA deltas), records each block output and applies the head
/// after the final layer norm.
pub fn forward_branch<T: Scalar>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    branch: &Branch<T>,
    tokens: Var,
) -> Result<ForwardTrace> {
    let config = &backbone.config;
    let shape = tape.shape(tokens).to_vec();
    let unbatched = shape.len() == 2;
    if !(shape.len() == 2 || shape.len() == 3) || shape[shape.len() - 1] != config.width {
        return Err(Error::shape("forward_branch", &shape, &[config.width]));
    }
    let channels = shape[shape.len() - 2];
    if channels > config.max_positions {
        return Err(Error::Capacity(format!(
            "{channels} tokens exceed the {} available positions",
            config.max_positions
        )));
    }
    let mut h = if unbatched {
        tape.reshape(tokens, &[1, channels, config.width])?
    } else {
        tokens
    };
    let positions = tape.input(&branch.position_embedding)?;
    let positions = tape.narrow(positions, 0, 0, channels)?;
    h = tape.add_broadcast(h, positions)?;

    let mut features = Vec::with_capacity(config.layers);
    for (i, block) in backbone.blocks.iter().enumerate() {
        h = block_forward(tape, config, i, block, branch, h)?;
        tape.label(h, format!("{}.block.{i}", branch.kind.name()));
        features.push(h);
    }
    let last = backbone.ln_f.forward(tape, h)?;
    let mut output = branch.head.forward(tape, last)?;
    tape.label(output, format!("{}.head", branch.kind.name()));

    if unbatched {
        for f in &mut features {
            *f = tape.reshape(*f, &[channels, config.width])?;
        }
        output = tape.reshape(output, &[channels, branch.horizon()])?;
    }
    branch.forwards.fetch_add(1, Ordering::Relaxed);
    Ok(ForwardTrace { features, output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            width: 8,
            heads: 2,
            max_positions: 6,
            vocab_size: 20,
            causal: true,
        }
    }

    fn setup() -> (Backbone<f64>, Branch<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = Backbone::random(tiny(), &mut rng).unwrap();
        let br = Branch::new(BranchKind::Temporal, &bb, 3, &mut rng);
        (bb, br, rng)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        c = tiny();
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_shapes_batched_and_unbatched() {
        let (bb, br, mut rng) = setup();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let tr = bb.forward_branch(&mut tape, &br, x).unwrap();
        assert_eq!(tr.features.len(), 2);
        assert!(tr.features.iter().all(|f| tape.shape(*f) == [4, 8]));
        assert_eq!(tape.shape(tr.output), &[4, 3]);

        let xb = tape.constant(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        let tr = bb.forward_branch(&mut tape, &br, xb).unwrap();
        assert_eq!(tape.shape(tr.output), &[2, 4, 3]);
        assert_eq!(br.forward_count(), 2);
    }

    #[test]
    fn too_many_tokens_is_a_capacity_error() {
        let (bb, br, _) = setup();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[7, 8]));
        assert!(matches!(bb.forward_branch(&mut tape, &br, x), Err(Error::Capacity(_))));
    }

    #[test]
    fn lora_rules() {
        let (bb, mut br, mut rng) = setup();
        let before: usize = br.named_tensors().iter().map(|(_, t)| t.len()).sum();
        br.attach_lora(&bb.config, &LoraConfig::default(), &mut rng).unwrap();
        let after: usize = br.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(after - before, 2 * 2 * (2 * 8 * 8));
        assert!(br.adapters.iter().all(|a| a.b.data().iter().all(|&v| v == 0.0)));

        let mut textual = Branch::new(BranchKind::Textual, &bb, 3, &mut rng);
        assert!(matches!(
            textual.attach_lora(&bb.config, &LoraConfig::default(), &mut rng),
            Err(Error::Usage(_))
        ));
        let zero_rank = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        let (_, mut fresh, _) = setup();
        assert!(fresh.attach_lora(&bb.config, &zero_rank, &mut rng).is_err());
    }

    #[test]
    fn zero_b_adapters_leave_the_forward_unchanged() {
        let (bb, br, mut rng) = setup();
        let mut adapted = br.clone();
        adapted.attach_lora(&bb.config, &LoraConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let run = |branch: &Branch<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let tr = bb.forward_branch(&mut tape, branch, v).unwrap();
            let mut vals: Vec<Tensor<f64>> = tr.features.iter().map(|f| tape.value(*f).clone()).collect();
            vals.push(tape.value(tr.output).clone());
            vals
        };
        for (a, b) in run(&br).iter().zip(run(&adapted).iter()) {
            assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn branches_agree_when_heads_match_and_adapters_are_zero() {
        let (bb, mut temporal, mut rng) = setup();
        temporal.attach_lora(&bb.config, &LoraConfig::default(), &mut rng).unwrap();
        let mut textual = Branch::new(BranchKind::Textual, &bb, 3, &mut rng);
        textual.head = temporal.head.clone();
        textual.head.weight.set_requires_grad(false);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let a = bb.forward_branch(&mut tape, &textual, v).unwrap();
        let b = bb.forward_branch(&mut tape, &temporal, v).unwrap();
        for (fa, fb) in a.features.iter().chain([&a.output]).zip(b.features.iter().chain([&b.output])) {
            assert!(tape.value(*fa).bit_eq(tape.value(*fb)));
        }
        assert!(!textual.position_embedding.requires_grad());
        assert!(temporal.position_embedding.requires_grad());
    }

    #[test]
    fn container_round_trip_and_prefix_loading() {
        let (bb, _, mut rng) = setup();
        let c = bb.to_container();
        let (back, report) = Backbone::<f64>::from_container(&c, tiny()).unwrap();
        assert!(report.unused.is_empty());
        assert_eq!(back, bb);

        let shallow = BackboneConfig { layers: 1, ..tiny() };
        let (one, report) = Backbone::<f64>::from_container(&c, shallow).unwrap();
        assert_eq!(one.blocks.len(), 1);
        assert_eq!(one.blocks[0], bb.blocks[0]);
        assert!(!report.unused.is_empty());
        assert!(report.unused.iter().all(|n| n.starts_with("block.1.")));

        let deeper = BackboneConfig { layers: 3, ..tiny() };
        let err = Backbone::<f64>::from_container(&c, deeper).unwrap_err();
        assert!(matches!(err, Error::Manifest(ref n) if n.starts_with("block.2.")), "{err}");

        let wider = BackboneConfig { width: 4, heads: 2, ..tiny() };
        assert!(matches!(Backbone::<f64>::from_container(&c, wider), Err(Error::Config(_))));
        let _ = &mut rng;
    }

    #[test]
    fn manifest_names() {
        let (bb, br, _) = setup();
        let names: Vec<String> = bb.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"block.0.attn.q_weight".to_string()));
        assert!(names.contains(&"block.1.mlp.proj_bias".to_string()));
        assert!(names.contains(&"ln_f.gain".to_string()));
        assert!(bb.named_tensors().iter().all(|(_, t)| !t.requires_grad()));
        let bnames: Vec<String> = br.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(bnames, ["position_embedding", "head.weight", "head.bias"]);
    }
}
