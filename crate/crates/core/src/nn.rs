//! Parameter containers and the layers shared by the backbone and the
//! cross-modal match module.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named traversal over the tensors a module owns. Names are dotted paths
/// matching the weight-container manifest.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (true, _) => name.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

impl<T: Scalar> Params<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(p) = self {
            p.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(p) = self {
            p.visit_mut(prefix, out);
        }
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields under
/// the given names, in order.
macro_rules! impl_params {
    ($ty:ident { $($field:ident => $name:expr),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Params<T> for $ty<T> {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::tensor::Tensor<T>)>) {
                $( $crate::nn::Params::visit(&self.$field, &$crate::nn::join(prefix, $name), out); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::tensor::Tensor<T>)>) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, &$crate::nn::join(prefix, $name), out); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// Affine map `x · weight + bias` over the last axis; `weight` is `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl_params!(Linear { weight => "weight", bias => "bias" });

impl<T: Scalar> Linear<T> {
    /// Uniform `±1/√in` initialisation.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, trainable: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[inputs, outputs], bound, rng).with_requires_grad(trainable),
            bias: bias.then(|| Tensor::uniform(&[outputs], bound, rng).with_requires_grad(trainable)),
        }
    }

    pub fn identity(width: usize, trainable: bool) -> Self {
        Self {
            weight: Tensor::eye(width).with_requires_grad(trainable),
            bias: Some(Tensor::zeros(&[width]).with_requires_grad(trainable)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.input(&self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.input(b)?;
                tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl_params!(LayerNorm { gain => "gain", bias => "bias" });

impl<T: Scalar> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(width: usize, trainable: bool) -> Self {
        Self {
            gain: Tensor::full(&[width], T::one()).with_requires_grad(trainable),
            bias: Tensor::zeros(&[width]).with_requires_grad(trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.input(&self.gain)?;
        let b = tape.input(&self.bias)?;
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Attention projections stored flat (`q_weight`, `q_bias`, …) to match the
/// container manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub o_weight: Tensor<T>,
    pub o_bias: Tensor<T>,
}

impl_params!(AttentionWeights {
    q_weight => "q_weight",
    q_bias => "q_bias",
    k_weight => "k_weight",
    k_bias => "k_bias",
    v_weight => "v_weight",
    v_bias => "v_bias",
    o_weight => "o_weight",
    o_bias => "o_bias",
});

impl<T: Scalar> AttentionWeights<T> {
    /// Gaussian weights with the given std, zero biases.
    pub fn gaussian<R: Rng + ?Sized>(width: usize, std: f64, out_std: f64, trainable: bool, rng: &mut R) -> Self {
        let w = |s: f64, rng: &mut R| Tensor::randn(&[width, width], s, rng).with_requires_grad(trainable);
        let b = || Tensor::zeros(&[width]).with_requires_grad(trainable);
        Self {
            q_weight: w(std, rng),
            q_bias: b(),
            k_weight: w(std, rng),
            k_bias: b(),
            v_weight: w(std, rng),
            v_bias: b(),
            o_weight: w(out_std, rng),
            o_bias: b(),
        }
    }

    /// PyTorch-style uniform `±1/√width` weights and biases.
    pub fn uniform<R: Rng + ?Sized>(width: usize, trainable: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut t = |shape: &[usize]| Tensor::uniform(shape, bound, rng).with_requires_grad(trainable);
        Self {
            q_weight: t(&[width, width]),
            q_bias: t(&[width]),
            k_weight: t(&[width, width]),
            k_bias: t(&[width]),
            v_weight: t(&[width, width]),
            v_bias: t(&[width]),
            o_weight: t(&[width, width]),
            o_bias: t(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.q_weight.shape()[0]
    }
}

/// `x · w + b` with both operands pulled from tensors.
pub(crate) fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &Tensor<T>, b: &Tensor<T>) -> Result<Var> {
    let wv = tape.input(w)?;
    let bv = tape.input(b)?;
    let y = tape.matmul(x, wv)?;
    tape.add_broadcast(y, bv)
}

/// Scaled dot-product attention split over `heads` along the model width.
///
/// `q` is `[B, Cq, M]`. Keys and values are either per-sample `[B, Ck, M]`
/// or shared across the batch `[Ck, M]`. Returns the concatenated head
/// outputs and each head's attention matrix `[B, Cq, Ck]`.
pub(crate) fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let qs = tape.shape(q).to_vec();
    let width = *qs.last().unwrap_or(&0);
    if qs.len() != 3 || heads == 0 || width % heads != 0 {
        return Err(Error::shape("attention", &qs, &[heads]));
    }
    let shared = tape.shape(k).len() == 2;
    if tape.shape(k) != tape.shape(v) || *tape.shape(k).last().unwrap_or(&0) != width {
        return Err(Error::shape("attention", tape.shape(k), tape.shape(v)));
    }
    let head_dim = width / heads;
    let key_axis = if shared { 1 } else { 2 };
    let mut outputs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 2, h * head_dim, head_dim)?;
        let kh = tape.narrow(k, key_axis, h * head_dim, head_dim)?;
        let vh = tape.narrow(v, key_axis, h * head_dim, head_dim)?;
        let kt = tape.transpose_last2(kh)?;
        let scores = if shared { tape.matmul(qh, kt)? } else { tape.bmm(qh, kt)? };
        let mut scores = tape.scale(scores, scale);
        if causal {
            scores = tape.causal_mask(scores)?;
        }
        let probs = tape.softmax_last(scores)?;
        let out = if shared { tape.matmul(probs, vh)? } else { tape.bmm(probs, vh)? };
        outputs.push(out);
        maps.push(probs);
    }
    let out = if heads == 1 { outputs[0] } else { tape.concat(&outputs, 2)? };
    Ok((out, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_are_named_by_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![Linear::<f32>::new(2, 3, true, true, &mut rng), Linear::new(3, 1, false, true, &mut rng)];
        let mut out = Vec::new();
        layers.visit("proj", &mut out);
        let names: Vec<_> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["proj.0.weight", "proj.0.bias", "proj.1.weight"]);
    }

    #[test]
    fn single_token_attention_returns_the_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 1, 2], &[0.3, -1.0]).unwrap());
        let kv = tape.constant(Tensor::from_f64(&[1, 1, 2], &[5.0, 7.0]).unwrap());
        let (out, maps) = multi_head_attention(&mut tape, q, kv, kv, 2, 1.0, false).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 7.0]);
        assert_eq!(maps.len(), 2);
        assert_eq!(tape.value(maps[0]).data(), &[1.0]);
    }

    #[test]
    fn causal_first_token_only_sees_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut rng));
        let (_, maps) = multi_head_attention(&mut tape, x, x, x, 1, 0.5, true).unwrap();
        let p = tape.value(maps[0]);
        assert_eq!(p.get(&[0, 0, 0]), 1.0);
        assert_eq!(p.get(&[0, 0, 1]), 0.0);
        assert_eq!(p.get(&[0, 1, 2]), 0.0);
    }
}
