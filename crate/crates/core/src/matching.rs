//! Cross-modal match: channel tokens, principal word embeddings and the
//! cross-attention that turns time tokens into aligned text tokens.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::backbone::Backbone;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{impl_params, multi_head_attention, AttentionWeights, LayerNorm, Linear};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A token-embedding table `[vocab, M]` with optional token strings.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingDict {
    pub matrix: Tensor<f64>,
    pub tokens: Option<Vec<String>>,
}

impl WordEmbeddingDict {
    pub fn new(matrix: Tensor<f64>, tokens: Option<Vec<String>>) -> Result<Self> {
        if matrix.rank() != 2 || matrix.is_empty() {
            return Err(Error::shape("word_embedding_dict", matrix.shape(), &[0, 0]));
        }
        if let Some(t) = &tokens {
            if t.len() != matrix.shape()[0] {
                return Err(Error::usage(format!(
                    "{} token strings for {} embedding rows",
                    t.len(),
                    matrix.shape()[0]
                )));
            }
        }
        Ok(Self { matrix, tokens })
    }

    pub fn from_backbone<T: Scalar>(backbone: &Backbone<T>) -> Self {
        Self {
            matrix: backbone.token_embedding.cast(),
            tokens: None,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Rows for the given token ids, `[S, M]`.
    pub fn select(&self, ids: &[usize]) -> Result<Tensor<f64>> {
        if ids.is_empty() {
            return Err(Error::usage("word selection is empty"));
        }
        let m = self.width();
        let mut data = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= self.vocab_size() {
                return Err(Error::usage(format!("token id {id} outside vocabulary of {}", self.vocab_size())));
            }
            data.extend_from_slice(&self.matrix.data()[id * m..(id + 1) * m]);
        }
        Tensor::new(&[ids.len(), m], data)
    }

    /// Looks words up by their token strings.
    pub fn select_words(&self, words: &[&str]) -> Result<Tensor<f64>> {
        let tokens = self
            .tokens
            .as_ref()
            .ok_or_else(|| Error::usage("dictionary has no token strings"))?;
        let ids = words
            .iter()
            .map(|w| {
                tokens
                    .iter()
                    .position(|t| t == w)
                    .ok_or_else(|| Error::usage(format!("word `{w}` not in dictionary")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select(&ids)
    }
}

/// Top-`d` principal directions of a word-embedding dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalEmbeddings {
    /// Unit-norm directions `[d, M]`, ordered by decreasing variance.
    pub components: Tensor<f64>,
    /// Column mean of the dictionary, `[M]`.
    pub mean: Tensor<f64>,
    /// Variance captured by each direction.
    pub variances: Vec<f64>,
    /// Retained fraction of the total variance.
    pub explained_variance_ratio: f64,
}

impl PrincipalEmbeddings {
    /// PCA via the eigen-decomposition of the sample covariance.
    pub fn extract(dict: &WordEmbeddingDict, d: usize) -> Result<Self> {
        let (n, m) = (dict.vocab_size(), dict.width());
        if d == 0 || d > n.min(m) {
            return Err(Error::usage(format!("principal dimension {d} outside 1..={}", n.min(m))));
        }
        if n < 2 {
            return Err(Error::usage("PCA needs at least two dictionary rows"));
        }
        let data = DMatrix::from_row_slice(n, m, dict.matrix.data());
        let mean = data.row_mean();
        let mut centered = data;
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let eigen = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
        let total: f64 = eigen.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let top = eigen.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-10 * m as f64;
        let rank = order.iter().filter(|&&i| eigen.eigenvalues[i] > tol).count();
        let kept = if rank == 0 {
            return Err(Error::Numeric("dictionary has zero variance".into()));
        } else if d > rank {
            log::warn!("dictionary rank {rank} is below the requested {d} components; keeping {rank}");
            rank
        } else {
            d
        };

        let mut components = Vec::with_capacity(kept * m);
        let mut variances = Vec::with_capacity(kept);
        for &i in &order[..kept] {
            let col = eigen.eigenvectors.column(i);
            // Fix the sign so the largest-magnitude coordinate is positive.
            let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            components.extend(col.iter().map(|v| v * sign));
            variances.push(eigen.eigenvalues[i]);
        }
        let retained: f64 = variances.iter().sum();
        Ok(Self {
            components: Tensor::new(&[kept, m], components)?,
            mean: Tensor::new(&[m], mean.iter().copied().collect())?,
            explained_variance_ratio: (retained / total).min(1.0),
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.components.shape()[1]
    }

    /// The `[d, M]` key/value rows: directions scaled by their standard
    /// deviation, or the bare unit directions.
    pub fn rows<T: Scalar>(&self, variance_scaled: bool) -> Tensor<T> {
        let m = self.width();
        let mut out = self.components.clone();
        if variance_scaled {
            for (row, var) in out.data_mut().chunks_mut(m).zip(&self.variances) {
                let s = var.max(0.0).sqrt();
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        out.cast()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert("principal.components", &self.components);
        c.insert("principal.mean", &self.mean);
        c.insert("principal.variances", &Tensor::new(&[self.dim()], self.variances.clone()).expect("length d"));
        c.insert("principal.evr", &Tensor::scalar(self.explained_variance_ratio));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let components: Tensor<f64> = c.get("principal.components")?;
        if components.rank() != 2 {
            return Err(Error::config(format!(
                "principal.components must be a matrix, got shape {:?}",
                components.shape()
            )));
        }
        let (d, m) = (components.shape()[0], components.shape()[1]);
        let mean = c.get_shaped("principal.mean", &[m])?;
        let variances = c.get_shaped::<f64>("principal.variances", &[d])?.into_data();
        let evr = c.get_shaped::<f64>("principal.evr", &[])?.data()[0];
        Ok(Self {
            components,
            mean,
            variances,
            explained_variance_ratio: evr,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Temperature of the cross-attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScale {
    /// `1/√C`, with `C` the number of channel tokens.
    #[default]
    Channels,
    /// `1/√(M/heads)`.
    HeadDim,
}

impl FromStr for AttentionScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "channels" | "sqrt_c" => Ok(AttentionScale::Channels),
            "head_dim" | "sqrt_dk" => Ok(AttentionScale::HeadDim),
            other => Err(Error::config(format!("unknown attention scale `{other}`"))),
        }
    }
}

impl AttentionScale {
    pub fn factor(self, channels: usize, width: usize, heads: usize) -> f64 {
        match self {
            AttentionScale::Channels => 1.0 / (channels as f64).sqrt(),
            AttentionScale::HeadDim => 1.0 / ((width / heads) as f64).sqrt(),
        }
    }
}

/// Trainable weights of the match module.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchParams<T> {
    /// Shared channel-wise map `T → M`.
    pub embed: Linear<T>,
    pub norm: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl_params!(MatchParams {
    embed => "embed",
    norm => "mhsa.ln",
    attn => "mhsa.attn",
    w_q => "cross.w_q",
    w_k => "cross.w_k",
    w_v => "cross.w_v",
});

impl<T: Scalar> MatchParams<T> {
    pub fn new<R: Rng + ?Sized>(input_len: usize, width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let cross = |rng: &mut R| Tensor::uniform(&[width, width], bound, rng).with_requires_grad(true);
        Self {
            embed: Linear::new(input_len, width, true, true, rng),
            norm: LayerNorm::new(width, true),
            attn: AttentionWeights::uniform(width, true, rng),
            w_q: cross(rng),
            w_k: cross(rng),
            w_v: cross(rng),
        }
    }

    pub fn input_len(&self) -> usize {
        self.embed.inputs()
    }

    pub fn width(&self) -> usize {
        self.embed.outputs()
    }
}

fn batched<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, bool)> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        2 => Ok((tape.reshape(x, &[1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::shape("match", &s, &[0, 0])),
    }
}

fn unbatched<T: Scalar>(tape: &mut Tape<T>, x: Var, squeeze: bool) -> Result<Var> {
    if !squeeze {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    tape.reshape(x, &s[1..])
}

/// Maps a window `[T, C]` (or `[B, T, C]`) to channel tokens `[C, M]`.
pub fn embed_series<T: Scalar>(tape: &mut Tape<T>, window: Var, params: &MatchParams<T>) -> Result<Var> {
    let (x, squeeze) = batched(tape, window)?;
    let s = tape.shape(x).to_vec();
    if s[1] != params.input_len() {
        return Err(Error::shape("embed_series", &s, &[params.input_len()]));
    }
    let channels_first = tape.transpose_last2(x)?;
    let tokens = params.embed.forward(tape, channels_first)?;
    unbatched(tape, tokens, squeeze)
}

/// Pre-norm multi-head self-attention with a residual connection.
pub fn mhsa<T: Scalar>(tape: &mut Tape<T>, tokens: Var, params: &MatchParams<T>, heads: usize) -> Result<Var> {
    let (x, squeeze) = batched(tape, tokens)?;
    let w = &params.attn;
    let a = params.norm.forward(tape, x)?;
    let q = crate::nn::affine(tape, a, &w.q_weight, &w.q_bias)?;
    let k = crate::nn::affine(tape, a, &w.k_weight, &w.k_bias)?;
    let v = crate::nn::affine(tape, a, &w.v_weight, &w.v_bias)?;
    let scale = 1.0 / ((params.width() / heads.max(1)) as f64).sqrt();
    let (out, _) = multi_head_attention(tape, q, k, v, heads, scale, false)?;
    let out = crate::nn::affine(tape, out, &w.o_weight, &w.o_bias)?;
    let y = tape.add(x, out)?;
    unbatched(tape, y, squeeze)
}

/// Result of the cross-attention: text tokens and per-head maps `[.., C, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// `softmax(X_time·W_q (D̂·W_k)ᵀ · s) · D̂·W_v` per head, no output projection.
pub fn cross_modal_match<T: Scalar>(
    tape: &mut Tape<T>,
    x_time: Var,
    principal_rows: Var,
    params: &MatchParams<T>,
    heads: usize,
    scale: AttentionScale,
) -> Result<MatchOutput> {
    let (x, squeeze) = batched(tape, x_time)?;
    let s = tape.shape(x).to_vec();
    let keys_shape = tape.shape(principal_rows).to_vec();
    if keys_shape.len() != 2 || keys_shape[1] != s[2] {
        return Err(Error::shape("cross_modal_match", &s, &keys_shape));
    }
    let wq = tape.input(&params.w_q)?;
    let wk = tape.input(&params.w_k)?;
    let wv = tape.input(&params.w_v)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(principal_rows, wk)?;
    let v = tape.matmul(principal_rows, wv)?;
    let factor = scale.factor(s[1], s[2], heads);
    let (out, mut maps) = multi_head_attention(tape, q, k, v, heads, factor, false)?;
    let tokens = unbatched(tape, out, squeeze)?;
    for m in &mut maps {
        *m = unbatched(tape, *m, squeeze)?;
    }
    Ok(MatchOutput { tokens, attention: maps })
}

/// Head-averaged relevance of each channel token to each selected word,
/// `[C, S]` with rows summing to one.
pub fn word_relevance<T: Scalar>(
    x_time: &Tensor<T>,
    words: &Tensor<T>,
    params: &MatchParams<T>,
    heads: usize,
    scale: AttentionScale,
) -> Result<Tensor<T>> {
    if words.rank() != 2 || words.shape()[0] == 0 {
        return Err(Error::usage("word selection is empty"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_time.clone());
    let w = tape.constant(words.clone());
    let out = cross_modal_match(&mut tape, x, w, params, heads, scale)?;
    average_maps(&tape, &out.attention)
}

pub fn average_maps<T: Scalar>(tape: &Tape<T>, maps: &[Var]) -> Result<Tensor<T>> {
    let first = tape.value(maps[0]);
    let mut acc = vec![T::zero(); first.len()];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(tape.value(*m).data()) {
            *a = *a + *v;
        }
    }
    let n = T::lit(maps.len() as f64);
    Tensor::new(first.shape(), acc.into_iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dict(n: usize, m: usize, seed: u64) -> WordEmbeddingDict {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WordEmbeddingDict::new(Tensor::randn(&[n, m], 1.0, &mut rng), None).unwrap()
    }

    #[test]
    fn rank_one_dictionary_is_fully_explained() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let data: Vec<f64> = (0..30).flat_map(|i| u.iter().map(move |v| v * (i as f64 - 7.0))).collect();
        let d = WordEmbeddingDict::new(Tensor::new(&[30, 4], data).unwrap(), None).unwrap();
        let p = PrincipalEmbeddings::extract(&d, 1).unwrap();
        assert!((p.explained_variance_ratio - 1.0).abs() < 1e-6);
        let p3 = PrincipalEmbeddings::extract(&d, 3).unwrap();
        assert_eq!(p3.dim(), 1);
    }

    #[test]
    fn components_are_orthonormal_and_evr_monotone() {
        let d = dict(60, 8, 1);
        let mut last = 0.0;
        for k in 1..=8 {
            let p = PrincipalEmbeddings::extract(&d, k).unwrap();
            assert!(p.explained_variance_ratio >= last - 1e-12);
            last = p.explained_variance_ratio;
            let c = &p.components;
            for i in 0..k {
                for j in 0..k {
                    let dot: f64 = (0..8).map(|x| c.get(&[i, x]) * c.get(&[j, x])).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9);
                }
            }
        }
        assert!((last - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_dimension_is_usage() {
        let d = dict(10, 4, 2);
        assert!(matches!(PrincipalEmbeddings::extract(&d, 0), Err(Error::Usage(_))));
        assert!(matches!(PrincipalEmbeddings::extract(&d, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn scaled_rows_have_standard_deviation_norms() {
        let p = PrincipalEmbeddings::extract(&dict(50, 6, 3), 3).unwrap();
        let rows: Tensor<f64> = p.rows(true);
        for i in 0..3 {
            let norm: f64 = (0..6).map(|j| rows.get(&[i, j]).powi(2)).sum::<f64>().sqrt();
            assert!((norm - p.variances[i].sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn principal_container_round_trip() {
        let p = PrincipalEmbeddings::extract(&dict(40, 5, 4), 2).unwrap();
        let back = PrincipalEmbeddings::from_container(&Container::from_bytes(&p.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    fn params(t: usize, m: usize) -> (MatchParams<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (MatchParams::new(t, m, &mut rng), rng)
    }

    #[test]
    fn embed_series_contracts() {
        let (p, mut rng) = params(6, 4);
        let mut tape = Tape::new();
        let mut w = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        for t in 0..6 {
            let v = w.get(&[t, 0]);
            w.set(&[t, 2], v);
        }
        let x = tape.constant(w);
        let tok = embed_series(&mut tape, x, &p).unwrap();
        let out = tape.value(tok);
        assert_eq!(out.shape(), &[3, 4]);
        for j in 0..4 {
            assert_eq!(out.get(&[0, j]), out.get(&[2, j]));
        }
        let bad = tape.constant(Tensor::zeros(&[5, 3]));
        assert!(matches!(embed_series(&mut tape, bad, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_key_returns_the_value_row() {
        let (p, mut rng) = params(4, 6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let row = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let k = tape.constant(row.clone());
        let out = cross_modal_match(&mut tape, x, k, &p, 2, AttentionScale::Channels).unwrap();
        let v = crate::tensor::matmul(&row, &p.w_v).unwrap();
        for c in 0..3 {
            for j in 0..6 {
                assert_eq!(tape.value(out.tokens).get(&[c, j]), v.data()[j]);
            }
        }
    }

    #[test]
    fn word_relevance_rows_are_distributions() {
        let (p, mut rng) = params(4, 6);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let r = word_relevance(&x, &w, &p, 2, AttentionScale::HeadDim).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let empty = Tensor::<f64>::zeros(&[0, 6]);
        assert!(matches!(word_relevance(&x, &empty, &p, 2, AttentionScale::Channels), Err(Error::Usage(_))));
    }

    #[test]
    fn mhsa_is_channel_equivariant() {
        let (p, mut rng) = params(4, 6);
        let x = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
        let perm = [2usize, 0, 1];
        let mut xp = x.clone();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                xp.set(&[i, j], x.get(&[src, j]));
            }
        }
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let y = mhsa(&mut tape, v, &p, 2).unwrap();
            tape.value(y).clone()
        };
        let (y, yp) = (run(&x), run(&xp));
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                assert!((yp.get(&[i, j]) - y.get(&[src, j])).abs() < 1e-12);
            }
        }
    }
}
