//! Per-sentence reward signals and the adaptive sentence weight.
//!
//! Each sentence of a chosen response gets two scores: cosine similarity
//! between its text embedding and the image embedding, and its perplexity
//! under a language model. Both are min-max normalized within the response
//! (perplexity after negation, so confident sentences score high) and mixed
//! with factor `alpha` into `w_i = alpha * S'_i + (1 - alpha) * PPL'_i`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::segmentation::{SentenceSpan, TokenizedText};

/// Dense real feature vector. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("feature {i} is not finite"));
        }
        Ok(FeatureVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; fails on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return invalid("cannot normalize a zero vector");
        }
        Ok(FeatureVector(self.0.iter().map(|v| v / n).collect()))
    }
}

/// Cosine of the angle between `a` and `b`, clamped to [-1, 1].
pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine similarity of a zero-norm vector");
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Shared embedding space for sentences and images.
///
/// Implementations must be deterministic and safe to share across threads.
pub trait Scorer: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<FeatureVector>;
    fn embed_image(&self, features: &FeatureVector) -> Result<FeatureVector>;
}

/// Toy text embedder: every whitespace-delimited token is hashed (FNV-1a,
/// salted with the seed) into one of `dim` buckets, counts are accumulated
/// and the result is L2-normalized. Images are taken to already live in the
/// bucket space and are only normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedBagEmbedder {
    pub dim: usize,
    pub seed: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl HashedBagEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return invalid("embedder dimension must be positive");
        }
        Ok(HashedBagEmbedder { dim, seed })
    }

    /// Bucket index of a single whitespace-delimited token.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(self.seed, token.as_bytes()) % self.dim as u64) as usize
    }

    /// Unit vector along the bucket of `token`.
    pub fn token_direction(&self, token: &str) -> FeatureVector {
        let mut v = vec![0.0; self.dim];
        v[self.bucket(token)] = 1.0;
        FeatureVector(v)
    }
}

impl Scorer for HashedBagEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<FeatureVector> {
        let mut counts = vec![0.0; self.dim];
        let mut any = false;
        for tok in text.split_whitespace() {
            counts[self.bucket(tok)] += 1.0;
            any = true;
        }
        if !any {
            return invalid("cannot embed an empty sentence");
        }
        FeatureVector(counts).normalized()
    }

    fn embed_image(&self, features: &FeatureVector) -> Result<FeatureVector> {
        if features.dim() != self.dim {
            return invalid(format!(
                "image features have dimension {}, embedder expects {}",
                features.dim(),
                self.dim
            ));
        }
        features.normalized()
    }
}

/// `exp(-mean(logprobs))` over each span's token range.
pub fn sentence_perplexity(token_logprobs: &[f64], spans: &[SentenceSpan]) -> Result<Vec<f64>> {
    if let Some(j) = token_logprobs
        .iter()
        .position(|&l| !l.is_finite() || l > 0.0)
    {
        return invalid(format!(
            "log-probability {} at token {j} is not a finite value <= 0",
            token_logprobs[j]
        ));
    }
    spans
        .iter()
        .map(|s| {
            if s.num_tokens() == 0 || s.token_start > s.token_end {
                return invalid(format!("sentence {} has no tokens", s.index));
            }
            if s.token_end > token_logprobs.len() {
                return invalid(format!("sentence {} runs past the token list", s.index));
            }
            let n = s.num_tokens() as f64;
            let sum: f64 = token_logprobs[s.token_range()].iter().sum();
            Ok((-sum / n).exp())
        })
        .collect()
}

/// `(v - min) / (max - min)`; all zeros when the range is degenerate.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return invalid("cannot normalize an empty list");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("values must be finite");
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| ((v - min) / range).clamp(0.0, 1.0))
        .collect())
}

/// Negate then min-max normalize: the most confident sentence maps to 1.
pub fn normalized_perplexity(ppl: &[f64]) -> Result<Vec<f64>> {
    if ppl.iter().any(|&p| !p.is_finite() || p < 1.0) {
        return invalid("perplexities must be finite and >= 1");
    }
    let negated: Vec<f64> = ppl.iter().map(|p| -p).collect();
    minmax_normalize(&negated)
}

pub fn combine_weights(sim_norm: &[f64], ppl_norm: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if sim_norm.len() != ppl_norm.len() {
        return invalid(format!(
            "length mismatch: {} similarities vs {} perplexities",
            sim_norm.len(),
            ppl_norm.len()
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha {alpha} outside [0, 1]"));
    }
    let in_unit = |v: &f64| (0.0..=1.0).contains(v);
    if !sim_norm.iter().all(in_unit) || !ppl_norm.iter().all(in_unit) {
        return invalid("normalized scores must lie in [0, 1]");
    }
    Ok(sim_norm
        .iter()
        .zip(ppl_norm)
        .map(|(s, p)| alpha * s + (1.0 - alpha) * p)
        .collect())
}

/// Every intermediate of the weight computation for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceWeights {
    pub similarity: Vec<f64>,
    pub similarity_norm: Vec<f64>,
    pub perplexity: Vec<f64>,
    pub perplexity_norm: Vec<f64>,
    pub weight: Vec<f64>,
    pub alpha: f64,
}

impl SentenceWeights {
    /// All-zero weights for `n` sentences (the unweighted case).
    pub fn zeros(n: usize, alpha: f64) -> Self {
        SentenceWeights {
            similarity: vec![0.0; n],
            similarity_norm: vec![0.0; n],
            perplexity: vec![1.0; n],
            perplexity_norm: vec![0.0; n],
            weight: vec![0.0; n],
            alpha,
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn mean_weight(&self) -> f64 {
        if self.weight.is_empty() {
            0.0
        } else {
            self.weight.iter().sum::<f64>() / self.weight.len() as f64
        }
    }
}

/// Score every sentence of `response` against `image`.
///
/// `token_logprobs` are the per-token conditional log-probabilities of the
/// response under whichever model supplies perplexity. Sentences are
/// embedded from their raw substrings, terminators included.
pub fn sentence_weights(
    scorer: &dyn Scorer,
    image: &FeatureVector,
    response: &TokenizedText,
    spans: &[SentenceSpan],
    token_logprobs: &[f64],
    alpha: f64,
) -> Result<SentenceWeights> {
    if token_logprobs.len() != response.len() {
        return invalid(format!(
            "{} log-probabilities for {} tokens",
            token_logprobs.len(),
            response.len()
        ));
    }
    if spans.is_empty() {
        return invalid("response has no sentences");
    }
    let image_emb = scorer.embed_image(image)?;
    let similarity = spans
        .iter()
        .map(|s| {
            let text = &response.text[s.char_start..s.char_end];
            cosine_similarity(&scorer.embed(text)?, &image_emb)
        })
        .collect::<Result<Vec<_>>>()?;
    let similarity_norm = minmax_normalize(&similarity)?;
    let perplexity = sentence_perplexity(token_logprobs, spans)?;
    let perplexity_norm = normalized_perplexity(&perplexity)?;
    let weight = combine_weights(&similarity_norm, &perplexity_norm, alpha)?;
    Ok(SentenceWeights {
        similarity,
        similarity_norm,
        perplexity,
        perplexity_norm,
        weight,
        alpha,
    })
}
