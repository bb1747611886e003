//! Decoding responses from the toy language model.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AspoError, Result};
use crate::model::ToyLmParams;
use crate::pipeline::{Prompt, Responder};
use crate::scoring::FeatureVector;
use crate::vocab::{Vocabulary, EOS_ID};

/// Greedy decoding by default; seeded temperature sampling when
/// `temperature > 0`. The end marker is never emitted first, so a response
/// always has at least one token.
#[derive(Debug, Clone)]
pub struct ToyLmResponder {
    pub params: Arc<ToyLmParams>,
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub temperature: f64,
}

impl ToyLmResponder {
    pub fn decode_ids(&self, features: &FeatureVector, seed: u64) -> Result<Vec<u32>> {
        if self.max_len == 0 {
            return Err(AspoError::Generation("decode length bound is zero".into()));
        }
        if self.vocab.len() != self.params.dims.vocab_size {
            return Err(AspoError::Generation(format!(
                "vocabulary has {} entries, model has {}",
                self.vocab.len(),
                self.params.dims.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<u32> = Vec::new();
        while ids.len() < self.max_len {
            let mut lp = self.params.next_token_logprobs(features, &ids)?;
            if ids.is_empty() {
                lp[EOS_ID as usize] = f64::NEG_INFINITY;
            }
            let next = if self.temperature > 0.0 {
                let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = lp
                    .iter()
                    .map(|l| ((l - m) / self.temperature).exp())
                    .collect();
                let dist =
                    WeightedIndex::new(&w).map_err(|e| AspoError::Generation(e.to_string()))?;
                dist.sample(&mut rng) as u32
            } else {
                // first maximum wins ties
                let mut best = 0;
                for (i, &l) in lp.iter().enumerate() {
                    if l > lp[best] {
                        best = i;
                    }
                }
                best as u32
            };
            if next == EOS_ID {
                break;
            }
            ids.push(next);
        }
        Ok(ids)
    }
}

impl Responder for ToyLmResponder {
    fn respond(&self, _prompt: &Prompt, features: &FeatureVector, seed: u64) -> Result<String> {
        let ids = self.decode_ids(features, seed)?;
        let text = self.vocab.detokenize(&ids)?;
        if text.is_empty() {
            return Err(AspoError::Generation("decoder produced no text".into()));
        }
        Ok(text)
    }
}
