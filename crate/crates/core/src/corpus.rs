//! Bundled synthetic corpus.
//!
//! Images are mixtures of "concepts". Each concept owns one bucket of the
//! hashed text embedder, so an image's feature vector points along the
//! buckets of the concept words it contains and the embedder's cosine score
//! can tell a faithful sentence from a hallucinated one. Features are
//! scaled to unit variance per coordinate to match the noising schedule.
//!
//! The template responder describes whatever concepts dominate the features
//! it is given, one templated sentence per concept, and with some
//! probability plants an extra hedged sentence about a random concept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pipeline::{derive_seed, Prompt, Responder};
use crate::scoring::{FeatureVector, HashedBagEmbedder};
use crate::vocab::Vocabulary;

const CANDIDATE_CONCEPTS: [&str; 40] = [
    "cat", "dog", "bird", "horse", "car", "bus", "boat", "train", "tree", "flower", "house",
    "bridge", "chair", "table", "lamp", "clock", "apple", "banana", "pizza", "cake", "ball",
    "kite", "bicycle", "umbrella", "phone", "laptop", "book", "bottle", "cup", "bowl", "shoe",
    "hat", "guitar", "piano", "mountain", "river", "cloud", "moon", "fence", "window",
];

/// Sentence templates; `{}` is replaced by a concept word.
pub const FACT_TEMPLATES: [&str; 4] = [
    "there is a {} in the picture.",
    "i can see a {} here.",
    "the image shows a {} clearly.",
    "a {} is visible in the scene.",
];

/// Hedged sentences planted into some responses on both sides of a pair.
pub const NOISE_TEMPLATES: [&str; 2] = [
    "maybe there is also a {} somewhere.",
    "perhaps a {} is hidden in the back.",
];

/// Prompt templates per requested object count (index = count - 1).
const PROMPTS: [[&str; 2]; 4] = [
    [
        "Describe the main object in the image.",
        "What is the one thing you see?",
    ],
    [
        "Describe the two main objects in the image.",
        "Name the two things you see.",
    ],
    [
        "Describe the three main objects in the image.",
        "Name the three things you see.",
    ],
    [
        "Describe the four main objects in the image.",
        "Name the four things you see.",
    ],
];

const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

/// Number of objects an instruction asks for, if it names one.
pub fn requested_count(prompt_text: &str) -> Option<usize> {
    let lower = prompt_text.to_ascii_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_ascii_alphabetic()).collect();
    if let Some(i) = COUNT_WORDS.iter().position(|w| words.contains(w)) {
        return Some(i + 1);
    }
    if words.contains(&"object") {
        return Some(1);
    }
    None
}

const MAX_SENTENCES: usize = 4;
const PUNCTUATION: [&str; 4] = [".", "!", "?", ","];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_prompts: usize,
    pub min_concepts: usize,
    pub max_concepts: usize,
    /// Probability that a response carries one planted hedged sentence.
    pub noisy_sentence_prob: f64,
    /// Standard deviation of the isotropic jitter added before scaling.
    pub feature_jitter: f64,
    /// Upper bound on the size of the concept inventory.
    pub max_inventory: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_prompts: 1000,
            min_concepts: 1,
            max_concepts: 4,
            noisy_sentence_prob: 0.5,
            feature_jitter: 0.1,
            max_inventory: 16,
            seed: 0,
        }
    }
}

fn whitespace_tokens(template: &str) -> impl Iterator<Item = &str> {
    template.split_whitespace().filter(|w| *w != "{}")
}

/// Every word the templates can produce, concept candidates included.
pub fn corpus_vocabulary() -> Vocabulary {
    let mut words: Vec<String> = FACT_TEMPLATES
        .iter()
        .chain(&NOISE_TEMPLATES)
        .flat_map(|t| whitespace_tokens(t))
        .map(|w| w.trim_end_matches(['.', '!', '?', ',']).to_string())
        .filter(|w| !w.is_empty())
        .collect();
    words.extend(CANDIDATE_CONCEPTS.iter().map(|s| s.to_string()));
    words.extend(PUNCTUATION.iter().map(|s| s.to_string()));
    Vocabulary::new(words)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub word: String,
    pub direction: FeatureVector,
}

/// Concept inventory plus the knobs needed to sample images and answers.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub embedder: HashedBagEmbedder,
    pub concepts: Vec<Concept>,
}

impl SyntheticCorpus {
    /// Keeps candidate concepts whose embedder bucket is shared neither with
    /// another kept concept nor with any template token.
    pub fn new(config: CorpusConfig, embedder: HashedBagEmbedder) -> Result<Self> {
        if config.min_concepts == 0
            || config.min_concepts > config.max_concepts
            || config.max_concepts > MAX_SENTENCES
        {
            return invalid(format!(
                "need 1 <= min_concepts <= max_concepts <= {MAX_SENTENCES}"
            ));
        }
        if !(0.0..=1.0).contains(&config.noisy_sentence_prob) {
            return invalid("noisy_sentence_prob must be in [0, 1]");
        }
        if config.feature_jitter.is_nan() || config.feature_jitter < 0.0 {
            return invalid("feature_jitter must be non-negative");
        }
        let mut taken: Vec<usize> = FACT_TEMPLATES
            .iter()
            .chain(&NOISE_TEMPLATES)
            .flat_map(|t| whitespace_tokens(t))
            .map(|w| embedder.bucket(w))
            .collect();
        let mut concepts = Vec::new();
        for word in CANDIDATE_CONCEPTS {
            if concepts.len() == config.max_inventory {
                break;
            }
            let b = embedder.bucket(word);
            if !taken.contains(&b) {
                taken.push(b);
                concepts.push(Concept {
                    word: word.to_string(),
                    direction: embedder.token_direction(word),
                });
            }
        }
        if concepts.len() < config.max_concepts.max(2) {
            return invalid(format!(
                "only {} collision-free concepts for embedder dim {}",
                concepts.len(),
                embedder.dim
            ));
        }
        Ok(SyntheticCorpus {
            config,
            embedder,
            concepts,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        corpus_vocabulary()
    }

    /// Feature vector for an image containing the given concepts.
    pub fn image_features(&self, active: &[usize], rng: &mut ChaCha8Rng) -> Result<FeatureVector> {
        let d = self.embedder.dim;
        let mut v = vec![0.0; d];
        for &k in active {
            for (x, y) in v.iter_mut().zip(self.concepts[k].direction.as_slice()) {
                *x += y;
            }
        }
        for x in v.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *x += self.config.feature_jitter * e;
        }
        let unit = FeatureVector::new(v)?.normalized()?;
        FeatureVector::new(
            unit.into_inner()
                .into_iter()
                .map(|x| x * (d as f64).sqrt())
                .collect(),
        )
    }

    /// Deterministic prompt set; prompt `i` depends only on (seed, i).
    pub fn prompts(&self) -> Result<Vec<Prompt>> {
        (0..self.config.num_prompts)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 0, i as u64));
                let n = rng.gen_range(self.config.min_concepts..=self.config.max_concepts);
                let active = rand::seq::index::sample(&mut rng, self.concepts.len(), n).into_vec();
                let prompt_text = PROMPTS[n - 1][rng.gen_range(0..2)].to_string();
                Ok(Prompt {
                    prompt_text,
                    image_features: self.image_features(&active, &mut rng)?,
                })
            })
            .collect()
    }

    pub fn responder(&self) -> TemplateResponder {
        TemplateResponder {
            concepts: self.concepts.clone(),
            noisy_sentence_prob: self.config.noisy_sentence_prob,
        }
    }
}

/// Templated describer standing in for a multimodal model.
#[derive(Debug, Clone)]
pub struct TemplateResponder {
    pub concepts: Vec<Concept>,
    pub noisy_sentence_prob: f64,
}

impl TemplateResponder {
    /// The `count` strongest concepts, or when no count is given those whose
    /// projection is at least half the strongest one (at most four). Result
    /// is in inventory order.
    pub fn detect(&self, features: &FeatureVector, count: Option<usize>) -> Vec<usize> {
        let proj: Vec<f64> = self
            .concepts
            .iter()
            .map(|c| {
                c.direction
                    .as_slice()
                    .iter()
                    .zip(features.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let max = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if count.is_none() && (max.is_nan() || max <= 0.0) {
            return Vec::new();
        }
        let mut ranked: Vec<usize> = match count {
            Some(_) => (0..proj.len()).collect(),
            None => (0..proj.len()).filter(|&k| proj[k] >= 0.5 * max).collect(),
        };
        ranked.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
        ranked.truncate(count.unwrap_or(MAX_SENTENCES).min(MAX_SENTENCES));
        ranked.sort_unstable();
        ranked
    }
}

impl Responder for TemplateResponder {
    fn respond(&self, prompt: &Prompt, features: &FeatureVector, seed: u64) -> Result<String> {
        if features.dim() != self.concepts[0].direction.dim() {
            return invalid("feature dimension does not match the concept space");
        }
        // All random decisions are drawn up front so both sides of a pair
        // see the same ones.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots: [usize; MAX_SENTENCES] =
            std::array::from_fn(|_| rng.gen_range(0..FACT_TEMPLATES.len()));
        let planted = rng.gen_bool(self.noisy_sentence_prob);
        let noise_template = NOISE_TEMPLATES[rng.gen_range(0..NOISE_TEMPLATES.len())];
        let noise_concept = rng.gen_range(0..self.concepts.len());
        let noise_pos: f64 = rng.gen();

        let mut sentences: Vec<String> = self
            .detect(features, requested_count(&prompt.prompt_text))
            .iter()
            .zip(slots)
            .map(|(&k, t)| FACT_TEMPLATES[t].replace("{}", &self.concepts[k].word))
            .collect();
        if planted {
            let at = ((noise_pos * (sentences.len() + 1) as f64) as usize).min(sentences.len());
            sentences.insert(
                at,
                noise_template.replace("{}", &self.concepts[noise_concept].word),
            );
        }
        Ok(sentences.join(" "))
    }
}
