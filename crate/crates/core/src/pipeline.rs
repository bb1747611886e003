//! Preference-pair generation: perturb the image features with a
//! variance-preserving Gaussian corruption, answer the same prompt from the
//! clean and the corrupted features, and keep the pair only if the two
//! answers differ. The clean answer is the chosen response.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AspoError, Result};
use crate::exec::Execution;
use crate::scoring::FeatureVector;
use crate::segmentation::{Token, TokenizedText};
use crate::vocab::Vocabulary;

/// Number of steps in the noising schedule.
pub const T_MAX: u32 = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_NOISE_STEP: u32 = 500;

fn alpha_bar_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut out = Vec::with_capacity(T_MAX as usize + 1);
        out.push(1.0);
        let mut acc = 1.0;
        for k in 1..=T_MAX {
            let beta =
                BETA_START + (BETA_END - BETA_START) * f64::from(k - 1) / f64::from(T_MAX - 1);
            acc *= 1.0 - beta;
            out.push(acc);
        }
        out
    })
}

/// Cumulative signal fraction after `t` noising steps; 1 at `t = 0`.
pub fn alpha_bar(t: u32) -> Result<f64> {
    if t > T_MAX {
        return invalid(format!("noise step {t} exceeds {T_MAX}"));
    }
    Ok(alpha_bar_table()[t as usize])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub noise_step: u32,
    pub seed: u64,
}

/// `sqrt(abar_t) * x + sqrt(1 - abar_t) * eps`, `eps` seeded standard normal.
pub fn perturb_features(features: &FeatureVector, cfg: &NoiseConfig) -> Result<FeatureVector> {
    let ab = alpha_bar(cfg.noise_step)?;
    if cfg.noise_step == 0 {
        return Ok(features.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    FeatureVector::new(
        features
            .as_slice()
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                signal * x + noise * e
            })
            .collect(),
    )
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An instruction with its image features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_text: String,
    pub image_features: FeatureVector,
}

/// Anything that answers a prompt given (possibly corrupted) features.
///
/// The same `seed` must produce the same decoding decisions, so that clean
/// and corrupted answers differ only through the features.
pub trait Responder: Send + Sync {
    fn respond(&self, prompt: &Prompt, features: &FeatureVector, seed: u64) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt_text: String,
    pub image_features: FeatureVector,
    pub chosen: TokenizedText,
    pub rejected: TokenizedText,
}

/// Answer from clean and corrupted features; `None` when the answers match.
pub fn generate_pair(
    pair_id: &str,
    prompt: &Prompt,
    responder: &dyn Responder,
    vocab: &Vocabulary,
    noise: &NoiseConfig,
    sampler_seed: u64,
) -> Result<Option<PreferencePair>> {
    let noisy = perturb_features(&prompt.image_features, noise)?;
    let chosen = responder.respond(prompt, &prompt.image_features, sampler_seed)?;
    let rejected = responder.respond(prompt, &noisy, sampler_seed)?;
    if chosen.trim().is_empty() || rejected.trim().is_empty() {
        return Err(AspoError::Generation(format!("{pair_id}: empty response")));
    }
    if chosen == rejected {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        pair_id: pair_id.to_string(),
        prompt_text: prompt.prompt_text.clone(),
        image_features: prompt.image_features.clone(),
        chosen: vocab.tokenize(&chosen),
        rejected: vocab.tokenize(&rejected),
    }))
}

/// Drop pairs whose chosen and rejected texts are byte-equal. Order is
/// preserved; the second value is the number removed.
pub fn filter_identical(pairs: Vec<PreferencePair>) -> (Vec<PreferencePair>, usize) {
    let before = pairs.len();
    let kept: Vec<_> = pairs
        .into_iter()
        .filter(|p| p.chosen.text != p.rejected.text)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub noise_step: u32,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            noise_step: DEFAULT_NOISE_STEP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub pairs: Vec<PreferencePair>,
    pub prompts: usize,
    pub filtered: usize,
}

impl GenerationReport {
    pub fn kept_ratio(&self) -> f64 {
        if self.prompts == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / self.prompts as f64
        }
    }
}

const NOISE_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;

/// Run the whole pipeline over `prompts`. Pair `i` is named `pair-{i:06}`.
pub fn generate_dataset(
    prompts: &[Prompt],
    responder: &dyn Responder,
    vocab: &Vocabulary,
    cfg: &GenerationConfig,
    exec: Execution,
) -> Result<GenerationReport> {
    alpha_bar(cfg.noise_step)?;
    let indexed: Vec<(usize, &Prompt)> = prompts.iter().enumerate().collect();
    let generated = exec.try_map(&indexed, |&(i, prompt)| {
        let noise = NoiseConfig {
            noise_step: cfg.noise_step,
            seed: derive_seed(cfg.seed, NOISE_STREAM, i as u64),
        };
        let sampler = derive_seed(cfg.seed, SAMPLER_STREAM, i as u64);
        generate_pair(
            &format!("pair-{i:06}"),
            prompt,
            responder,
            vocab,
            &noise,
            sampler,
        )
    })?;
    let candidates: Vec<PreferencePair> = generated.into_iter().flatten().collect();
    let unfiltered = prompts.len() - candidates.len();
    let (pairs, removed) = filter_identical(candidates);
    Ok(GenerationReport {
        pairs,
        prompts: prompts.len(),
        filtered: unfiltered + removed,
    })
}

// JSONL wire format, one object per line:
// {"pair_id", "prompt_text", "image_features": [f64], "chosen_text",
//  "rejected_text", "chosen_tokens": [{"id","start","end"}], "rejected_tokens"}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TokenRecord {
    id: u32,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairRecord {
    pair_id: String,
    prompt_text: String,
    image_features: Vec<f64>,
    chosen_text: String,
    rejected_text: String,
    chosen_tokens: Vec<TokenRecord>,
    rejected_tokens: Vec<TokenRecord>,
}

fn to_records(tokens: &[Token]) -> Vec<TokenRecord> {
    tokens
        .iter()
        .map(|t| TokenRecord {
            id: t.id,
            start: t.char_start,
            end: t.char_end,
        })
        .collect()
}

fn from_records(text: String, tokens: Vec<TokenRecord>) -> Result<TokenizedText> {
    let t = TokenizedText {
        text,
        tokens: tokens
            .into_iter()
            .map(|r| Token {
                id: r.id,
                char_start: r.start,
                char_end: r.end,
            })
            .collect(),
    };
    t.validate()?;
    Ok(t)
}

pub fn pair_to_json(pair: &PreferencePair) -> String {
    let rec = PairRecord {
        pair_id: pair.pair_id.clone(),
        prompt_text: pair.prompt_text.clone(),
        image_features: pair.image_features.as_slice().to_vec(),
        chosen_text: pair.chosen.text.clone(),
        rejected_text: pair.rejected.text.clone(),
        chosen_tokens: to_records(&pair.chosen.tokens),
        rejected_tokens: to_records(&pair.rejected.tokens),
    };
    serde_json::to_string(&rec).expect("pair record serializes")
}

pub fn pair_from_json(line: &str) -> Result<PreferencePair> {
    let rec: PairRecord =
        serde_json::from_str(line).map_err(|e| AspoError::Parse(e.to_string()))?;
    Ok(PreferencePair {
        pair_id: rec.pair_id,
        prompt_text: rec.prompt_text,
        image_features: FeatureVector::new(rec.image_features)?,
        chosen: from_records(rec.chosen_text, rec.chosen_tokens)?,
        rejected: from_records(rec.rejected_text, rec.rejected_tokens)?,
    })
}

pub fn write_jsonl<W: Write>(pairs: &[PreferencePair], mut w: W) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}", pair_to_json(p))?;
    }
    Ok(())
}

/// Parse a JSONL dataset. Errors name the 1-based line number. Blank lines
/// are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair =
            pair_from_json(&line).map_err(|e| AspoError::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl Responder for Echo {
        fn respond(&self, _: &Prompt, f: &FeatureVector, _: u64) -> Result<String> {
            Ok(if f.as_slice()[0] > 0.0 { "yes." } else { "no." }.to_string())
        }
    }

    fn prompt(x: f64) -> Prompt {
        Prompt {
            prompt_text: "is it?".into(),
            image_features: FeatureVector::new(vec![x, 0.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(alpha_bar(0).unwrap(), 1.0);
        assert!(alpha_bar(T_MAX).unwrap() < 1e-4);
        assert!(alpha_bar(T_MAX + 1).is_err());
        // abar_500 by direct product
        let mut acc = 1.0;
        for k in 1..=500u32 {
            acc *= 1.0 - (1e-4 + (0.02 - 1e-4) * f64::from(k - 1) / 999.0);
        }
        assert!((alpha_bar(500).unwrap() - acc).abs() < 1e-15);
    }

    #[test]
    fn schedule_strictly_decreasing() {
        for t in 1..=T_MAX {
            assert!(alpha_bar(t).unwrap() < alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn step_zero_is_identity() {
        let f = FeatureVector::new(vec![0.3, -2.0, 7.5]).unwrap();
        let out = perturb_features(
            &f,
            &NoiseConfig {
                noise_step: 0,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(out, f);
        assert!(perturb_features(
            &f,
            &NoiseConfig {
                noise_step: 1001,
                seed: 9
            }
        )
        .is_err());
    }

    #[test]
    fn full_noise_statistics() {
        // Monte-Carlo over 10^4 seeds: output ~ N(0, 1) regardless of input.
        let f = FeatureVector::new(vec![5.0]).unwrap();
        let n = 10_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for seed in 0..n {
            let x = perturb_features(
                &f,
                &NoiseConfig {
                    noise_step: T_MAX,
                    seed,
                },
            )
            .unwrap()
            .as_slice()[0];
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn identical_answers_are_dropped() {
        let v = Vocabulary::new(["yes", "no", "."]);
        let noise = NoiseConfig {
            noise_step: 0,
            seed: 1,
        };
        assert!(generate_pair("p", &prompt(1.0), &Echo, &v, &noise, 3)
            .unwrap()
            .is_none());
    }

    #[test]
    fn filter_counts() {
        let v = Vocabulary::new(["a", "b"]);
        let mk = |id: &str, c: &str, r: &str| PreferencePair {
            pair_id: id.into(),
            prompt_text: String::new(),
            image_features: FeatureVector::zeros(1),
            chosen: v.tokenize(c),
            rejected: v.tokenize(r),
        };
        let pairs = vec![mk("0", "a", "b"), mk("1", "a", "a"), mk("2", "b", "a")];
        let (kept, removed) = filter_identical(pairs.clone());
        assert_eq!(removed, 1);
        assert_eq!(
            kept.iter().map(|p| p.pair_id.as_str()).collect::<Vec<_>>(),
            ["0", "2"]
        );
        let (kept, removed) = filter_identical(vec![pairs[0].clone(), pairs[2].clone()]);
        assert_eq!((kept.len(), removed), (2, 0));
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let v = Vocabulary::new(["yes", "no", "."]);
        let prompts: Vec<Prompt> = (0..6)
            .map(|i| prompt(if i % 2 == 0 { 3.0 } else { -3.0 }))
            .collect();
        let cfg = GenerationConfig {
            noise_step: 1000,
            seed: 4,
        };
        let rep = generate_dataset(&prompts, &Echo, &v, &cfg, Execution::Sequential).unwrap();
        assert!(!rep.pairs.is_empty());
        let mut buf = Vec::new();
        write_jsonl(&rep.pairs, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, rep.pairs);

        let mut bad = buf.clone();
        bad.extend_from_slice(b"{not json}\n");
        let err = read_jsonl(bad.as_slice()).unwrap_err().to_string();
        assert!(
            err.contains(&format!("line {}", rep.pairs.len() + 1)),
            "{err}"
        );
    }

    #[test]
    fn parallel_matches_sequential() {
        let v = Vocabulary::new(["yes", "no", "."]);
        let prompts: Vec<Prompt> = (0..64).map(|i| prompt(i as f64 / 10.0 - 3.0)).collect();
        let cfg = GenerationConfig {
            noise_step: 500,
            seed: 8,
        };
        let a = generate_dataset(&prompts, &Echo, &v, &cfg, Execution::Parallel).unwrap();
        let b = generate_dataset(&prompts, &Echo, &v, &cfg, Execution::Sequential).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.filtered + a.pairs.len(), 64);
    }
}
