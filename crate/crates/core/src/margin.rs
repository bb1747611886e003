//! Implicit rewards, preference margins and the preference loss.
//!
//! The plain margin is `M = R_c - r_r`, where `R_c` is the sum of the chosen
//! response's per-sentence implicit rewards `beta * (log pi - log pi_ref)` and
//! `r_r` is the rejected response's implicit reward. The adaptive margin
//! reweights the chosen units and rescales:
//!
//! ```text
//! R_c* = sum_u (1 + w_u) r_u
//! M*   = (R_c / R_c*) * sum_u (1 + w_u) r_u  -  r_r
//! ```
//!
//! ## Stop-gradient
//!
//! The scale `R_c / R_c*` and the weights are constants for differentiation.
//! If the scale carried gradient, `(R_c / R_c*) * R_c*` would collapse to
//! `R_c` as a function of the parameters and the adaptive loss would be the
//! plain loss, term for term. With the scale detached, the forward value
//! still equals `M` exactly (up to rounding) but each chosen token in unit
//! `u` receives gradient proportional to `(R_c / R_c*) (1 + w_u)` instead
//! of a flat 1. Loss curves therefore coincide with the unweighted ones
//! while the update direction is redistributed across sentences.
//!
//! When `|R_c*| <= eps_scale` the scale is unbounded; the margin then falls
//! back to the unweighted form and the breakdown records the fallback.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, AspoError, Result};
use crate::segmentation::{check_partition, SentenceSpan};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_EPS_SCALE: f64 = 1e-8;

/// Granularity at which adaptive weights are applied to the chosen response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardLevel {
    /// One unit: the whole response, weighted by the mean sentence weight.
    Response,
    #[default]
    Sentence,
    /// One unit per token, each carrying its sentence's weight.
    Token,
}

impl fmt::Display for RewardLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardLevel::Response => "response",
            RewardLevel::Sentence => "sentence",
            RewardLevel::Token => "token",
        })
    }
}

impl FromStr for RewardLevel {
    type Err = AspoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "response" => Ok(RewardLevel::Response),
            "sentence" => Ok(RewardLevel::Sentence),
            "token" => Ok(RewardLevel::Token),
            other => invalid(format!("unknown reward level {other:?}")),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the first response is preferred.
pub fn bt_preference_probability(reward_chosen: f64, reward_rejected: f64) -> f64 {
    sigmoid(reward_chosen - reward_rejected)
}

/// `-log sigmoid(margin)`.
pub fn preference_loss(margin: f64) -> f64 {
    softplus(-margin)
}

/// Per-span implicit rewards `beta * sum (policy - reference)`.
pub fn implicit_rewards(
    policy_lp: &[f64],
    ref_lp: &[f64],
    spans: &[SentenceSpan],
    beta: f64,
) -> Result<Vec<f64>> {
    if policy_lp.len() != ref_lp.len() {
        return invalid(format!(
            "policy has {} log-probabilities, reference has {}",
            policy_lp.len(),
            ref_lp.len()
        ));
    }
    if beta <= 0.0 || !beta.is_finite() {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    check_partition(spans, policy_lp.len())?;
    Ok(spans
        .iter()
        .map(|s| {
            let r = s.token_range();
            beta * policy_lp[r.clone()]
                .iter()
                .zip(&ref_lp[r])
                .map(|(p, q)| p - q)
                .sum::<f64>()
        })
        .collect())
}

/// Policy and reference log-probabilities of both responses of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLogprobs {
    pub chosen_policy: Vec<f64>,
    pub chosen_reference: Vec<f64>,
    pub chosen_spans: Vec<SentenceSpan>,
    pub rejected_policy: Vec<f64>,
    pub rejected_reference: Vec<f64>,
    pub rejected_spans: Vec<SentenceSpan>,
}

impl PairLogprobs {
    pub fn num_chosen_sentences(&self) -> usize {
        self.chosen_spans.len()
    }

    fn validate(&self) -> Result<()> {
        if self.chosen_policy.len() != self.chosen_reference.len() {
            return invalid("chosen policy/reference length mismatch");
        }
        if self.rejected_policy.len() != self.rejected_reference.len() {
            return invalid("rejected policy/reference length mismatch");
        }
        check_partition(&self.chosen_spans, self.chosen_policy.len())?;
        check_partition(&self.rejected_spans, self.rejected_policy.len())
    }
}

/// Everything computed on the way to a margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBreakdown {
    pub chosen_sentence_rewards: Vec<f64>,
    pub rejected_reward: f64,
    /// `R_c`: sum of the chosen sentence rewards.
    pub r_c_original: f64,
    /// `R_c*`: sum of the (1 + w)-scaled unit rewards.
    pub r_c_reweighted: f64,
    /// `R_c / R_c*`, or 1 after a fallback.
    pub scale: f64,
    /// Rejected-side scale; 1 unless the rejected side is also reweighted.
    pub rejected_scale: f64,
    pub margin_dpo: f64,
    pub margin_aspo: f64,
    pub beta: f64,
    pub level: RewardLevel,
    /// True when a near-zero reweighted sum forced the unweighted margin.
    pub fallback: bool,
}

/// Settings for the adaptive margin beyond the weights themselves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams<'a> {
    pub beta: f64,
    pub level: RewardLevel,
    pub eps_scale: f64,
    /// Sentence weights for the rejected response. When present the rejected
    /// side is reweighted and rescaled the same way as the chosen side.
    pub rejected_weights: Option<&'a [f64]>,
}

impl MarginParams<'_> {
    pub fn new(beta: f64, level: RewardLevel) -> Self {
        MarginParams {
            beta,
            level,
            eps_scale: DEFAULT_EPS_SCALE,
            rejected_weights: None,
        }
    }
}

/// Unit decomposition of one response at a given level.
struct Units {
    rewards: Vec<f64>,
    weights: Vec<f64>,
    /// Unit index of every token.
    token_unit: Vec<usize>,
}

fn units_at_level(
    policy: &[f64],
    reference: &[f64],
    spans: &[SentenceSpan],
    sentence_rewards: &[f64],
    weights: &[f64],
    beta: f64,
    level: RewardLevel,
) -> Result<Units> {
    if weights.len() != spans.len() {
        return invalid(format!(
            "{} weights for {} sentences",
            weights.len(),
            spans.len()
        ));
    }
    let n_tokens = policy.len();
    Ok(match level {
        RewardLevel::Sentence => {
            let mut token_unit = vec![0; n_tokens];
            for (i, s) in spans.iter().enumerate() {
                token_unit[s.token_range()].fill(i);
            }
            Units {
                rewards: sentence_rewards.to_vec(),
                weights: weights.to_vec(),
                token_unit,
            }
        }
        RewardLevel::Response => {
            let mean = if weights.is_empty() {
                0.0
            } else {
                weights.iter().sum::<f64>() / weights.len() as f64
            };
            Units {
                rewards: vec![sentence_rewards.iter().sum()],
                weights: vec![mean],
                token_unit: vec![0; n_tokens],
            }
        }
        RewardLevel::Token => {
            let mut w_tok = vec![0.0; n_tokens];
            for (s, w) in spans.iter().zip(weights) {
                w_tok[s.token_range()].fill(*w);
            }
            Units {
                rewards: policy
                    .iter()
                    .zip(reference)
                    .map(|(p, q)| beta * (p - q))
                    .collect(),
                weights: w_tok,
                token_unit: (0..n_tokens).collect(),
            }
        }
    })
}

/// Reweighted sum and scale for one side. Returns (R, R*, scale, fallback).
fn rescale(units: &Units, eps: f64) -> (f64, f64, f64, bool) {
    let original: f64 = units.rewards.iter().sum();
    let reweighted: f64 = units
        .rewards
        .iter()
        .zip(&units.weights)
        .map(|(r, w)| (1.0 + w) * r)
        .sum();
    if reweighted.abs() <= eps {
        (original, reweighted, 1.0, true)
    } else {
        (original, reweighted, original / reweighted, false)
    }
}

/// Scale-times-reweighted-sum, the side's contribution to the margin.
fn side_value(units: &Units, scale: f64, fallback: bool) -> f64 {
    if fallback {
        units.rewards.iter().sum()
    } else {
        scale
            * units
                .rewards
                .iter()
                .zip(&units.weights)
                .map(|(r, w)| (1.0 + w) * r)
                .sum::<f64>()
    }
}

/// Per-token gradient coefficient `scale * (1 + w_unit)`, or 1 on fallback.
fn token_coefficients(units: &Units, scale: f64, fallback: bool) -> Vec<f64> {
    units
        .token_unit
        .iter()
        .map(|&u| {
            if fallback {
                1.0
            } else {
                scale * (1.0 + units.weights[u])
            }
        })
        .collect()
}

struct Evaluated {
    breakdown: MarginBreakdown,
    chosen_coef: Vec<f64>,
    rejected_coef: Vec<f64>,
}

fn evaluate(pair: &PairLogprobs, weights: &[f64], params: &MarginParams<'_>) -> Result<Evaluated> {
    pair.validate()?;
    if params.eps_scale.is_nan() || params.eps_scale < 0.0 {
        return invalid("eps_scale must be non-negative");
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return invalid("weights must be finite");
    }
    let beta = params.beta;
    let chosen_rewards = implicit_rewards(
        &pair.chosen_policy,
        &pair.chosen_reference,
        &pair.chosen_spans,
        beta,
    )?;
    let rejected_rewards = implicit_rewards(
        &pair.rejected_policy,
        &pair.rejected_reference,
        &pair.rejected_spans,
        beta,
    )?;
    let r_c: f64 = chosen_rewards.iter().sum();
    let r_r: f64 = rejected_rewards.iter().sum();

    let chosen = units_at_level(
        &pair.chosen_policy,
        &pair.chosen_reference,
        &pair.chosen_spans,
        &chosen_rewards,
        weights,
        beta,
        params.level,
    )?;
    let (_, r_star, scale, fallback) = rescale(&chosen, params.eps_scale);
    let chosen_value = side_value(&chosen, scale, fallback);
    let chosen_coef = token_coefficients(&chosen, scale, fallback);

    let (rejected_value, rejected_scale, rejected_coef, rej_fallback) =
        match params.rejected_weights {
            None => (r_r, 1.0, vec![1.0; pair.rejected_policy.len()], false),
            Some(rw) => {
                let rejected = units_at_level(
                    &pair.rejected_policy,
                    &pair.rejected_reference,
                    &pair.rejected_spans,
                    &rejected_rewards,
                    rw,
                    beta,
                    params.level,
                )?;
                let (_, _, s, fb) = rescale(&rejected, params.eps_scale);
                (
                    side_value(&rejected, s, fb),
                    s,
                    token_coefficients(&rejected, s, fb),
                    fb,
                )
            }
        };

    Ok(Evaluated {
        breakdown: MarginBreakdown {
            chosen_sentence_rewards: chosen_rewards,
            rejected_reward: r_r,
            r_c_original: r_c,
            r_c_reweighted: r_star,
            scale,
            rejected_scale,
            margin_dpo: r_c - r_r,
            margin_aspo: chosen_value - rejected_value,
            beta,
            level: params.level,
            fallback: fallback || rej_fallback,
        },
        chosen_coef,
        rejected_coef,
    })
}

/// Unweighted margin; `margin_aspo` equals `margin_dpo`.
pub fn dpo_margin(pair: &PairLogprobs, beta: f64) -> Result<MarginBreakdown> {
    let zeros = vec![0.0; pair.num_chosen_sentences()];
    let mut b = evaluate(
        pair,
        &zeros,
        &MarginParams::new(beta, RewardLevel::Sentence),
    )?
    .breakdown;
    b.margin_aspo = b.margin_dpo;
    b.scale = 1.0;
    b.fallback = false;
    Ok(b)
}

/// Sentence-level adaptive margin.
pub fn aspo_margin(pair: &PairLogprobs, weights: &[f64], beta: f64) -> Result<MarginBreakdown> {
    margin_at_level(pair, weights, beta, RewardLevel::Sentence)
}

/// Adaptive margin at the requested granularity. `weights` are always the
/// per-sentence weights of the chosen response.
pub fn margin_at_level(
    pair: &PairLogprobs,
    weights: &[f64],
    beta: f64,
    level: RewardLevel,
) -> Result<MarginBreakdown> {
    margin_with(pair, weights, &MarginParams::new(beta, level))
}

pub fn margin_with(
    pair: &PairLogprobs,
    weights: &[f64],
    params: &MarginParams<'_>,
) -> Result<MarginBreakdown> {
    Ok(evaluate(pair, weights, params)?.breakdown)
}

/// Gradient of the loss with respect to the policy log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogprobGradient {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

/// Loss, margins and policy-logprob gradient for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub breakdown: MarginBreakdown,
    /// `-log sigmoid(M*)`.
    pub loss: f64,
    /// `-log sigmoid(M)` at the same parameters.
    pub dpo_loss: f64,
    pub grad: LogprobGradient,
}

/// Loss and analytic gradient in one pass. Scale and weights are detached:
///
/// ```text
/// dL/d policy_lp[j] = -sigmoid(-M*) * beta * scale * (1 + w_unit(j))   (chosen)
/// dL/d policy_lp[j] = +sigmoid(-M*) * beta * scale_r * (1 + v_unit(j)) (rejected)
/// ```
pub fn pair_outcome(
    pair: &PairLogprobs,
    weights: &[f64],
    params: &MarginParams<'_>,
) -> Result<PairOutcome> {
    let ev = evaluate(pair, weights, params)?;
    let m = ev.breakdown.margin_aspo;
    let g = sigmoid(-m) * params.beta;
    Ok(PairOutcome {
        loss: preference_loss(m),
        dpo_loss: preference_loss(ev.breakdown.margin_dpo),
        grad: LogprobGradient {
            chosen: ev.chosen_coef.iter().map(|c| -g * c).collect(),
            rejected: ev.rejected_coef.iter().map(|c| g * c).collect(),
        },
        breakdown: ev.breakdown,
    })
}

pub fn loss_gradient_wrt_logprobs(
    pair: &PairLogprobs,
    weights: &[f64],
    beta: f64,
    level: RewardLevel,
) -> Result<LogprobGradient> {
    Ok(pair_outcome(pair, weights, &MarginParams::new(beta, level))?.grad)
}
