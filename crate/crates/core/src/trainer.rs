//! Training loop: per batch, score the chosen sentences, build the margin,
//! average the per-pair gradients and take a plain gradient-descent step.
//!
//! Per-pair work runs through [`Execution`]; gradients are collected in
//! input order and summed sequentially, so results do not depend on the
//! thread count.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AspoError, Result};
use crate::exec::Execution;
use crate::margin::{
    dpo_margin, margin_with, pair_outcome, MarginBreakdown, MarginParams, PairLogprobs,
    RewardLevel, DEFAULT_BETA, DEFAULT_EPS_SCALE,
};
use crate::model::{ReferenceModel, ToyLmParams};
use crate::pipeline::{derive_seed, PreferencePair};
use crate::scoring::{sentence_weights, Scorer, SentenceWeights};
use crate::segmentation::SentenceSpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Dpo,
    #[default]
    Aspo,
}

/// Which model's log-probabilities feed the perplexity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PplSource {
    #[default]
    Reference,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Dpo => "dpo",
            LossMode::Aspo => "aspo",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = AspoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(LossMode::Dpo),
            "aspo" => Ok(LossMode::Aspo),
            other => invalid(format!("unknown loss mode {other:?}")),
        }
    }
}

/// Large-model runs use 2e-6; the toy model needs a much larger step.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub beta: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub reward_level: RewardLevel,
    pub loss_mode: LossMode,
    pub ppl_source: PplSource,
    pub seed: u64,
    pub eps_scale: f64,
    /// Reweight the rejected response with its own sentence weights too.
    pub mirror_rejected: bool,
    /// Replace every sentence weight by 0.
    pub force_zero_weights: bool,
    /// Steps per metrics record.
    pub log_every: usize,
    /// Stop once the interval mean loss changes by less than this.
    pub loss_delta_threshold: Option<f64>,
    pub execution: Execution,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 1,
            batch_size: 10,
            lr_schedule: LrSchedule::Cosine,
            reward_level: RewardLevel::Sentence,
            loss_mode: LossMode::Aspo,
            ppl_source: PplSource::Reference,
            seed: 0,
            eps_scale: DEFAULT_EPS_SCALE,
            mirror_rejected: false,
            force_zero_weights: false,
            log_every: 1,
            loss_delta_threshold: None,
            execution: Execution::Parallel,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return invalid("beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("alpha must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.log_every == 0 {
            return invalid("log_every must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return invalid("learning_rate must be a finite non-negative number");
        }
        if self.eps_scale.is_nan() || self.eps_scale < 0.0 {
            return invalid("eps_scale must be non-negative");
        }
        Ok(())
    }

    fn uses_weights(&self) -> bool {
        self.loss_mode == LossMode::Aspo && !self.force_zero_weights
    }
}

/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return invalid(format!("step {step} past total {total_steps}"));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

pub const HISTOGRAM_BINS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Number of parameter updates applied when the record was taken.
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub pairs: usize,
    pub mean_loss: f64,
    /// Unweighted loss at the same parameters.
    pub mean_dpo_loss: f64,
    pub mean_margin: f64,
    pub reward_accuracy: f64,
    pub scale_fallback_count: usize,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Counts of sentence weights in bins of width 0.2 over [0, 1].
    pub weight_histogram: [u64; HISTOGRAM_BINS],
}

#[derive(Debug, Default)]
struct Accumulator {
    pairs: usize,
    loss: f64,
    dpo_loss: f64,
    margin: f64,
    correct: usize,
    fallbacks: usize,
    weight_sum: f64,
    weight_count: usize,
    min_w: Option<f64>,
    max_w: Option<f64>,
    hist: [u64; HISTOGRAM_BINS],
}

impl Accumulator {
    fn add(&mut self, loss: f64, dpo_loss: f64, margin: f64, fallback: bool, weights: &[f64]) {
        self.pairs += 1;
        self.loss += loss;
        self.dpo_loss += dpo_loss;
        self.margin += margin;
        self.correct += (margin > 0.0) as usize;
        self.fallbacks += fallback as usize;
        for &w in weights {
            self.weight_sum += w;
            self.weight_count += 1;
            self.min_w = Some(self.min_w.map_or(w, |m| m.min(w)));
            self.max_w = Some(self.max_w.map_or(w, |m| m.max(w)));
            let bin = ((w * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            self.hist[bin] += 1;
        }
    }

    fn finish(&self, step: usize, epoch: usize, lr: f64) -> MetricsRecord {
        let n = self.pairs.max(1) as f64;
        MetricsRecord {
            step,
            epoch,
            learning_rate: lr,
            pairs: self.pairs,
            mean_loss: self.loss / n,
            mean_dpo_loss: self.dpo_loss / n,
            mean_margin: self.margin / n,
            reward_accuracy: self.correct as f64 / n,
            scale_fallback_count: self.fallbacks,
            mean_weight: if self.weight_count == 0 {
                0.0
            } else {
                self.weight_sum / self.weight_count as f64
            },
            min_weight: self.min_w.unwrap_or(0.0),
            max_weight: self.max_w.unwrap_or(0.0),
            weight_histogram: self.hist,
        }
    }
}

/// Tokenized pair with everything that does not change during training.
struct Prepared<'a> {
    pair: &'a PreferencePair,
    chosen_ids: Vec<u32>,
    rejected_ids: Vec<u32>,
    chosen_spans: Vec<SentenceSpan>,
    rejected_spans: Vec<SentenceSpan>,
    ref_chosen: Vec<f64>,
    ref_rejected: Vec<f64>,
    /// Present when perplexity comes from the reference model.
    cached_weights: Option<(SentenceWeights, Option<SentenceWeights>)>,
}

fn prepare<'a>(
    pair: &'a PreferencePair,
    reference: &ToyLmParams,
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
) -> Result<Prepared<'a>> {
    if pair.chosen.is_empty() || pair.rejected.is_empty() {
        return invalid(format!("{}: empty response", pair.pair_id));
    }
    let chosen_ids = pair.chosen.ids();
    let rejected_ids = pair.rejected.ids();
    let chosen_spans = pair.chosen.sentence_spans()?;
    let rejected_spans = pair.rejected.sentence_spans()?;
    let ref_chosen = reference.forward_logprobs(&pair.image_features, &chosen_ids)?;
    let ref_rejected = reference.forward_logprobs(&pair.image_features, &rejected_ids)?;
    let mut prep = Prepared {
        pair,
        chosen_ids,
        rejected_ids,
        chosen_spans,
        rejected_spans,
        ref_chosen,
        ref_rejected,
        cached_weights: None,
    };
    if cfg.ppl_source == PplSource::Reference {
        let (rc, rr) = (prep.ref_chosen.clone(), prep.ref_rejected.clone());
        prep.cached_weights = Some(weights_for(&prep, &rc, &rr, scorer, cfg)?);
    }
    Ok(prep)
}

fn weights_for(
    prep: &Prepared<'_>,
    chosen_lp: &[f64],
    rejected_lp: &[f64],
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
) -> Result<(SentenceWeights, Option<SentenceWeights>)> {
    let p = prep.pair;
    let chosen = sentence_weights(
        scorer,
        &p.image_features,
        &p.chosen,
        &prep.chosen_spans,
        chosen_lp,
        cfg.alpha,
    )?;
    let rejected = if cfg.mirror_rejected {
        Some(sentence_weights(
            scorer,
            &p.image_features,
            &p.rejected,
            &prep.rejected_spans,
            rejected_lp,
            cfg.alpha,
        )?)
    } else {
        None
    };
    Ok((chosen, rejected))
}

struct PairResult {
    loss: f64,
    dpo_loss: f64,
    margin: f64,
    fallback: bool,
    weights: Vec<f64>,
    grad: ToyLmParams,
}

struct PairInputs {
    logprobs: PairLogprobs,
    weights: Vec<f64>,
    rejected_weights: Option<Vec<f64>>,
    level: RewardLevel,
}

impl PairInputs {
    fn margin_params(&self, cfg: &TrainingConfig) -> MarginParams<'_> {
        MarginParams {
            beta: cfg.beta,
            level: self.level,
            eps_scale: cfg.eps_scale,
            rejected_weights: self.rejected_weights.as_deref(),
        }
    }
}

fn pair_inputs(
    prep: &Prepared<'_>,
    policy: &ToyLmParams,
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
) -> Result<PairInputs> {
    let x = &prep.pair.image_features;
    let pol_c = policy.forward_logprobs(x, &prep.chosen_ids)?;
    let pol_r = policy.forward_logprobs(x, &prep.rejected_ids)?;

    let k = prep.chosen_spans.len();
    let (weights, rejected_weights): (Vec<f64>, Option<Vec<f64>>) = if !cfg.uses_weights() {
        (vec![0.0; k], None)
    } else {
        let (c, r) = match &prep.cached_weights {
            Some(w) => w.clone(),
            None => weights_for(prep, &pol_c, &pol_r, scorer, cfg)?,
        };
        (c.weight, r.map(|r| r.weight))
    };

    let level = match cfg.loss_mode {
        LossMode::Dpo => RewardLevel::Sentence,
        LossMode::Aspo => cfg.reward_level,
    };
    let logprobs = PairLogprobs {
        chosen_policy: pol_c,
        chosen_reference: prep.ref_chosen.clone(),
        chosen_spans: prep.chosen_spans.clone(),
        rejected_policy: pol_r,
        rejected_reference: prep.ref_rejected.clone(),
        rejected_spans: prep.rejected_spans.clone(),
    };
    Ok(PairInputs {
        logprobs,
        weights,
        rejected_weights,
        level,
    })
}

fn pair_step(
    prep: &Prepared<'_>,
    policy: &ToyLmParams,
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
) -> Result<PairResult> {
    let x = &prep.pair.image_features;
    let inputs = pair_inputs(prep, policy, scorer, cfg)?;
    let (pair_lp, weights) = (&inputs.logprobs, &inputs.weights);
    let params = inputs.margin_params(cfg);
    let out = pair_outcome(pair_lp, weights, &params)?;
    let mut grad = policy.zeros_like();
    policy.backward_into(x, &prep.chosen_ids, &out.grad.chosen, &mut grad)?;
    policy.backward_into(x, &prep.rejected_ids, &out.grad.rejected, &mut grad)?;
    Ok(PairResult {
        loss: out.loss,
        dpo_loss: out.dpo_loss,
        margin: out.breakdown.margin_aspo,
        fallback: out.breakdown.fallback,
        weights: inputs.weights.clone(),
        grad,
    })
}

/// Margin breakdown of every pair at `policy`, with sentence weights
/// computed exactly as during training under `cfg`.
pub fn pair_breakdowns(
    dataset: &[PreferencePair],
    policy: &ToyLmParams,
    reference: &ToyLmParams,
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
) -> Result<Vec<MarginBreakdown>> {
    cfg.validate()?;
    cfg.execution.try_map(dataset, |p| {
        let prep = prepare(p, reference, scorer, cfg)?;
        let inputs = pair_inputs(&prep, policy, scorer, cfg)?;
        margin_with(
            &inputs.logprobs,
            &inputs.weights,
            &inputs.margin_params(cfg),
        )
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyLmParams,
    pub reference: ReferenceModel,
    pub metrics: Vec<MetricsRecord>,
    pub steps: usize,
    pub converged: bool,
}

pub fn train(
    dataset: &[PreferencePair],
    init: &ToyLmParams,
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    train_with_observer(dataset, init, scorer, cfg, |_, _| {})
}

/// As [`train`], calling `observe(step, params)` after every update.
pub fn train_with_observer<F>(
    dataset: &[PreferencePair],
    init: &ToyLmParams,
    scorer: &dyn Scorer,
    cfg: &TrainingConfig,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ToyLmParams),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return invalid("training set is empty");
    }
    let reference = init.snapshot_reference();
    let exec = cfg.execution;
    let refs: Vec<&PreferencePair> = dataset.iter().collect();
    let prepared = exec.try_map(&refs, |&p| prepare(p, &reference, scorer, cfg))?;

    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut params = init.clone();
    let mut metrics = Vec::new();
    let mut acc = Accumulator::default();
    let mut step = 0usize;
    let mut last_lr = cfg.learning_rate;
    let mut prev_interval_loss: Option<f64> = None;
    let mut converged = false;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let lr = match cfg.lr_schedule {
                LrSchedule::Constant => cfg.learning_rate,
                LrSchedule::Cosine => cosine_lr(step, total_steps, cfg.learning_rate)?,
            };
            let members: Vec<&Prepared<'_>> = batch.iter().map(|&i| &prepared[i]).collect();
            let results = exec.try_map(&members, |p| pair_step(p, &params, scorer, cfg))?;

            let mut grad = params.zeros_like();
            for r in &results {
                if !r.loss.is_finite() || !r.margin.is_finite() {
                    return Err(AspoError::NonFinite {
                        step,
                        loss: r.loss,
                        margin: r.margin,
                    });
                }
                acc.add(r.loss, r.dpo_loss, r.margin, r.fallback, &r.weights);
                grad.axpy(1.0, &r.grad);
            }
            params.axpy(-lr / results.len() as f64, &grad);
            step += 1;
            last_lr = lr;
            observe(step, &params);

            if step.is_multiple_of(cfg.log_every) {
                let rec = acc.finish(step, epoch, lr);
                acc = Accumulator::default();
                if let (Some(th), Some(prev)) = (cfg.loss_delta_threshold, prev_interval_loss) {
                    if (rec.mean_loss - prev).abs() < th {
                        converged = true;
                    }
                }
                prev_interval_loss = Some(rec.mean_loss);
                log::debug!(
                    "step {step}: loss {:.6} margin {:.6} acc {:.3}",
                    rec.mean_loss,
                    rec.mean_margin,
                    rec.reward_accuracy
                );
                metrics.push(rec);
                if converged {
                    break 'epochs;
                }
            }
        }
    }
    if acc.pairs > 0 {
        metrics.push(acc.finish(step, cfg.epochs.saturating_sub(1), last_lr));
    }

    Ok(TrainOutcome {
        params,
        reference,
        metrics,
        steps: step,
        converged,
    })
}

/// Held-out metrics with the unweighted margin. A margin of exactly 0
/// counts as a miss.
pub fn evaluate(
    dataset: &[PreferencePair],
    policy: &ToyLmParams,
    reference: &ToyLmParams,
    beta: f64,
    exec: Execution,
) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return invalid("evaluation set is empty");
    }
    let margins = exec.try_map(dataset, |p| -> Result<f64> {
        let x = &p.image_features;
        let (c, r) = (p.chosen.ids(), p.rejected.ids());
        let lp = PairLogprobs {
            chosen_policy: policy.forward_logprobs(x, &c)?,
            chosen_reference: reference.forward_logprobs(x, &c)?,
            chosen_spans: p.chosen.sentence_spans()?,
            rejected_policy: policy.forward_logprobs(x, &r)?,
            rejected_reference: reference.forward_logprobs(x, &r)?,
            rejected_spans: p.rejected.sentence_spans()?,
        };
        Ok(dpo_margin(&lp, beta)?.margin_dpo)
    })?;
    let mut acc = Accumulator::default();
    for m in margins {
        let l = crate::margin::preference_loss(m);
        acc.add(l, l, m, false, &[]);
    }
    Ok(acc.finish(0, 0, 0.0))
}

pub const METRICS_CSV_HEADER: &str = "step,epoch,learning_rate,pairs,mean_loss,mean_dpo_loss,mean_margin,reward_accuracy,scale_fallback_count,mean_weight,min_weight,max_weight,weight_histogram";

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in records {
        let hist: Vec<String> = r.weight_histogram.iter().map(u64::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.learning_rate,
            r.pairs,
            r.mean_loss,
            r.mean_dpo_loss,
            r.mean_margin,
            r.reward_accuracy,
            r.scale_fallback_count,
            r.mean_weight,
            r.min_weight,
            r.max_weight,
            hist.join(";")
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_CSV_HEADER => {}
        _ => return Err(AspoError::Parse("metrics CSV header mismatch".into())),
    }
    let bad =
        |n: usize, what: &str| AspoError::Parse(format!("metrics line {}: bad {what}", n + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 13 {
                return Err(bad(n, "field count"));
            }
            let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad(n, "integer"));
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n, "number"));
            let mut hist = [0u64; HISTOGRAM_BINS];
            let parts: Vec<&str> = f[12].split(';').collect();
            if parts.len() != HISTOGRAM_BINS {
                return Err(bad(n, "histogram"));
            }
            for (h, p) in hist.iter_mut().zip(parts) {
                *h = p.parse().map_err(|_| bad(n, "histogram"))?;
            }
            Ok(MetricsRecord {
                step: u(0)?,
                epoch: u(1)?,
                learning_rate: x(2)?,
                pairs: u(3)?,
                mean_loss: x(4)?,
                mean_dpo_loss: x(5)?,
                mean_margin: x(6)?,
                reward_accuracy: x(7)?,
                scale_fallback_count: u(8)?,
                mean_weight: x(9)?,
                min_weight: x(10)?,
                max_weight: x(11)?,
                weight_histogram: hist,
            })
        })
        .collect()
}
