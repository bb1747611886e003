//! The five commands. Each one reads its inputs, stages its outputs in a
//! temporary directory and commits them together with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use aspo_core::corpus::{corpus_vocabulary, SyntheticCorpus};
use aspo_core::decode::ToyLmResponder;
use aspo_core::margin::RewardLevel;
use aspo_core::model::{read_checkpoint, write_checkpoint};
use aspo_core::pipeline::{
    generate_dataset, read_jsonl, write_jsonl, GenerationConfig, GenerationReport,
};
use aspo_core::trainer::{
    evaluate, pair_breakdowns, read_metrics_csv, train, write_metrics_csv, LossMode, TrainOutcome,
    TrainingConfig,
};
use aspo_core::{HashedBagEmbedder, MetricsRecord, ModelDims, PreferencePair, ToyLmParams};
use serde::{Deserialize, Serialize};

use crate::config::{GeneratorKind, RunConfig};
use crate::output::{sha256_hex, FileEntry, Manifest, StagedDir};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const REFERENCE_FILE: &str = "reference.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const LOSS_CURVES_FILE: &str = "loss_curves.csv";
pub const ALPHA_SWEEP_FILE: &str = "alpha_sweep.csv";
pub const ALPHA_SWEEP_META_FILE: &str = "alpha_sweep.json";

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("corpus".to_string(), cfg.corpus.seed),
        ("embedder".to_string(), cfg.embedder.seed),
        ("generation".to_string(), cfg.generation.seed),
        ("model".to_string(), cfg.model.seed),
        ("training".to_string(), cfg.training.seed),
    ])
}

fn manifest(
    command: &str,
    cfg: &RunConfig,
    inputs: Vec<FileEntry>,
    started: Instant,
    summary: impl Serialize,
) -> Result<Manifest> {
    Ok(Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(cfg)?,
        seeds: seeds(cfg),
        inputs,
        outputs: Vec::new(),
        duration_secs: started.elapsed().as_secs_f64(),
        summary: serde_json::to_value(summary)?,
    })
}

pub fn embedder(cfg: &RunConfig) -> Result<HashedBagEmbedder> {
    Ok(HashedBagEmbedder::new(cfg.embedder.dim, cfg.embedder.seed)?)
}

pub fn model_dims(cfg: &RunConfig) -> ModelDims {
    ModelDims {
        vocab_size: corpus_vocabulary().len(),
        hidden_dim: cfg.model.hidden_dim,
        context_dim: cfg.embedder.dim,
    }
}

pub fn initial_model(cfg: &RunConfig) -> Result<ToyLmParams> {
    Ok(ToyLmParams::init(model_dims(cfg), cfg.model.seed)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyLmParams> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_checkpoint(BufReader::new(f))
        .with_context(|| format!("invalid checkpoint {}", path.display()))
}

fn checkpoint_bytes(params: &ToyLmParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

/// A directory argument means its `pairs.jsonl`.
pub fn resolve_data(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(PAIRS_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_pairs(path: &Path) -> Result<(Vec<PreferencePair>, FileEntry)> {
    let path = resolve_data(path);
    let f = File::open(&path).with_context(|| format!("cannot open dataset {}", path.display()))?;
    let pairs = read_jsonl(BufReader::new(f))
        .with_context(|| format!("malformed dataset {}", path.display()))?;
    Ok((pairs, FileEntry::of(&path)?))
}

/// Training and held-out parts; the held-out part is taken from the end.
pub fn split_heldout(
    pairs: &[PreferencePair],
    fraction: f64,
) -> Result<(&[PreferencePair], &[PreferencePair])> {
    let n = pairs.len();
    let mut held = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && held == 0 && n > 1 {
        held = 1;
    }
    ensure!(held < n, "dataset of {n} pairs leaves nothing to train on");
    Ok(pairs.split_at(n - held))
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub prompts: usize,
    pub kept: usize,
    pub filtered: usize,
    pub noise_step: u32,
}

pub fn generate(cfg: &RunConfig) -> Result<GenerationReport> {
    cfg.validate()?;
    let corpus = SyntheticCorpus::new(cfg.corpus, embedder(cfg)?)?;
    let vocab = corpus.vocabulary();
    let prompts = corpus.prompts()?;
    let gen = GenerationConfig {
        noise_step: cfg.generation.noise_step,
        seed: cfg.generation.seed,
    };
    let exec = cfg.training.execution;
    let report = match cfg.generation.generator {
        GeneratorKind::Template => {
            generate_dataset(&prompts, &corpus.responder(), &vocab, &gen, exec)?
        }
        GeneratorKind::ToyLm => {
            let params = match &cfg.generation.checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => initial_model(cfg)?,
            };
            let responder = ToyLmResponder {
                params: Arc::new(params),
                vocab: vocab.clone(),
                max_len: cfg.generation.max_decode_len,
                temperature: cfg.generation.temperature,
            };
            generate_dataset(&prompts, &responder, &vocab, &gen, exec)?
        }
    };
    Ok(report)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<GenSummary> {
    let started = Instant::now();
    let report = generate(cfg)?;
    let summary = GenSummary {
        prompts: report.prompts,
        kept: report.pairs.len(),
        filtered: report.filtered,
        noise_step: cfg.generation.noise_step,
    };
    if report.pairs.is_empty() {
        log::warn!(
            "all {} pairs were filtered: chosen and rejected responses are identical at noise step {}",
            report.prompts,
            cfg.generation.noise_step
        );
    } else {
        log::info!(
            "kept {} of {} pairs ({} filtered)",
            summary.kept,
            summary.prompts,
            summary.filtered
        );
    }
    let mut stage = StagedDir::new(out)?;
    let mut buf = Vec::new();
    write_jsonl(&report.pairs, &mut buf)?;
    stage.write(PAIRS_FILE, &buf)?;
    stage.commit(manifest("gen-data", cfg, vec![], started, &summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub reward_accuracy: f64,
    pub mean_margin: f64,
    pub mean_loss: f64,
}

impl From<&MetricsRecord> for EvalSummary {
    fn from(m: &MetricsRecord) -> Self {
        EvalSummary {
            pairs: m.pairs,
            reward_accuracy: m.reward_accuracy,
            mean_margin: m.mean_margin,
            mean_loss: m.mean_loss,
        }
    }
}

fn eval_summary(
    pairs: &[PreferencePair],
    policy: &ToyLmParams,
    reference: &ToyLmParams,
    cfg: &TrainingConfig,
) -> Result<Option<EvalSummary>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let m = evaluate(pairs, policy, reference, cfg.beta, cfg.execution)?;
    Ok(Some(EvalSummary::from(&m)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub steps: usize,
    pub converged: bool,
    pub final_train_loss: f64,
    pub heldout_before: Option<EvalSummary>,
    pub heldout_after: Option<EvalSummary>,
    pub min_weight: f64,
    pub max_weight: f64,
    pub mean_weight: f64,
    pub scale_fallbacks: usize,
    pub duration_secs: f64,
}

pub struct TrainedRun {
    pub summary: TrainSummary,
    pub outcome: TrainOutcome,
}

/// Train from `init` on `train_set` and score the held-out part before and
/// after.
pub fn run_training(
    label: &str,
    tcfg: &TrainingConfig,
    scorer: &HashedBagEmbedder,
    init: &ToyLmParams,
    train_set: &[PreferencePair],
    heldout: &[PreferencePair],
) -> Result<TrainedRun> {
    let started = Instant::now();
    let before = eval_summary(heldout, init, init, tcfg)?;
    let outcome =
        train(train_set, init, scorer, tcfg).with_context(|| format!("training run {label}"))?;
    let after = eval_summary(heldout, &outcome.params, &outcome.reference, tcfg)?;
    let m = &outcome.metrics;
    let weighted: Vec<&MetricsRecord> = m
        .iter()
        .filter(|r| r.weight_histogram.iter().sum::<u64>() > 0)
        .collect();
    let wsum: f64 = weighted
        .iter()
        .map(|r| r.mean_weight * r.weight_histogram.iter().sum::<u64>() as f64)
        .sum();
    let wcount: u64 = weighted
        .iter()
        .map(|r| r.weight_histogram.iter().sum::<u64>())
        .sum();
    let summary = TrainSummary {
        label: label.to_string(),
        train_pairs: train_set.len(),
        heldout_pairs: heldout.len(),
        steps: outcome.steps,
        converged: outcome.converged,
        final_train_loss: m.last().map_or(f64::NAN, |r| r.mean_loss),
        heldout_before: before,
        heldout_after: after,
        min_weight: weighted
            .iter()
            .map(|r| r.min_weight)
            .fold(f64::INFINITY, f64::min),
        max_weight: weighted
            .iter()
            .map(|r| r.max_weight)
            .fold(f64::NEG_INFINITY, f64::max),
        mean_weight: if wcount == 0 {
            0.0
        } else {
            wsum / wcount as f64
        },
        scale_fallbacks: m.iter().map(|r| r.scale_fallback_count).sum(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "{label}: {} steps, final loss {:.6}, held-out accuracy {:?} -> {:?}",
        summary.steps,
        summary.final_train_loss,
        before.map(|e| e.reward_accuracy),
        after.map(|e| e.reward_accuracy)
    );
    Ok(TrainedRun { summary, outcome })
}

fn stage_run(stage: &mut StagedDir, prefix: &str, run: &TrainedRun) -> Result<()> {
    stage.write(
        &format!("{prefix}{CHECKPOINT_FILE}"),
        &checkpoint_bytes(&run.outcome.params)?,
    )?;
    stage.write(
        &format!("{prefix}{REFERENCE_FILE}"),
        &checkpoint_bytes(run.outcome.reference.params())?,
    )?;
    let mut csv = Vec::new();
    write_metrics_csv(&run.outcome.metrics, &mut csv)?;
    stage.write(&format!("{prefix}{METRICS_FILE}"), &csv)?;
    let eval = serde_json::json!({
        "heldout_before": run.summary.heldout_before,
        "heldout_after": run.summary.heldout_after,
    });
    stage.write(
        &format!("{prefix}{EVAL_FILE}"),
        (serde_json::to_string_pretty(&eval)? + "\n").as_bytes(),
    )?;
    Ok(())
}

/// Summary minus wall-clock time, so reruns produce identical files.
fn stable(summary: &TrainSummary) -> TrainSummary {
    TrainSummary {
        duration_secs: 0.0,
        ..summary.clone()
    }
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    let started = Instant::now();
    cfg.validate()?;
    let (pairs, input) = load_pairs(data)?;
    let (train_set, heldout) = split_heldout(&pairs, cfg.eval.heldout_fraction)?;
    let init = initial_model(cfg)?;
    let label = format!("{}-{}", cfg.training.loss_mode, cfg.training.reward_level);
    let run = run_training(
        &label,
        &cfg.training,
        &embedder(cfg)?,
        &init,
        train_set,
        heldout,
    )?;
    let mut stage = StagedDir::new(out)?;
    stage_run(&mut stage, "", &run)?;
    stage.commit(manifest(
        "train",
        cfg,
        vec![input],
        started,
        stable(&run.summary),
    )?)?;
    Ok(run.summary)
}

// ---------------------------------------------------------------- eval

pub fn eval_cmd(
    cfg: &RunConfig,
    data: &Path,
    run_dir: &Path,
    out: &Path,
    heldout_only: bool,
) -> Result<EvalSummary> {
    let started = Instant::now();
    cfg.validate()?;
    let (pairs, input) = load_pairs(data)?;
    let policy_path = run_dir.join(CHECKPOINT_FILE);
    let reference_path = run_dir.join(REFERENCE_FILE);
    let policy = load_checkpoint(&policy_path)?;
    let reference = load_checkpoint(&reference_path)?;
    ensure!(
        policy.dims == reference.dims,
        "policy and reference checkpoints disagree on dimensions"
    );
    let set = if heldout_only {
        split_heldout(&pairs, cfg.eval.heldout_fraction)?.1
    } else {
        &pairs[..]
    };
    let Some(summary) = eval_summary(set, &policy, &reference, &cfg.training)? else {
        bail!("nothing to evaluate");
    };
    log::info!(
        "accuracy {:.4}, mean margin {:.6} over {} pairs",
        summary.reward_accuracy,
        summary.mean_margin,
        summary.pairs
    );
    let mut stage = StagedDir::new(out)?;
    stage.write(
        EVAL_FILE,
        (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
    )?;
    let inputs = vec![
        input,
        FileEntry::of(&policy_path)?,
        FileEntry::of(&reference_path)?,
    ];
    stage.commit(manifest("eval", cfg, inputs, started, summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------- ablate

/// The four ablation arms: plain DPO and the reweighted loss at each level.
pub fn ablation_modes(base: &TrainingConfig) -> Vec<(&'static str, TrainingConfig)> {
    let with = |mode: LossMode, level: RewardLevel| TrainingConfig {
        loss_mode: mode,
        reward_level: level,
        ..base.clone()
    };
    vec![
        ("dpo", with(LossMode::Dpo, RewardLevel::Sentence)),
        ("aspo-response", with(LossMode::Aspo, RewardLevel::Response)),
        ("aspo-sentence", with(LossMode::Aspo, RewardLevel::Sentence)),
        ("aspo-token", with(LossMode::Aspo, RewardLevel::Token)),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub heldout_accuracy_before: f64,
    pub heldout_accuracy: f64,
    pub heldout_margin: f64,
    pub mean_weight: f64,
    pub scale_fallbacks: usize,
    /// Largest |reweighted margin − unweighted margin| over the training
    /// pairs at the final parameters.
    pub max_margin_gap: f64,
    pub init_sha256: String,
}

pub const ABLATION_HEADER: &str = "mode,train_pairs,heldout_pairs,steps,final_train_loss,heldout_accuracy_before,heldout_accuracy,heldout_margin,mean_weight,scale_fallbacks,max_margin_gap,init_sha256";

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:e},{}",
            r.mode,
            r.train_pairs,
            r.heldout_pairs,
            r.steps,
            r.final_train_loss,
            r.heldout_accuracy_before,
            r.heldout_accuracy,
            r.heldout_margin,
            r.mean_weight,
            r.scale_fallbacks,
            r.max_margin_gap,
            r.init_sha256
        );
    }
    s
}

/// Runs `f` over `items`, on one thread each when `parallel`. Results keep
/// input order.
fn fan_out<T: Sync, U: Send>(
    items: &[T],
    parallel: bool,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    if !parallel {
        return items.iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("worker thread panicked")))
            .collect()
    })
}

pub fn ablate_cmd(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let started = Instant::now();
    cfg.validate()?;
    let (pairs, input) = load_pairs(data)?;
    let (train_set, heldout) = split_heldout(&pairs, cfg.eval.heldout_fraction)?;
    let scorer = embedder(cfg)?;
    let init = initial_model(cfg)?;
    let init_sha = sha256_hex(&checkpoint_bytes(&init)?);
    let modes = ablation_modes(&cfg.training);

    let runs = fan_out(&modes, parallel, |(name, tcfg)| {
        let run = run_training(name, tcfg, &scorer, &init, train_set, heldout)?;
        let gap = pair_breakdowns(
            train_set,
            &run.outcome.params,
            run.outcome.reference.params(),
            &scorer,
            tcfg,
        )?
        .iter()
        .map(|b| (b.margin_aspo - b.margin_dpo).abs())
        .fold(0.0, f64::max);
        Ok((run, gap))
    })?;

    let mut stage = StagedDir::new(out)?;
    let mut rows = Vec::new();
    for ((name, _), (run, gap)) in modes.iter().zip(&runs) {
        stage_run(&mut stage, &format!("{name}/"), run)?;
        let s = &run.summary;
        rows.push(AblationRow {
            mode: name.to_string(),
            train_pairs: s.train_pairs,
            heldout_pairs: s.heldout_pairs,
            steps: s.steps,
            final_train_loss: s.final_train_loss,
            heldout_accuracy_before: s.heldout_before.map_or(f64::NAN, |e| e.reward_accuracy),
            heldout_accuracy: s.heldout_after.map_or(f64::NAN, |e| e.reward_accuracy),
            heldout_margin: s.heldout_after.map_or(f64::NAN, |e| e.mean_margin),
            mean_weight: s.mean_weight,
            scale_fallbacks: s.scale_fallbacks,
            max_margin_gap: *gap,
            init_sha256: init_sha.clone(),
        });
    }
    stage.write(ABLATION_FILE, ablation_csv(&rows).as_bytes())?;
    stage.commit(manifest("ablate", cfg, vec![input], started, &rows)?)?;
    Ok(rows)
}

// ---------------------------------------------------------------- report

pub const LOSS_CURVES_HEADER: &str =
    "run,step,epoch,learning_rate,mean_loss,mean_dpo_loss,mean_margin,reward_accuracy,mean_weight";

fn push_curve(s: &mut String, run: &str, records: &[MetricsRecord]) {
    for r in records {
        let _ = writeln!(
            s,
            "{run},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.learning_rate,
            r.mean_loss,
            r.mean_dpo_loss,
            r.mean_margin,
            r.reward_accuracy,
            r.mean_weight
        );
    }
}

/// Every `metrics.csv` at or below `dir`, labelled by its relative
/// directory. Sorted for a stable report.
fn find_metrics(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
                let parent = path.parent().unwrap_or(dir);
                let rel = parent.strip_prefix(dir).unwrap_or(parent);
                let base = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let label = if rel.as_os_str().is_empty() {
                    base
                } else {
                    format!("{base}/{}", rel.display())
                };
                found.push((label, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub is_default: bool,
    pub heldout_accuracy: f64,
    pub heldout_margin: f64,
    pub final_train_loss: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub mean_weight: f64,
    pub weights_in_unit_range: bool,
}

pub const ALPHA_SWEEP_HEADER: &str = "alpha,is_default,heldout_accuracy,heldout_margin,final_train_loss,min_weight,max_weight,mean_weight,weights_in_unit_range";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportSummary {
    pub curves: Vec<String>,
    pub alpha_sweep: Vec<AlphaRow>,
    pub default_alpha: f64,
}

pub fn alpha_sweep(
    cfg: &RunConfig,
    pairs: &[PreferencePair],
    parallel: bool,
) -> Result<Vec<(AlphaRow, TrainedRun)>> {
    let (train_set, heldout) = split_heldout(pairs, cfg.eval.heldout_fraction)?;
    let scorer = embedder(cfg)?;
    let init = initial_model(cfg)?;
    let default_alpha = RunConfig::default_alpha();
    fan_out(&cfg.report.alpha_grid, parallel, |&alpha| {
        let tcfg = TrainingConfig {
            alpha,
            loss_mode: LossMode::Aspo,
            ..cfg.training.clone()
        };
        let run = run_training(
            &format!("alpha={alpha}"),
            &tcfg,
            &scorer,
            &init,
            train_set,
            heldout,
        )?;
        let s = &run.summary;
        let row = AlphaRow {
            alpha,
            is_default: alpha == default_alpha,
            heldout_accuracy: s.heldout_after.map_or(f64::NAN, |e| e.reward_accuracy),
            heldout_margin: s.heldout_after.map_or(f64::NAN, |e| e.mean_margin),
            final_train_loss: s.final_train_loss,
            min_weight: s.min_weight,
            max_weight: s.max_weight,
            mean_weight: s.mean_weight,
            weights_in_unit_range: s.min_weight >= 0.0 && s.max_weight <= 1.0,
        };
        Ok((row, run))
    })
}

/// Loss curves for existing runs and, given a dataset, a sweep over the
/// configured α grid.
pub fn report_cmd(
    cfg: &RunConfig,
    runs: &[PathBuf],
    data: Option<&Path>,
    out: &Path,
    parallel: bool,
) -> Result<ReportSummary> {
    let started = Instant::now();
    cfg.validate()?;
    ensure!(
        !runs.is_empty() || data.is_some(),
        "report needs --runs and/or --data"
    );
    let mut summary = ReportSummary {
        default_alpha: RunConfig::default_alpha(),
        ..Default::default()
    };
    let mut curves = format!("{LOSS_CURVES_HEADER}\n");
    let mut inputs = Vec::new();

    for dir in runs {
        let found = find_metrics(dir)?;
        ensure!(
            !found.is_empty(),
            "no {METRICS_FILE} under {}",
            dir.display()
        );
        for (label, path) in found {
            let text = fs::read_to_string(&path)?;
            let records =
                read_metrics_csv(&text).with_context(|| format!("in {}", path.display()))?;
            push_curve(&mut curves, &label, &records);
            inputs.push(FileEntry::of(&path)?);
            summary.curves.push(label);
        }
    }

    let mut stage = StagedDir::new(out)?;
    if let Some(data) = data {
        let (pairs, input) = load_pairs(data)?;
        inputs.push(input);
        let sweep = alpha_sweep(cfg, &pairs, parallel)?;
        let mut table = format!("{ALPHA_SWEEP_HEADER}\n");
        for (row, run) in &sweep {
            let label = format!("alpha={}", row.alpha);
            push_curve(&mut curves, &label, &run.outcome.metrics);
            summary.curves.push(label);
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{},{},{}",
                row.alpha,
                row.is_default,
                row.heldout_accuracy,
                row.heldout_margin,
                row.final_train_loss,
                row.min_weight,
                row.max_weight,
                row.mean_weight,
                row.weights_in_unit_range
            );
        }
        summary.alpha_sweep = sweep.into_iter().map(|(row, _)| row).collect();
        stage.write(ALPHA_SWEEP_FILE, table.as_bytes())?;
        let meta = serde_json::json!({
            "default_alpha": summary.default_alpha,
            "grid": cfg.report.alpha_grid,
            "all_weights_in_unit_range": summary.alpha_sweep.iter().all(|r| r.weights_in_unit_range),
        });
        stage.write(
            ALPHA_SWEEP_META_FILE,
            (serde_json::to_string_pretty(&meta)? + "\n").as_bytes(),
        )?;
    }
    stage.write(LOSS_CURVES_FILE, curves.as_bytes())?;
    stage.commit(manifest("report", cfg, inputs, started, &summary)?)?;
    Ok(summary)
}
