//! Acceptance suite: nine criteria, one PASS/FAIL line each. Runs without
//! the libtest harness so the lines always reach the terminal.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aspo_cli::commands::{
    self, ABLATION_FILE, ALPHA_SWEEP_FILE, ALPHA_SWEEP_META_FILE, PAIRS_FILE, REFERENCE_FILE,
};
use aspo_cli::config::RunConfig;
use aspo_cli::output::{sha256_hex, Manifest};
use aspo_core::corpus::NOISE_TEMPLATES;
use aspo_core::margin::{pair_outcome, softplus, MarginParams, PairLogprobs, RewardLevel};
use aspo_core::pipeline::read_jsonl;
use aspo_core::scoring::{
    combine_weights, minmax_normalize, sentence_perplexity, sentence_weights,
};
use aspo_core::segmentation::SentenceSpan;
use aspo_core::trainer::{train, train_with_observer, LossMode, TrainingConfig};
use aspo_core::{FeatureVector, HashedBagEmbedder, ModelDims, ToyLmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// ------------------------------------------------------------ instances

/// Contiguous spans covering `0..n` in `k` non-empty pieces.
fn random_spans(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<SentenceSpan> {
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, n - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);
    bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| SentenceSpan {
            index: i,
            char_start: w[0],
            char_end: w[1],
            token_start: w[0],
            token_end: w[1],
        })
        .collect()
}

struct Instance {
    lp: PairLogprobs,
    weights: Vec<f64>,
    beta: f64,
}

fn random_instance(rng: &mut ChaCha8Rng, sentences: Option<usize>) -> Instance {
    let n_c = rng.gen_range(2..=14);
    let k = sentences.unwrap_or_else(|| rng.gen_range(1..=n_c.min(5)));
    let n_r = rng.gen_range(1..=14);
    let mut lps = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-6.0..-0.01)).collect() };
    let lp = PairLogprobs {
        chosen_policy: lps(n_c),
        chosen_reference: lps(n_c),
        chosen_spans: Vec::new(),
        rejected_policy: lps(n_r),
        rejected_reference: lps(n_r),
        rejected_spans: Vec::new(),
    };
    let chosen_spans = random_spans(rng, n_c, k);
    let rejected_spans = vec![SentenceSpan::whole(n_r, n_r)];
    let weights = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
    Instance {
        lp: PairLogprobs {
            chosen_spans,
            rejected_spans,
            ..lp
        },
        weights,
        beta: rng.gen_range(0.05..0.5),
    }
}

/// Unweighted DPO quantities computed from first principles.
struct DpoOracle {
    margin: f64,
    loss: f64,
    coeff: f64,
}

fn dpo_oracle(lp: &PairLogprobs, beta: f64) -> DpoOracle {
    let sum = |p: &[f64], r: &[f64]| p.iter().zip(r).map(|(a, b)| a - b).sum::<f64>();
    let margin = beta
        * (sum(&lp.chosen_policy, &lp.chosen_reference)
            - sum(&lp.rejected_policy, &lp.rejected_reference));
    DpoOracle {
        margin,
        loss: (-margin).exp().ln_1p(),
        // d loss / d chosen logprob; the rejected side has the opposite sign
        coeff: -beta / (1.0 + margin.exp()),
    }
}

fn levels() -> [RewardLevel; 3] {
    [
        RewardLevel::Response,
        RewardLevel::Sentence,
        RewardLevel::Token,
    ]
}

// ------------------------------------------------------------ criterion 1

fn flat(p: &ToyLmParams) -> Vec<f64> {
    p.blocks().iter().flat_map(|b| b.iter().copied()).collect()
}

fn set_flat(p: &mut ToyLmParams, i: usize, v: f64) {
    let mut i = i;
    for b in p.blocks_mut() {
        if i < b.len() {
            b[i] = v;
            return;
        }
        i -= b.len();
    }
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut seed = 0u64;
    while done < 120 {
        seed += 1;
        let dims = ModelDims {
            vocab_size: rng.gen_range(4..12),
            hidden_dim: rng.gen_range(2..7),
            context_dim: rng.gen_range(2..6),
        };
        let reference = ToyLmParams::init(dims, seed).unwrap();
        let mut policy = reference.clone();
        policy.axpy(3.0, &ToyLmParams::init(dims, seed + 10_000).unwrap());
        let ctx = FeatureVector::new(
            (0..dims.context_dim)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let n_c = rng.gen_range(2..10);
        let n_r = rng.gen_range(1..10);
        let chosen: Vec<u32> = (0..n_c)
            .map(|_| rng.gen_range(0..dims.vocab_size as u32))
            .collect();
        let rejected: Vec<u32> = (0..n_r)
            .map(|_| rng.gen_range(0..dims.vocab_size as u32))
            .collect();
        let k = rng.gen_range(1..=n_c.min(4));
        let spans = random_spans(&mut rng, n_c, k);
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let beta = rng.gen_range(0.05..0.5);
        let level = levels()[done % 3];

        let ref_c = reference.forward_logprobs(&ctx, &chosen).unwrap();
        let ref_r = reference.forward_logprobs(&ctx, &rejected).unwrap();
        let pair_at = |p: &ToyLmParams| PairLogprobs {
            chosen_policy: p.forward_logprobs(&ctx, &chosen).unwrap(),
            chosen_reference: ref_c.clone(),
            chosen_spans: spans.clone(),
            rejected_policy: p.forward_logprobs(&ctx, &rejected).unwrap(),
            rejected_reference: ref_r.clone(),
            rejected_spans: vec![SentenceSpan::whole(n_r, n_r)],
        };
        let params = MarginParams::new(beta, level);
        let out = pair_outcome(&pair_at(&policy), &weights, &params).unwrap();
        if out.breakdown.fallback {
            continue;
        }
        let mut analytic = policy.zeros_like();
        policy
            .backward_into(&ctx, &chosen, &out.grad.chosen, &mut analytic)
            .unwrap();
        policy
            .backward_into(&ctx, &rejected, &out.grad.rejected, &mut analytic)
            .unwrap();

        // The scale and weights are constants of the objective, frozen at
        // the current parameters.
        let scale = out.breakdown.scale;
        let token_weight: Vec<f64> = {
            let mean = weights.iter().sum::<f64>() / k as f64;
            let mut w = vec![0.0; n_c];
            for (s, &wi) in spans.iter().zip(&weights) {
                w[s.token_range()].fill(if level == RewardLevel::Response {
                    mean
                } else {
                    wi
                });
            }
            w
        };
        let objective = |p: &ToyLmParams| -> f64 {
            let lp = pair_at(p);
            let chosen: f64 = (0..n_c)
                .map(|t| {
                    (1.0 + token_weight[t]) * beta * (lp.chosen_policy[t] - lp.chosen_reference[t])
                })
                .sum();
            let rejected: f64 = lp
                .rejected_policy
                .iter()
                .zip(&lp.rejected_reference)
                .map(|(a, b)| beta * (a - b))
                .sum();
            softplus(-(scale * chosen - rejected))
        };
        let base = flat(&policy);
        let mut fd = vec![0.0; base.len()];
        let mut probe = policy.clone();
        for (i, g) in fd.iter_mut().enumerate() {
            set_flat(&mut probe, i, base[i] + h);
            let up = objective(&probe);
            set_flat(&mut probe, i, base[i] - h);
            let down = objective(&probe);
            set_flat(&mut probe, i, base[i]);
            *g = (up - down) / (2.0 * h);
        }
        let a = flat(&analytic);
        let mut offset = 0;
        for block in analytic.blocks() {
            let r = offset..offset + block.len();
            offset += block.len();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = a[r.clone()]
                .iter()
                .zip(&fd[r.clone()])
                .map(|(x, y)| x - y)
                .collect();
            let denom = norm(&a[r.clone()]).max(norm(&fd[r])).max(1e-12);
            worst = worst.max(norm(&diff) / denom);
        }
        done += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    check!(worst <= 1e-5, "worst relative error {worst:e}");
    check!(secs < 30.0, "took {secs:.1} s");
    Ok(format!(
        "{done} instances, worst block relative error {worst:.2e}, {secs:.2} s"
    ))
}

// ------------------------------------------------------------ criterion 2

fn forward_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut n, mut worst_margin, mut worst_loss) = (0, 0.0f64, 0.0f64);
    while n < 1500 {
        let inst = random_instance(&mut rng, None);
        let level = levels()[n % 3];
        let out = pair_outcome(
            &inst.lp,
            &inst.weights,
            &MarginParams::new(inst.beta, level),
        )
        .unwrap();
        if out.breakdown.r_c_reweighted.abs() <= 1e-8 {
            continue;
        }
        let b = &out.breakdown;
        let dpo = dpo_oracle(&inst.lp, inst.beta);
        worst_margin =
            worst_margin.max((b.margin_aspo - dpo.margin).abs() / (1.0 + dpo.margin.abs()));
        worst_loss = worst_loss.max((out.loss - dpo.loss).abs());
        n += 1;
    }
    check!(worst_margin <= 1e-9, "margin gap {worst_margin:e}");
    check!(worst_loss <= 1e-9, "loss gap {worst_loss:e}");

    // the same identity for the losses recorded during training
    let cfg = RunConfig {
        corpus: aspo_core::corpus::CorpusConfig {
            num_prompts: 200,
            ..Default::default()
        },
        ..Default::default()
    };
    let pairs = commands::generate(&cfg).unwrap().pairs;
    let tcfg = TrainingConfig {
        learning_rate: 0.5,
        ..Default::default()
    };
    let run = train(
        &pairs,
        &commands::initial_model(&cfg).unwrap(),
        &commands::embedder(&cfg).unwrap(),
        &tcfg,
    )
    .unwrap();
    let recorded = run
        .metrics
        .iter()
        .map(|r| (r.mean_loss - r.mean_dpo_loss).abs())
        .fold(0.0, f64::max);
    check!(recorded <= 1e-9, "recorded loss gap {recorded:e}");
    Ok(format!(
        "{n} instances: max |M*-M|/(1+|M|) {worst_margin:.2e}, max loss gap {worst_loss:.2e}; {} logged steps, max gap {recorded:.2e}",
        run.metrics.len()
    ))
}

// ------------------------------------------------------------ criterion 3

fn degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for i in 0..600 {
        let single = i % 2 == 0;
        let mut inst = random_instance(&mut rng, if single { Some(1) } else { None });
        if !single {
            inst.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        for level in levels() {
            let out = pair_outcome(
                &inst.lp,
                &inst.weights,
                &MarginParams::new(inst.beta, level),
            )
            .unwrap();
            let dpo = dpo_oracle(&inst.lp, inst.beta);
            let mut gap = (out.breakdown.margin_aspo - dpo.margin)
                .abs()
                .max((out.loss - dpo.loss).abs());
            for g in &out.grad.chosen {
                gap = gap.max((g - dpo.coeff).abs());
            }
            for g in &out.grad.rejected {
                gap = gap.max((g + dpo.coeff).abs());
            }
            worst = worst.max(gap);
            cases += 1;
        }
    }
    check!(worst <= 1e-12, "instance gap {worst:e}");

    // whole trajectories: zero weights vs plain DPO
    let cfg = RunConfig {
        corpus: aspo_core::corpus::CorpusConfig {
            num_prompts: 120,
            ..Default::default()
        },
        ..Default::default()
    };
    let pairs = commands::generate(&cfg).unwrap().pairs;
    let init = commands::initial_model(&cfg).unwrap();
    let emb = commands::embedder(&cfg).unwrap();
    let traj = |t: &TrainingConfig| {
        let mut v = Vec::new();
        train_with_observer(&pairs, &init, &emb, t, |_, p| v.push(flat(p))).unwrap();
        v
    };
    let a = traj(&TrainingConfig {
        force_zero_weights: true,
        learning_rate: 0.5,
        ..Default::default()
    });
    let b = traj(&TrainingConfig {
        loss_mode: LossMode::Dpo,
        learning_rate: 0.5,
        ..Default::default()
    });
    let traj_gap = a
        .iter()
        .zip(&b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max);
    check!(traj_gap <= 1e-12, "trajectory gap {traj_gap:e}");
    Ok(format!(
        "{cases} cases, max gap {worst:.2e}; {} steps, trajectory gap {traj_gap:.2e}",
        a.len()
    ))
}

// ------------------------------------------------------------ criterion 4

fn redistribution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut n, mut worst_ratio, mut worst_sum) = (0, 0.0f64, 0.0f64);
    while n < 1000 {
        let inst = random_instance(&mut rng, None);
        let level = if n % 2 == 0 {
            RewardLevel::Sentence
        } else {
            RewardLevel::Token
        };
        let out = pair_outcome(
            &inst.lp,
            &inst.weights,
            &MarginParams::new(inst.beta, level),
        )
        .unwrap();
        let b = &out.breakdown;
        if b.fallback {
            continue;
        }
        let dpo = dpo_oracle(&inst.lp, inst.beta);
        for (span, w) in inst.lp.chosen_spans.iter().zip(&inst.weights) {
            let expected = b.scale * (1.0 + w);
            for t in span.token_range() {
                worst_ratio = worst_ratio.max((out.grad.chosen[t] / dpo.coeff - expected).abs());
            }
        }
        let rebuilt: f64 = b
            .chosen_sentence_rewards
            .iter()
            .zip(&inst.weights)
            .map(|(r, w)| b.scale * (1.0 + w) * r)
            .sum();
        worst_sum = worst_sum.max((rebuilt - b.r_c_original).abs());
        n += 1;
    }
    check!(worst_ratio <= 1e-9, "ratio gap {worst_ratio:e}");
    check!(worst_sum <= 1e-9, "conservation gap {worst_sum:e}");
    Ok(format!(
        "{n} instances: max ratio gap {worst_ratio:.2e}, max conservation gap {worst_sum:.2e}"
    ))
}

// ------------------------------------------------------------ criterion 5

fn scoring_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ppl_gap: f64 = 0.0;
    for v in [3usize, 7, 50, 200] {
        let uniform = ToyLmParams::zeros(ModelDims {
            vocab_size: v,
            hidden_dim: 4,
            context_dim: 3,
        });
        let ctx = FeatureVector::new(vec![0.3, -1.0, 2.0]).unwrap();
        let toks: Vec<u32> = (0..9).map(|_| rng.gen_range(0..v as u32)).collect();
        let lp = uniform.forward_logprobs(&ctx, &toks).unwrap();
        for p in sentence_perplexity(&lp, &random_spans(&mut rng, 9, 3)).unwrap() {
            ppl_gap = ppl_gap.max((p - v as f64).abs());
        }
    }
    check!(ppl_gap <= 1e-9, "uniform perplexity gap {ppl_gap:e}");

    for _ in 0..500 {
        let n = rng.gen_range(2..10);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let ys = minmax_normalize(&xs).unwrap();
        check!(
            ys.iter().all(|y| (0.0..=1.0).contains(y)),
            "min-max out of range: {ys:?}"
        );
        let (imin, imax) = (argmin(&xs), argmax(&xs));
        check!(
            ys[imin] == 0.0 && ys[imax] == 1.0,
            "min-max endpoints: {ys:?}"
        );
    }

    let emb = HashedBagEmbedder::new(16, 0).unwrap();
    let vocab = aspo_core::corpus::corpus_vocabulary();
    let text = vocab.tokenize("there is a cat in the picture.");
    let spans = text.sentence_spans().unwrap();
    check!(spans.len() == 1, "expected one sentence");
    let image = FeatureVector::new((0..16).map(|i| i as f64 - 7.5).collect()).unwrap();
    let lp: Vec<f64> = (0..text.len()).map(|_| rng.gen_range(-4.0..0.0)).collect();
    for alpha in [0.0, 0.3, 0.5, 1.0] {
        let w = sentence_weights(&emb, &image, &text, &spans, &lp, alpha).unwrap();
        check!(
            w.weight == vec![0.0],
            "single-sentence weight {:?}",
            w.weight
        );
    }

    let mut comb_gap: f64 = 0.0;
    for i in 0..=100 {
        let alpha = i as f64 / 100.0;
        let s: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..=1.0)).collect();
        for ((w, a), b) in combine_weights(&s, &p, alpha)
            .unwrap()
            .iter()
            .zip(&s)
            .zip(&p)
        {
            comb_gap = comb_gap.max((w - (alpha * a + (1.0 - alpha) * b)).abs());
        }
    }
    check!(comb_gap <= 1e-12, "combine gap {comb_gap:e}");
    Ok(format!("uniform PPL gap {ppl_gap:.2e}; min-max endpoints exact; single-sentence weight 0; combine gap {comb_gap:.2e}"))
}

fn argmin(xs: &[f64]) -> usize {
    (0..xs.len())
        .min_by(|&a, &b| xs[a].total_cmp(&xs[b]))
        .unwrap()
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len())
        .max_by(|&a, &b| xs[a].total_cmp(&xs[b]))
        .unwrap()
}

// ------------------------------------------------------------ criterion 6

fn aspo(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aspo"))
        .args(args)
        .current_dir(dir)
        .env("ASPO_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn pipeline_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for out in ["a", "b"] {
        let o = aspo(&["gen-data", "--seed", "7", "--out", out], dir);
        check!(
            o.status.success(),
            "gen-data failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let a = std::fs::read(dir.join("a").join(PAIRS_FILE)).unwrap();
    let b = std::fs::read(dir.join("b").join(PAIRS_FILE)).unwrap();
    check!(!a.is_empty() && a == b, "JSONL differs between reruns");
    let (ma, mb) = (
        Manifest::read(&dir.join("a")).unwrap(),
        Manifest::read(&dir.join("b")).unwrap(),
    );
    check!(ma.outputs == mb.outputs, "manifest checksums differ");
    check!(
        ma.outputs[0].sha256 == sha256_hex(&a),
        "manifest checksum does not match file"
    );

    let pairs = read_jsonl(&a[..]).unwrap();
    let same = pairs
        .iter()
        .filter(|p| p.chosen.text == p.rejected.text)
        .count();
    check!(same == 0, "{same} kept pairs have identical texts");

    let o = aspo(
        &[
            "gen-data",
            "--seed",
            "7",
            "--noise-step",
            "0",
            "--out",
            "zero",
        ],
        dir,
    );
    check!(o.status.success(), "t = 0 run failed");
    let zero = Manifest::read(&dir.join("zero")).unwrap();
    let kept = zero.summary["kept"].as_u64().unwrap();
    let filtered = zero.summary["filtered"].as_u64().unwrap();
    let warned = String::from_utf8_lossy(&o.stderr).contains("filtered");
    check!(
        kept == 0 && filtered == zero.summary["prompts"].as_u64().unwrap(),
        "t = 0 kept {kept}"
    );
    check!(warned, "no warning at t = 0");
    check!(
        std::fs::read(dir.join("zero").join(PAIRS_FILE))
            .unwrap()
            .is_empty(),
        "t = 0 dataset not empty"
    );

    let bad = aspo(&["train", "--data", "missing.jsonl", "--out", "x"], dir);
    check!(
        !bad.status.success() && !dir.join("x").exists(),
        "failing command must exit nonzero and leave no output"
    );
    Ok(format!(
        "{} pairs, byte-identical reruns (sha256 {}…), 0 identical texts kept, t = 0 filtered {filtered}/{filtered}",
        pairs.len(),
        &ma.outputs[0].sha256[..12]
    ))
}

// ------------------------------------------------------------ criterion 7

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    check!(
        cfg.training.reward_level == RewardLevel::Sentence
            && cfg.training.beta == 0.1
            && cfg.training.alpha == 0.5
            && cfg.training.epochs == 1,
        "defaults drifted"
    );
    let data = tmp.path().join("data");
    let gen = commands::gen_data(&cfg, &data).unwrap();
    let (pairs, _) = commands::load_pairs(&data).unwrap();
    let planted = pairs
        .iter()
        .filter(|p| {
            NOISE_TEMPLATES
                .iter()
                .any(|t| p.chosen.text.contains(t.split("{}").next().unwrap().trim()))
        })
        .count();
    check!(gen.kept >= 500, "only {} pairs", gen.kept);
    check!(
        planted > 0,
        "no planted noisy sentences in chosen responses"
    );

    let aspo = commands::train_cmd(&cfg, &data, &tmp.path().join("aspo")).unwrap();
    let mut dpo_cfg = cfg.clone();
    dpo_cfg.training.loss_mode = LossMode::Dpo;
    let dpo = commands::train_cmd(&dpo_cfg, &data, &tmp.path().join("dpo")).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let before = aspo.heldout_before.unwrap().reward_accuracy;
    let after = aspo.heldout_after.unwrap().reward_accuracy;
    let dpo_after = dpo.heldout_after.unwrap().reward_accuracy;
    check!(before == 0.0, "step-0 accuracy {before}");
    check!(after >= 0.85, "held-out accuracy {after}");
    check!(after >= dpo_after - 0.02, "ASPO {after} vs DPO {dpo_after}");
    check!(secs < 300.0, "took {secs:.1} s");
    Ok(format!(
        "{} pairs ({planted} chosen with planted sentences), held-out {} pairs: accuracy {before} -> {after:.4} (DPO {dpo_after:.4}), {secs:.1} s",
        gen.kept,
        aspo.heldout_pairs
    ))
}

// ------------------------------------------------------------ criterion 8

fn ablation() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let data = tmp.path().join("data");
    commands::gen_data(&cfg, &data).unwrap();
    let out = tmp.path().join("ablate");
    let rows = commands::ablate_cmd(&cfg, &data, &out, true).unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    check!(
        modes == ["dpo", "aspo-response", "aspo-sentence", "aspo-token"],
        "modes {modes:?}"
    );
    let table = std::fs::read_to_string(out.join(ABLATION_FILE)).unwrap();
    check!(
        table.lines().count() == 5,
        "table has {} lines",
        table.lines().count()
    );

    let inits: Vec<Vec<u8>> = modes
        .iter()
        .map(|m| std::fs::read(out.join(m).join(REFERENCE_FILE)).unwrap())
        .collect();
    check!(
        inits.windows(2).all(|w| w[0] == w[1]),
        "step-0 checkpoints differ"
    );

    let response = &rows[1];
    check!(
        response.max_margin_gap <= 1e-9,
        "response-level margin gap {:e}",
        response.max_margin_gap
    );
    for r in &rows {
        check!(
            r.heldout_accuracy.is_finite() && r.final_train_loss.is_finite(),
            "{} did not finish",
            r.mode
        );
    }
    let report: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.4}", r.mode, r.heldout_accuracy))
        .collect();
    Ok(format!(
        "identical inits; response margin gap {:.1e}; held-out accuracy {}",
        response.max_margin_gap,
        report.join(", ")
    ))
}

// ------------------------------------------------------------ criterion 9

fn alpha_report() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let data = tmp.path().join("data");
    commands::gen_data(&cfg, &data).unwrap();
    let run = tmp.path().join("run");
    commands::train_cmd(&cfg, &data, &run).unwrap();
    let out = tmp.path().join("report");
    let summary = commands::report_cmd(&cfg, &[run], Some(&data), &out, true).unwrap();

    let table = std::fs::read_to_string(out.join(ALPHA_SWEEP_FILE)).unwrap();
    check!(
        table.lines().count() == 6,
        "sweep table has {} lines",
        table.lines().count()
    );
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(ALPHA_SWEEP_META_FILE)).unwrap())
            .unwrap();
    check!(meta["default_alpha"] == 0.5, "metadata {meta}");
    let alphas: Vec<f64> = summary.alpha_sweep.iter().map(|r| r.alpha).collect();
    check!(alphas == [0.0, 0.25, 0.5, 0.75, 1.0], "grid {alphas:?}");
    let defaults: Vec<f64> = summary
        .alpha_sweep
        .iter()
        .filter(|r| r.is_default)
        .map(|r| r.alpha)
        .collect();
    check!(defaults == [0.5], "default rows {defaults:?}");
    for r in &summary.alpha_sweep {
        check!(
            0.0 <= r.min_weight
                && r.min_weight <= r.mean_weight
                && r.mean_weight <= r.max_weight
                && r.max_weight <= 1.0,
            "alpha {}: weights {} / {} / {}",
            r.alpha,
            r.min_weight,
            r.mean_weight,
            r.max_weight
        );
    }
    check!(
        summary.curves.first().map(String::as_str) == Some("run"),
        "single run should give one series"
    );
    let accs: Vec<String> = summary
        .alpha_sweep
        .iter()
        .map(|r| format!("{}:{:.3}", r.alpha, r.heldout_accuracy))
        .collect();
    Ok(format!(
        "5 rows, default 0.5 flagged, weights within [0,1]; accuracy {}",
        accs.join(" ")
    ))
}

// ------------------------------------------------------------ driver

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_check),
        ("forward-value identity", forward_identity),
        ("degeneracy", degeneracy),
        ("gradient redistribution", redistribution),
        ("scoring exactness", scoring_exactness),
        ("pipeline determinism and filtering", pipeline_determinism),
        ("end-to-end training", end_to_end),
        ("ablation harness", ablation),
        ("alpha-sweep report", alpha_report),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {} ({name})", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{label}: PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("{label}: FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
