//! Mean-pooled conditional language model with exact manual gradients.
//!
//! For a response `t_0 .. t_{n-1}` conditioned on context features `x`:
//!
//! ```text
//! h_j      = x P + mean(E[t_0], .., E[t_{j-1}])     (h_0 = x P)
//! logits_j = h_j W
//! lp_j     = logits_j[t_j] - logsumexp(logits_j)
//! ```
//!
//! with token embeddings `E` (V x D), context projection `P` (C x D) and
//! output weights `W` (D x V). All arithmetic is `f64`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AspoError, Result};
use crate::scoring::FeatureVector;

/// Initialization range: entries are uniform in `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 0.1;
pub const MAX_VOCAB: usize = 256;
pub const MAX_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub context_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.vocab_size > MAX_VOCAB {
            return invalid(format!("vocab_size must be in 2..={MAX_VOCAB}"));
        }
        if self.hidden_dim == 0 || self.hidden_dim > MAX_HIDDEN {
            return invalid(format!("hidden_dim must be in 1..={MAX_HIDDEN}"));
        }
        if self.context_dim == 0 {
            return invalid("context_dim must be positive");
        }
        Ok(())
    }
}

/// Model parameters, also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmParams {
    pub dims: ModelDims,
    pub seed: u64,
    /// V x D, row-major.
    pub token_embeddings: Vec<f64>,
    /// C x D, row-major.
    pub context_projection: Vec<f64>,
    /// D x V, row-major.
    pub output_weights: Vec<f64>,
}

/// Per-token conditional log-probabilities.
pub type LogProbSeq = Vec<f64>;

impl ToyLmParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            vocab_size: v,
            hidden_dim: d,
            context_dim: c,
        } = dims;
        ToyLmParams {
            dims,
            seed: 0,
            token_embeddings: vec![0.0; v * d],
            context_projection: vec![0.0; c * d],
            output_weights: vec![0.0; d * v],
        }
    }

    /// Seeded uniform initialization in `[-0.1, 0.1]`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ToyLmParams::zeros(dims);
        p.seed = seed;
        for x in p.blocks_mut() {
            for v in x.iter_mut() {
                *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = ToyLmParams::zeros(self.dims);
        z.seed = self.seed;
        z
    }

    pub fn num_params(&self) -> usize {
        self.token_embeddings.len() + self.context_projection.len() + self.output_weights.len()
    }

    pub fn blocks(&self) -> [&Vec<f64>; 3] {
        [
            &self.token_embeddings,
            &self.context_projection,
            &self.output_weights,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [
            &mut self.token_embeddings,
            &mut self.context_projection,
            &mut self.output_weights,
        ]
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ToyLmParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, context: &FeatureVector, tokens: &[u32]) -> Result<()> {
        if context.dim() != self.dims.context_dim {
            return invalid(format!(
                "context has dimension {}, model expects {}",
                context.dim(),
                self.dims.context_dim
            ));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.dims.vocab_size) {
            return invalid(format!(
                "token id {t} out of vocabulary of size {}",
                self.dims.vocab_size
            ));
        }
        Ok(())
    }

    fn project_context(&self, context: &FeatureVector) -> Vec<f64> {
        let d = self.dims.hidden_dim;
        let mut h = vec![0.0; d];
        for (c, &x) in context.as_slice().iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.context_projection[c * d..(c + 1) * d];
            for (hk, pk) in h.iter_mut().zip(row) {
                *hk += x * pk;
            }
        }
        h
    }

    fn logits(&self, h: &[f64], out: &mut [f64]) {
        let v = self.dims.vocab_size;
        out.fill(0.0);
        for (k, &hk) in h.iter().enumerate() {
            let row = &self.output_weights[k * v..(k + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += hk * w;
            }
        }
    }

    /// Hidden states `h_0 .. h_{n-1}` for a token sequence.
    fn hidden_states(&self, context: &FeatureVector, tokens: &[u32]) -> Vec<Vec<f64>> {
        let d = self.dims.hidden_dim;
        let base = self.project_context(context);
        let mut sum = vec![0.0; d];
        let mut out = Vec::with_capacity(tokens.len());
        for (j, &t) in tokens.iter().enumerate() {
            let h: Vec<f64> = if j == 0 {
                base.clone()
            } else {
                let inv = 1.0 / j as f64;
                base.iter().zip(&sum).map(|(b, s)| b + s * inv).collect()
            };
            out.push(h);
            let e = &self.token_embeddings[t as usize * d..(t as usize + 1) * d];
            for (s, ek) in sum.iter_mut().zip(e) {
                *s += ek;
            }
        }
        out
    }

    /// Full next-token log-distribution after `prefix`.
    pub fn next_token_logprobs(&self, context: &FeatureVector, prefix: &[u32]) -> Result<Vec<f64>> {
        self.check_inputs(context, prefix)?;
        let d = self.dims.hidden_dim;
        let mut h = self.project_context(context);
        if !prefix.is_empty() {
            let inv = 1.0 / prefix.len() as f64;
            for &t in prefix {
                let e = &self.token_embeddings[t as usize * d..(t as usize + 1) * d];
                for (hk, ek) in h.iter_mut().zip(e) {
                    *hk += ek * inv;
                }
            }
        }
        let mut logits = vec![0.0; self.dims.vocab_size];
        self.logits(&h, &mut logits);
        let lse = log_sum_exp(&logits);
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }

    /// Conditional log-probability of every token given the context and its
    /// predecessors.
    pub fn forward_logprobs(&self, context: &FeatureVector, tokens: &[u32]) -> Result<LogProbSeq> {
        self.check_inputs(context, tokens)?;
        let hs = self.hidden_states(context, tokens);
        let mut logits = vec![0.0; self.dims.vocab_size];
        Ok(hs
            .iter()
            .zip(tokens)
            .map(|(h, &t)| {
                self.logits(h, &mut logits);
                // clamp: rounding can push a near-certain logprob above 0.
                // NaN must survive so the trainer can report divergence.
                let lp = logits[t as usize] - log_sum_exp(&logits);
                if lp > 0.0 {
                    0.0
                } else {
                    lp
                }
            })
            .collect())
    }

    /// Accumulate into `grad` the gradient of `sum_j per_token_grad[j] * lp_j`.
    pub fn backward_into(
        &self,
        context: &FeatureVector,
        tokens: &[u32],
        per_token_grad: &[f64],
        grad: &mut ToyLmParams,
    ) -> Result<()> {
        self.check_inputs(context, tokens)?;
        if per_token_grad.len() != tokens.len() {
            return invalid(format!(
                "{} gradients for {} tokens",
                per_token_grad.len(),
                tokens.len()
            ));
        }
        if grad.dims != self.dims {
            return invalid("gradient buffer has different dimensions");
        }
        let ModelDims {
            vocab_size: v,
            hidden_dim: d,
            ..
        } = self.dims;
        let hs = self.hidden_states(context, tokens);
        let mut logits = vec![0.0; v];
        let mut d_h_total = vec![0.0; d];
        // d/dsum_{<j} of h_j is 1/j; accumulate the suffix sum of dh_j / j
        // so every embedding gets its total in one backward sweep.
        let mut d_hidden: Vec<Vec<f64>> = Vec::with_capacity(tokens.len());

        for (j, (h, &t)) in hs.iter().zip(tokens).enumerate() {
            let g = per_token_grad[j];
            if g == 0.0 {
                d_hidden.push(vec![0.0; d]);
                continue;
            }
            self.logits(h, &mut logits);
            let lse = log_sum_exp(&logits);
            // dlp/dlogits = onehot(t) - softmax
            let dlogits: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| g * ((i == t as usize) as u8 as f64 - (l - lse).exp()))
                .collect();
            let mut dh = vec![0.0; d];
            for k in 0..d {
                let wrow = &self.output_weights[k * v..(k + 1) * v];
                let grow = &mut grad.output_weights[k * v..(k + 1) * v];
                let hk = h[k];
                let mut acc = 0.0;
                for ((gw, w), dl) in grow.iter_mut().zip(wrow).zip(&dlogits) {
                    *gw += hk * dl;
                    acc += w * dl;
                }
                dh[k] = acc;
            }
            for (t, x) in d_h_total.iter_mut().zip(&dh) {
                *t += x;
            }
            d_hidden.push(dh);
        }

        for (c, &x) in context.as_slice().iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut grad.context_projection[c * d..(c + 1) * d];
            for (r, dh) in row.iter_mut().zip(&d_h_total) {
                *r += x * dh;
            }
        }

        // Token k feeds every h_j with j > k, each with weight 1/j.
        let mut suffix = vec![0.0; d];
        for k in (0..tokens.len()).rev() {
            let j = k + 1;
            if j < tokens.len() {
                let inv = 1.0 / j as f64;
                for (s, dh) in suffix.iter_mut().zip(&d_hidden[j]) {
                    *s += dh * inv;
                }
            }
            let t = tokens[k] as usize;
            let row = &mut grad.token_embeddings[t * d..(t + 1) * d];
            for (r, s) in row.iter_mut().zip(&suffix) {
                *r += s;
            }
        }
        Ok(())
    }

    /// Gradient of `sum_j per_token_grad[j] * lp_j` with respect to every
    /// parameter.
    pub fn backward(
        &self,
        context: &FeatureVector,
        tokens: &[u32],
        per_token_grad: &[f64],
    ) -> Result<ToyLmParams> {
        let mut g = self.zeros_like();
        self.backward_into(context, tokens, per_token_grad, &mut g)?;
        Ok(g)
    }

    pub fn snapshot_reference(&self) -> ReferenceModel {
        ReferenceModel(Arc::new(self.clone()))
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Frozen, shareable copy of a parameter set.
#[derive(Debug, Clone)]
pub struct ReferenceModel(Arc<ToyLmParams>);

impl ReferenceModel {
    pub fn params(&self) -> &ToyLmParams {
        &self.0
    }
}

impl std::ops::Deref for ReferenceModel {
    type Target = ToyLmParams;

    fn deref(&self) -> &ToyLmParams {
        &self.0
    }
}

// Checkpoint format, version 1. Line-oriented UTF-8 text:
//
//   aspo-toylm 1
//   vocab_size <V>
//   hidden_dim <D>
//   context_dim <C>
//   seed <u64>
//   matrix token_embeddings <V> <D>
//   <V lines of D space-separated values>
//   matrix context_projection <C> <D>
//   <C lines>
//   matrix output_weights <D> <V>
//   <D lines>
//
// Values use Rust's shortest round-trip exponent notation, so a save/load
// cycle is bit-exact.
const MAGIC: &str = "aspo-toylm";
const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ToyLmParams, mut w: W) -> Result<()> {
    let ModelDims {
        vocab_size: v,
        hidden_dim: d,
        context_dim: c,
    } = params.dims;
    writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "vocab_size {v}")?;
    writeln!(w, "hidden_dim {d}")?;
    writeln!(w, "context_dim {c}")?;
    writeln!(w, "seed {}", params.seed)?;
    let blocks = [
        ("token_embeddings", &params.token_embeddings, v, d),
        ("context_projection", &params.context_projection, c, d),
        ("output_weights", &params.output_weights, d, v),
    ];
    for (name, data, rows, cols) in blocks {
        writeln!(w, "matrix {name} {rows} {cols}")?;
        for r in 0..rows {
            let line: Vec<String> = data[r * cols..(r + 1) * cols]
                .iter()
                .map(|x| format!("{x:e}"))
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

fn parse_err<T>(line: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(AspoError::Parse(format!("checkpoint line {line}: {msg}")))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<ToyLmParams> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = || -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(AspoError::Parse("checkpoint truncated".into())),
        }
    };

    let (n, header) = next()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return parse_err(n, "not a toy-lm checkpoint");
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(FORMAT_VERSION)) => {}
        _ => return parse_err(n, format!("unsupported version in {header:?}")),
    }

    let mut field = |key: &str| -> Result<u64> {
        let (n, l) = next()?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return parse_err(n, format!("expected {key}"));
        }
        match it.next().map(str::parse::<u64>) {
            Some(Ok(x)) => Ok(x),
            _ => parse_err(n, format!("bad value for {key}")),
        }
    };
    let dims = ModelDims {
        vocab_size: field("vocab_size")? as usize,
        hidden_dim: field("hidden_dim")? as usize,
        context_dim: field("context_dim")? as usize,
    };
    let seed = field("seed")?;
    dims.validate()?;

    let mut p = ToyLmParams::zeros(dims);
    p.seed = seed;
    let ModelDims {
        vocab_size: v,
        hidden_dim: d,
        context_dim: c,
    } = dims;
    let shapes = [
        ("token_embeddings", v, d),
        ("context_projection", c, d),
        ("output_weights", d, v),
    ];
    for (block, (name, rows, cols)) in p.blocks_mut().into_iter().zip(shapes) {
        let (n, l) = next()?;
        if l.split_whitespace().collect::<Vec<_>>()
            != ["matrix", name, &rows.to_string(), &cols.to_string()]
        {
            return parse_err(
                n,
                format!("expected matrix header for {name} {rows}x{cols}"),
            );
        }
        for r in 0..rows {
            let (n, l) = next()?;
            let vals: Vec<&str> = l.split_whitespace().collect();
            if vals.len() != cols {
                return parse_err(n, format!("expected {cols} values, found {}", vals.len()));
            }
            for (k, s) in vals.iter().enumerate() {
                match s.parse::<f64>() {
                    Ok(x) if x.is_finite() => block[r * cols + k] = x,
                    _ => return parse_err(n, format!("bad number {s:?}")),
                }
            }
        }
    }
    Ok(p)
}
