//! Causal token model mapping source sequences to layer-1 semantic tokens.
//!
//! Training samples are laid out as `BOS src… SEP tgt… EOS`; by default the
//! loss covers only the tokens after `SEP`.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SeqLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::nn::{NetConfig, SeqCtx, Trunk};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamLayout;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
const NUM_SPECIALS: u32 = 3;

/// Id assignment for a source vocabulary and a target (layer-1 code) vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub source_size: u32,
    pub target_size: u32,
}

impl VocabLayout {
    pub fn new(source_size: u32, target_size: u32) -> Self {
        VocabLayout {
            source_size,
            target_size,
        }
    }

    pub fn size(&self) -> usize {
        (NUM_SPECIALS + self.source_size + self.target_size) as usize
    }

    pub fn source(&self, id: u32) -> u32 {
        debug_assert!(id < self.source_size);
        NUM_SPECIALS + id
    }

    pub fn target(&self, id: u32) -> u32 {
        debug_assert!(id < self.target_size);
        NUM_SPECIALS + self.source_size + id
    }

    /// Inverse of [`target`](Self::target).
    pub fn target_of(&self, token: u32) -> Option<u32> {
        let base = NUM_SPECIALS + self.source_size;
        (token >= base && token < base + self.target_size).then(|| token - base)
    }

    /// `BOS src SEP`
    pub fn prefix(&self, src: &[u32]) -> Vec<u32> {
        let mut t = Vec::with_capacity(src.len() + 2);
        t.push(BOS);
        t.extend(src.iter().map(|&s| self.source(s)));
        t.push(SEP);
        t
    }

    /// `BOS src SEP tgt EOS` with the loss starting after `SEP`.
    pub fn sample(&self, src: &[u32], tgt: &[u32]) -> TokenSample {
        let mut tokens = self.prefix(src);
        let loss_from = tokens.len();
        tokens.extend(tgt.iter().map(|&t| self.target(t)));
        tokens.push(EOS);
        TokenSample { tokens, loss_from }
    }

    /// Target ids generated after `SEP`, up to `EOS`; other tokens are skipped.
    pub fn decode_targets(&self, generated: &[u32]) -> Vec<u32> {
        let start = generated.iter().position(|&t| t == SEP).map_or(0, |p| p + 1);
        generated[start..]
            .iter()
            .take_while(|&&t| t != EOS)
            .filter_map(|&t| self.target_of(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// Generation stops after emitting this id.
    pub eos_id: Option<u32>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 32,
            layers: 2,
            hidden_dim: 64,
            ffn_dim: 256,
            heads: 4,
            max_seq_len: 128,
            eos_id: Some(EOS),
        }
    }
}

impl LmConfig {
    /// Trunk settings: causal attention only, no convolution.
    pub fn net(&self) -> NetConfig {
        NetConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            use_conv_block: false,
            conv_kernel: 1,
            time_embed_dim: 2,
            use_rotary: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_seq_len < 2 {
            return Err(Error::InvalidConfig(
                "vocab_size must be ≥ 1 and max_seq_len ≥ 2".into(),
            ));
        }
        if let Some(e) = self.eos_id {
            if e as usize >= self.vocab_size {
                return Err(Error::InvalidConfig(format!("eos id {e} outside vocab")));
            }
        }
        self.net().validate()
    }
}

/// Token ids `d_1..d_n`; positions `≥ loss_from` are scored (position 0 never is).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSample {
    pub tokens: Vec<u32>,
    pub loss_from: usize,
}

impl TokenSample {
    pub fn full(tokens: Vec<u32>) -> Self {
        TokenSample {
            tokens,
            loss_from: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn scored(&self) -> std::ops::Range<usize> {
        self.loss_from.max(1)..self.tokens.len()
    }
}

#[derive(Clone, Debug)]
pub struct SemanticLM {
    config: LmConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    emb: usize,
    head_w: usize,
    head_b: usize,
    trunk: Trunk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

fn build_layout(cfg: &LmConfig) -> (ParamLayout, usize, usize, usize, Trunk) {
    let h = cfg.hidden_dim;
    let mut l = ParamLayout::new();
    let emb = l.weight("tok_emb", cfg.vocab_size, h);
    let trunk = Trunk::register(&mut l, &cfg.net());
    let head_w = l.weight("head.w", h, cfg.vocab_size);
    let head_b = l.bias("head.b", cfg.vocab_size);
    (l, emb, head_w, head_b, trunk)
}

impl SemanticLM {
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, ..) = build_layout(config);
        let params = layout.init(seed);
        Self::from_params(config, params)
    }

    pub fn from_params(config: &LmConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, emb, head_w, head_b, trunk) = build_layout(config);
        if params.len() != layout.total() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            )));
        }
        layout.check_finite(&params, "parameters")?;
        Ok(SemanticLM {
            config: config.clone(),
            layout,
            params,
            emb,
            head_w,
            head_b,
            trunk,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_slice(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let s = self
            .layout
            .slice(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter slice `{name}`")))?;
        if values.len() != s.len() {
            return Err(Error::DimensionMismatch(format!("slice `{name}` length")));
        }
        self.params[s.range()].copy_from_slice(values);
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token {bad} ≥ vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn logits_graph(&self, tape: &mut Tape, vars: &[Var], seqs: &[&[u32]]) -> Var {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let layout = Rc::new(SeqLayout::from_lengths(&lengths));
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let x = tape.rows(vars[self.emb], &ids);
        let ctx = SeqCtx {
            layout,
            causal: true,
            rotary_offset: 0,
        };
        let h = self.trunk.forward(tape, vars, x, &ctx);
        tape.linear(h, vars[self.head_w], vars[self.head_b])
    }

    /// `n×V` next-token logits; row `i` predicts token `i+1`.
    pub fn logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let vars = self.layout.bind(&mut tape, &self.params);
        let out = self.logits_graph(&mut tape, &vars, &[tokens]);
        Ok(tape.value(out).clone())
    }

    fn loss_graph(&self, tape: &mut Tape, samples: &[TokenSample]) -> Result<(Vec<Var>, Var)> {
        if samples.is_empty() {
            return Err(Error::Empty("lm samples".into()));
        }
        let mut count = 0usize;
        for s in samples {
            self.check_tokens(&s.tokens)?;
            count += s.scored().len();
        }
        if count == 0 {
            return Err(Error::Empty("no scored positions".into()));
        }
        let vars = self.layout.bind(tape, &self.params);
        let seqs: Vec<&[u32]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        let logits = self.logits_graph(tape, &vars, &seqs);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let w = 1.0 / count as f64;
        for s in samples {
            let scored = s.scored();
            for i in 0..s.len() {
                let next = i + 1;
                if scored.contains(&next) {
                    targets.push(s.tokens[next] as usize);
                    weights.push(w);
                } else {
                    targets.push(0);
                    weights.push(0.0);
                }
            }
        }
        let loss = tape.cross_entropy(logits, &targets, weights);
        Ok((vars, loss))
    }

    /// Mean negative log-likelihood per scored token.
    pub fn lm_loss(&self, samples: &[TokenSample]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.loss_graph(&mut tape, samples)?;
        Ok(tape.scalar(loss))
    }

    pub fn loss_and_grad(&self, samples: &[TokenSample]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (vars, loss) = self.loss_graph(&mut tape, samples)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("lm loss".into()));
        }
        let grads = tape.backward(loss);
        let flat = self.layout.gather(&grads, &vars);
        self.layout.check_finite(&flat, "gradient")?;
        Ok((value, flat))
    }

    pub fn grad_check(
        &self,
        samples: &[TokenSample],
        epsilon: f64,
        per_slice: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, analytic) = self.loss_and_grad(samples)?;
        let mut probe = self.clone();
        Ok(gradcheck::check(
            &self.layout,
            &self.params,
            &analytic,
            |p| {
                probe.params.copy_from_slice(p);
                probe.lm_loss(samples).unwrap_or(f64::NAN)
            },
            epsilon,
            per_slice,
            seed,
        ))
    }

    pub fn train_step(
        &mut self,
        samples: &[TokenSample],
        state: &mut AdamState,
        adam: &AdamConfig,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(samples)?;
        state.update(&mut self.params, &grads, adam)?;
        Ok(loss)
    }

    /// Fraction of scored positions whose argmax equals the next token.
    pub fn teacher_forcing_accuracy(&self, samples: &[TokenSample]) -> Result<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for s in samples {
            let logits = self.logits(&s.tokens)?;
            for next in s.scored() {
                total += 1;
                if argmax(logits.row(next - 1).iter().copied()) == s.tokens[next] as usize {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::Empty("no scored positions".into()));
        }
        Ok(hit as f64 / total as f64)
    }

    /// Autoregressive continuation of `prefix`; stops at EOS, after `max_new`
    /// tokens, or at `max_seq_len`. Returns prefix plus generated tokens.
    pub fn generate(
        &self,
        prefix: &[u32],
        max_new: usize,
        sampling: Sampling,
        seed: u64,
    ) -> Result<Vec<u32>> {
        self.check_tokens(prefix)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = prefix.to_vec();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.logits(&tokens)?;
            let last: Vec<f64> = logits.row(logits.nrows() - 1).to_vec();
            let next = pick(&last, sampling, &mut rng)? as u32;
            tokens.push(next);
            if Some(next) == self.config.eos_id {
                break;
            }
        }
        Ok(tokens)
    }
}

impl SemanticLM {
    /// Generates exactly `n` target codes after `BOS src SEP`, choosing only
    /// among target ids at every position.
    pub fn generate_targets(
        &self,
        vocab: &VocabLayout,
        src: &[u32],
        n: usize,
        sampling: Sampling,
        seed: u64,
    ) -> Result<Vec<u32>> {
        if vocab.size() != self.config.vocab_size {
            return Err(Error::DimensionMismatch(format!(
                "vocab layout of {} ids for a model of {}",
                vocab.size(),
                self.config.vocab_size
            )));
        }
        if src.iter().any(|&s| s >= vocab.source_size) {
            return Err(Error::OutOfRange("source id".into()));
        }
        let mut tokens = vocab.prefix(src);
        if tokens.len() + n > self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                len: tokens.len() + n,
                max: self.config.max_seq_len,
            });
        }
        let allowed: Vec<usize> = (0..vocab.target_size).map(|t| vocab.target(t) as usize).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let logits = self.logits(&tokens)?;
            let last: Vec<f64> = logits.row(logits.nrows() - 1).to_vec();
            let sub: Vec<f64> = allowed.iter().map(|&i| last[i]).collect();
            let j = pick(&sub, sampling, &mut rng)?;
            out.push(j as u32);
            tokens.push(allowed[j] as u32);
        }
        Ok(out)
    }
}

/// Lowest index of the maximum.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature` restricted to `allowed` indices, sampled once.
pub(crate) fn sample_tempered(
    logits: &[f64],
    allowed: &[usize],
    temperature: f64,
    rng: &mut impl Rng,
) -> usize {
    let mx = allowed
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = allowed
        .iter()
        .map(|&i| ((logits[i] - mx) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (j, &wi) in w.iter().enumerate() {
        if u < wi {
            return allowed[j];
        }
        u -= wi;
    }
    *allowed.last().expect("non-empty")
}

fn pick(logits: &[f64], sampling: Sampling, rng: &mut impl Rng) -> Result<usize> {
    match sampling {
        Sampling::Greedy => Ok(argmax(logits.iter().copied())),
        Sampling::Temperature(tau) => {
            if !(tau > 0.0) {
                return Err(Error::InvalidArgument("temperature must be > 0".into()));
            }
            let all: Vec<usize> = (0..logits.len()).collect();
            Ok(sample_tempered(logits, &all, tau, rng))
        }
        Sampling::TopK { k, temperature } => {
            if k == 0 || !(temperature > 0.0) {
                return Err(Error::InvalidArgument("top-k needs k ≥ 1 and temperature > 0".into()));
            }
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k.min(logits.len()));
            Ok(sample_tempered(logits, &idx, temperature, rng))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

/// Minibatch Adam training; returns the per-step loss curve.
pub fn train(
    model: &mut SemanticLM,
    dataset: &[TokenSample],
    cfg: &LmTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Empty("lm training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(model.param_count());
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<TokenSample> = (0..cfg.batch_size)
            .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
            .collect();
        curve.push(model.train_step(&batch, &mut state, &cfg.adam)?);
    }
    Ok(curve)
}

/// Row-wise log-softmax, used by tests and oracles.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
