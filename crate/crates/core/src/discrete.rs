//! Masked-token baseline for the perceptual layers.
//!
//! Layer 1 of a token stack is the condition; layers `2..=Q` are predicted one
//! at a time. Prompt frames expose every layer. On target frames the input for
//! layer `ℓ` is the sum of embeddings of layers below `ℓ` plus the (partially
//! masked) embedding of layer `ℓ`; layers above `ℓ` are absent.

use std::rc::Rc;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, SeqLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::nn::{NetConfig, SeqCtx, Trunk};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamLayout;
use crate::rvq::TokenStack;
use crate::semantic_ar::{argmax, sample_tempered};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscreteConfig {
    pub net: NetConfig,
    /// Layers in the stack, including the conditioning layer 1.
    pub num_layers: usize,
    pub codebook_size: usize,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        DiscreteConfig {
            net: NetConfig::default(),
            num_layers: 4,
            codebook_size: 16,
        }
    }
}

impl DiscreteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_layers {} < 2: nothing to predict",
                self.num_layers
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::InvalidConfig("codebook_size must be ≥ 1".into()));
        }
        self.net.validate()
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteModel {
    config: DiscreteConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    /// Per stack layer, `(K+1)×h`; row `K` is the mask token.
    emb: Vec<usize>,
    layer_emb: usize,
    /// Per predicted layer `2..=Q`: `(w, b)`.
    heads: Vec<(usize, usize)>,
    trunk: Trunk,
}

fn build_layout(cfg: &DiscreteConfig) -> (ParamLayout, Vec<usize>, usize, Vec<(usize, usize)>, Trunk) {
    let h = cfg.net.hidden_dim;
    let k = cfg.codebook_size;
    let mut l = ParamLayout::new();
    let emb = (1..=cfg.num_layers)
        .map(|i| l.weight(format!("emb{i}"), k + 1, h))
        .collect();
    let layer_emb = l.weight("layer_emb", cfg.num_layers - 1, h);
    let trunk = Trunk::register(&mut l, &cfg.net);
    let heads = (2..=cfg.num_layers)
        .map(|i| (l.weight(format!("head{i}.w"), h, k), l.bias(format!("head{i}.b"), k)))
        .collect();
    (l, emb, layer_emb, heads, trunk)
}

/// One training instance: predict the masked target frames of `layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteItem {
    pub stack: TokenStack,
    pub prompt_len: usize,
    pub layer: usize,
    pub masked: Vec<bool>,
}

impl DiscreteItem {
    fn validate(&self, cfg: &DiscreteConfig) -> Result<()> {
        if self.stack.num_layers() != cfg.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "stack has {} layers, model {}",
                self.stack.num_layers(),
                cfg.num_layers
            )));
        }
        if self.layer < 2 || self.layer > cfg.num_layers {
            return Err(Error::OutOfRange(format!("target layer {}", self.layer)));
        }
        let n = self.stack.len();
        if self.masked.len() != n || self.prompt_len >= n {
            return Err(Error::DimensionMismatch("mask/prompt vs stack length".into()));
        }
        if self.masked[..self.prompt_len].iter().any(|&m| m) {
            return Err(Error::InvalidArgument("prompt frames cannot be masked".into()));
        }
        if let Some(bad) = self
            .stack
            .layers()
            .iter()
            .flatten()
            .find(|&&id| id as usize >= cfg.codebook_size)
        {
            return Err(Error::OutOfRange(format!("token {bad}")));
        }
        Ok(())
    }
}

impl DiscreteModel {
    pub fn init(config: &DiscreteConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, ..) = build_layout(config);
        let params = layout.init(seed);
        Self::from_params(config, params)
    }

    pub fn from_params(config: &DiscreteConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, emb, layer_emb, heads, trunk) = build_layout(config);
        if params.len() != layout.total() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            )));
        }
        layout.check_finite(&params, "parameters")?;
        Ok(DiscreteModel {
            config: config.clone(),
            layout,
            params,
            emb,
            layer_emb,
            heads,
            trunk,
        })
    }

    /// Closed-form parameter count.
    pub fn param_count_for(config: &DiscreteConfig) -> usize {
        let h = config.net.hidden_dim;
        let k = config.codebook_size;
        let q = config.num_layers;
        q * (k + 1) * h + (q - 1) * h + Trunk::param_count(&config.net) + (q - 1) * (h * k + k)
    }

    pub fn config(&self) -> &DiscreteConfig {
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

    /// Hidden states for several `(stack, prompt_len, layer, masked)` inputs.
    fn hidden(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[(&[Vec<u32>], usize, usize, &[bool])],
    ) -> Var {
        let k = self.config.codebook_size;
        let q = self.config.num_layers;
        let lengths: Vec<usize> = inputs.iter().map(|(s, ..)| s[0].len()).collect();
        let layout = Rc::new(SeqLayout::from_lengths(&lengths));
        let rows = layout.rows();
        let mut acc: Option<Var> = None;
        for l in 1..=q {
            let mut onehot = Mat::zeros((rows, k + 1));
            let mut any = false;
            let mut r = 0;
            for &(stack, prompt_len, layer, masked) in inputs {
                for i in 0..stack[0].len() {
                    let id = if i < prompt_len || l < layer {
                        Some(stack[l - 1][i] as usize)
                    } else if l == layer {
                        Some(if masked[i] { k } else { stack[l - 1][i] as usize })
                    } else {
                        None
                    };
                    if let Some(id) = id {
                        onehot[[r, id]] = 1.0;
                        any = true;
                    }
                    r += 1;
                }
            }
            if !any {
                continue;
            }
            let oh = tape.constant(onehot);
            let e = tape.matmul(oh, vars[self.emb[l - 1]]);
            acc = Some(match acc {
                Some(a) => tape.add(a, e),
                None => e,
            });
        }
        let mut sel = Mat::zeros((rows, q - 1));
        let mut r = 0;
        for &(stack, _, layer, _) in inputs {
            for _ in 0..stack[0].len() {
                sel[[r, layer - 2]] = 1.0;
                r += 1;
            }
        }
        let sel = tape.constant(sel);
        let le = tape.matmul(sel, vars[self.layer_emb]);
        let x = match acc {
            Some(a) => tape.add(a, le),
            None => le,
        };
        let ctx = SeqCtx {
            layout,
            causal: false,
            rotary_offset: 0,
        };
        self.trunk.forward(tape, vars, x, &ctx)
    }

    fn loss_graph(&self, tape: &mut Tape, items: &[DiscreteItem]) -> Result<(Vec<Var>, Var)> {
        if items.is_empty() {
            return Err(Error::Empty("discrete batch".into()));
        }
        for it in items {
            it.validate(&self.config)?;
            if !it.masked.iter().any(|&m| m) {
                return Err(Error::InvalidArgument("item has no masked position".into()));
            }
        }
        let vars = self.layout.bind(tape, &self.params);
        let inputs: Vec<_> = items
            .iter()
            .map(|it| (it.stack.layers(), it.prompt_len, it.layer, it.masked.as_slice()))
            .collect();
        let hidden = self.hidden(tape, &vars, &inputs);
        let nb = items.len() as f64;
        let mut total: Option<Var> = None;
        for layer in 2..=self.config.num_layers {
            if !items.iter().any(|it| it.layer == layer) {
                continue;
            }
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for it in items {
                let n_masked = it.masked.iter().filter(|&&m| m).count() as f64;
                for (i, &m) in it.masked.iter().enumerate() {
                    targets.push(it.stack.layer(layer)[i] as usize);
                    weights.push(if it.layer == layer && m { 1.0 / (n_masked * nb) } else { 0.0 });
                }
            }
            let (w, b) = self.heads[layer - 2];
            let logits = tape.linear(hidden, vars[w], vars[b]);
            let ce = tape.cross_entropy(logits, &targets, weights);
            total = Some(match total {
                Some(t) => tape.add(t, ce),
                None => ce,
            });
        }
        Ok((vars, total.expect("at least one item")))
    }

    /// Mean over items of the mean cross-entropy on masked positions.
    pub fn loss(&self, items: &[DiscreteItem]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.loss_graph(&mut tape, items)?;
        Ok(tape.scalar(loss))
    }

    pub fn loss_and_grad(&self, items: &[DiscreteItem]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (vars, loss) = self.loss_graph(&mut tape, items)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("discrete loss".into()));
        }
        let grads = tape.backward(loss);
        let flat = self.layout.gather(&grads, &vars);
        self.layout.check_finite(&flat, "gradient")?;
        Ok((value, flat))
    }

    pub fn grad_check(
        &self,
        items: &[DiscreteItem],
        epsilon: f64,
        per_slice: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, analytic) = self.loss_and_grad(items)?;
        let mut probe = self.clone();
        Ok(gradcheck::check(
            &self.layout,
            &self.params,
            &analytic,
            |p| {
                probe.params.copy_from_slice(p);
                probe.loss(items).unwrap_or(f64::NAN)
            },
            epsilon,
            per_slice,
            seed,
        ))
    }

    pub fn train_step(
        &mut self,
        items: &[DiscreteItem],
        state: &mut AdamState,
        adam: &AdamConfig,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(items)?;
        state.update(&mut self.params, &grads, adam)?;
        Ok(loss)
    }
}

/// Picks a target layer, a prompt split, and a masking ratio in `(0,1]` for each stack.
pub fn sample_items(
    stacks: &[TokenStack],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<DiscreteItem>> {
    if stacks.is_empty() {
        return Err(Error::Empty("token stacks".into()));
    }
    let mut items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let stack = &stacks[rng.random_range(0..stacks.len())];
        let q = stack.num_layers();
        if q < 2 {
            return Err(Error::InvalidConfig("stacks need ≥ 2 layers".into()));
        }
        let n = stack.len();
        let layer = rng.random_range(2..=q);
        let prompt_len = rng.random_range(0..n);
        let targets = n - prompt_len;
        let ratio = 1.0 - rng.random::<f64>();
        let count = ((ratio * targets as f64).ceil() as usize).clamp(1, targets);
        let mut masked = vec![false; n];
        for j in sample(rng, targets, count) {
            masked[prompt_len + j] = true;
        }
        items.push(DiscreteItem {
            stack: stack.clone(),
            prompt_len,
            layer,
            masked,
        });
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscreteTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for DiscreteTrainConfig {
    fn default() -> Self {
        DiscreteTrainConfig {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

/// Adam training on randomly masked stacks; returns the per-step loss curve.
pub fn train_discrete(
    model: &mut DiscreteModel,
    stacks: &[TokenStack],
    cfg: &DiscreteTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(model.param_count());
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let items = sample_items(stacks, cfg.batch_size, &mut rng)?;
        curve.push(model.train_step(&items, &mut state, &cfg.adam)?);
    }
    Ok(curve)
}

/// Per-iteration unmasking fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    fractions: Vec<f64>,
}

impl DecodeSchedule {
    pub fn new(iterations: usize, fractions: Vec<f64>) -> Result<Self> {
        if iterations == 0 || fractions.len() != iterations {
            return Err(Error::InvalidConfig(format!(
                "{} fractions for {iterations} iterations",
                fractions.len()
            )));
        }
        if fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidConfig("fractions must be positive".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("fractions sum to {sum}")));
        }
        Ok(DecodeSchedule { fractions })
    }

    /// Fraction `cos(πi/2I) − cos(π(i+1)/2I)` at iteration `i`.
    pub fn cosine(iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be ≥ 1".into()));
        }
        let c = |i: usize| (std::f64::consts::FRAC_PI_2 * i as f64 / iterations as f64).cos();
        let fractions = (0..iterations).map(|i| c(i) - c(i + 1)).collect();
        Self::new(iterations, fractions)
    }

    pub fn iterations(&self) -> usize {
        self.fractions.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Positions committed per iteration for `n` targets; the last absorbs the remainder.
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.fractions.iter().map(|f| (n as f64 * f).floor() as usize).collect();
        let last = out.len() - 1;
        let before: usize = out[..last].iter().sum();
        out[last] = n - before.min(n);
        out
    }
}

/// Class probabilities for one layer of a partially decoded stack.
pub trait TokenPredictor {
    fn num_layers(&self) -> usize;
    fn codebook_size(&self) -> usize;

    /// `N×K` probabilities for `layer`. Entries of `layers[layer-1]` at masked
    /// positions and of higher layers on target frames are placeholders.
    fn predict(
        &self,
        layers: &[Vec<u32>],
        prompt_len: usize,
        layer: usize,
        masked: &[bool],
    ) -> Result<Array2<f64>>;
}

impl TokenPredictor for DiscreteModel {
    fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    fn predict(
        &self,
        layers: &[Vec<u32>],
        prompt_len: usize,
        layer: usize,
        masked: &[bool],
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.layout.bind(&mut tape, &self.params);
        let hidden = self.hidden(&mut tape, &vars, &[(layers, prompt_len, layer, masked)]);
        let (w, b) = self.heads[layer - 2];
        let logits = tape.linear(hidden, vars[w], vars[b]);
        let mut p = tape.value(logits).clone();
        for mut row in p.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(p)
    }
}

/// Confidence-ordered iterative unmasking of layers `2..=Q` on target frames.
///
/// Returns the full stack over prompt then target frames. `temperature = 0`
/// commits the argmax class.
pub fn iterative_decode(
    model: &impl TokenPredictor,
    semantic_tokens: &[u32],
    prompt: &TokenStack,
    schedule: &DecodeSchedule,
    temperature: f64,
    seed: u64,
) -> Result<TokenStack> {
    let q = model.num_layers();
    let k = model.codebook_size();
    if prompt.num_layers() != q {
        return Err(Error::DimensionMismatch(format!(
            "prompt has {} layers, model {q}",
            prompt.num_layers()
        )));
    }
    if semantic_tokens.is_empty() {
        return Err(Error::Empty("semantic tokens".into()));
    }
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument("temperature must be ≥ 0".into()));
    }
    let p = prompt.len();
    let n = semantic_tokens.len();
    let mut layers: Vec<Vec<u32>> = prompt.layers().to_vec();
    layers[0].extend_from_slice(semantic_tokens);
    for l in layers.iter_mut().skip(1) {
        l.extend(std::iter::repeat_n(0, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = schedule.counts(n);
    let all: Vec<usize> = (0..k).collect();
    for layer in 2..=q {
        let mut masked = vec![false; p + n];
        masked[p..].iter_mut().for_each(|m| *m = true);
        for &count in &counts {
            let probs = model.predict(&layers, p, layer, &masked)?;
            if probs.dim() != (p + n, k) {
                return Err(Error::DimensionMismatch("predictor output shape".into()));
            }
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for i in p..p + n {
                if !masked[i] {
                    continue;
                }
                let row = probs.row(i);
                let class = if temperature == 0.0 {
                    argmax(row.iter().copied())
                } else {
                    let logits: Vec<f64> = row.iter().map(|&v| v.max(1e-300).ln()).collect();
                    sample_tempered(&logits, &all, temperature, &mut rng)
                };
                cands.push((i, class, row[class]));
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(i, class, _) in cands.iter().take(count) {
                layers[layer - 1][i] = class as u32;
                masked[i] = false;
            }
        }
        debug_assert!(!masked.iter().any(|&m| m));
    }
    TokenStack::new(layers, k)
}

/// Stub predictors for tests.
pub mod stub {
    use super::*;

    /// Always puts probability 1 on the true token.
    pub struct OraclePredictor {
        pub truth: TokenStack,
        pub codebook_size: usize,
    }

    impl TokenPredictor for OraclePredictor {
        fn num_layers(&self) -> usize {
            self.truth.num_layers()
        }

        fn codebook_size(&self) -> usize {
            self.codebook_size
        }

        fn predict(&self, layers: &[Vec<u32>], _: usize, layer: usize, _: &[bool]) -> Result<Array2<f64>> {
            let n = layers[0].len();
            let mut p = Array2::zeros((n, self.codebook_size));
            for i in 0..n {
                p[[i, self.truth.layer(layer)[i] as usize]] = 1.0;
            }
            Ok(p)
        }
    }

    /// Uniform over classes.
    pub struct UniformPredictor {
        pub num_layers: usize,
        pub codebook_size: usize,
    }

    impl TokenPredictor for UniformPredictor {
        fn num_layers(&self) -> usize {
            self.num_layers
        }

        fn codebook_size(&self) -> usize {
            self.codebook_size
        }

        fn predict(&self, layers: &[Vec<u32>], _: usize, _: usize, _: &[bool]) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(
                (layers[0].len(), self.codebook_size),
                1.0 / self.codebook_size as f64,
            ))
        }
    }
}
