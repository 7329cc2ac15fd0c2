//! The four controlled comparisons, run on the synthetic corpus.
//!
//! All arms of a comparison share the corpus, the quantizer fits, the
//! training seed and the step count. Evaluation is a conversion analog: the
//! content comes from held-out utterance A, the prompt is the opening
//! fraction of held-out utterance B (a different speaker). Semantic accuracy
//! is scored against A's states, perceptual similarity against B's raw prompt.

use std::time::Instant;

use crate::discrete::{
    iterative_decode, train_discrete, DecodeSchedule, DiscreteConfig, DiscreteModel,
    DiscreteTrainConfig,
};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::flow::{ChainMode, PriorMode};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{perceptual_similarity, semantic_accuracy, SemanticProjector, TokenStateMap};
use crate::harness::results::{ExperimentResult, MetricPoint, Series};
use crate::harness::synth::{SynthSample, SynthWorld, HELD_OUT_OFFSET};
use crate::nn::{NetConfig, Preset};
use crate::ode::{infer_chain_batch, InferenceRequest, SolverSpec};
use crate::rvq::{train_codebooks, RvqConfig, RvqModel, TokenStack};
use crate::semantic_ar::{self, LmConfig, LmTrainConfig, Sampling, SemanticLM, VocabLayout};
use crate::vfnet::{train_flow, FlowExample, FlowTrainConfig, VectorFieldModel};

/// Worker threads for independent arms: `COIFLOW_THREADS`, default 1.
pub fn thread_budget() -> usize {
    std::env::var("COIFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `jobs` with at most [`thread_budget`] in flight; output order is job order.
pub fn run_parallel<T, F>(jobs: Vec<F>) -> Result<Vec<T>>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    let width = thread_budget();
    if width <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let mut out = Vec::with_capacity(jobs.len());
    let mut jobs = jobs.into_iter().peekable();
    while jobs.peek().is_some() {
        let chunk: Vec<F> = jobs.by_ref().take(width).collect();
        let done: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.into_iter().map(|j| s.spawn(j)).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("worker panicked".into()))))
                .collect()
        });
        for r in done {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Frames given to the prompt: `round(fraction·T)`, kept inside `[1, T−1]`.
pub fn prompt_len(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).round() as usize).clamp(1, total.saturating_sub(1).max(1))
}

/// One held-out conversion pair.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub target_states: Vec<usize>,
    /// Source utterance features (used to derive content tokens).
    pub source: FeatureSequence,
    /// Raw prompt frames of the other speaker.
    pub prompt: FeatureSequence,
}

/// Training and evaluation data plus the disentangled quantizer.
pub struct Corpus {
    pub world: SynthWorld,
    pub train: Vec<SynthSample>,
    pub eval: Vec<EvalItem>,
    pub teacher_rvq: RvqModel,
    pub state_map: TokenStateMap,
    pub projector: SemanticProjector,
}

impl Corpus {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let world = SynthWorld::new(&cfg.synth)?;
        let train = world.generate(0, cfg.synth.dataset_size);
        let n = cfg.eval.num_pairs;
        let held = world.generate(HELD_OUT_OFFSET, 2 * n);
        let (sources, prompts) = held.split_at(n);
        let mut eval = Vec::with_capacity(n);
        for (i, a) in sources.iter().enumerate() {
            let b = (0..n)
                .map(|k| &prompts[(i + k) % n])
                .find(|b| b.speaker_id != a.speaker_id)
                .ok_or_else(|| Error::InvalidConfig("held-out set has a single speaker".into()))?;
            let p = prompt_len(b.len(), cfg.eval.prompt_fraction);
            eval.push(EvalItem {
                target_states: a.semantic_states.clone(),
                source: a.features.clone(),
                prompt: b.features.slice_frames(0, p)?,
            });
        }
        let teacher_rvq = fit_rvq(&train, &cfg.rvq, true, cfg.seed)?;
        let state_map = TokenStateMap::fit(
            &teacher_rvq,
            train.iter().map(|s| (&s.features, s.semantic_states.as_slice())),
            cfg.synth.num_semantic_states,
        )?;
        Ok(Corpus {
            projector: world.projector(),
            world,
            train,
            eval,
            teacher_rvq,
            state_map,
        })
    }

    /// Mean proxy metrics of generated target frames, one per eval item.
    pub fn score(&self, iterations: usize, generated: &[FeatureSequence]) -> Result<MetricPoint> {
        if generated.len() != self.eval.len() {
            return Err(Error::DimensionMismatch("one output per eval item".into()));
        }
        let mut acc = 0.0;
        let mut sim = 0.0;
        for (g, item) in generated.iter().zip(&self.eval) {
            acc += semantic_accuracy(&self.teacher_rvq, g, &item.target_states, &self.state_map)?;
            sim += perceptual_similarity(g, &item.prompt, &self.projector)?;
        }
        let n = self.eval.len() as f64;
        Ok(MetricPoint {
            iterations,
            semantic_accuracy: acc / n,
            perceptual_similarity: sim / n,
        })
    }
}

/// Teacher-guided (`teacher = true`) or plain quantizer fit on the training split.
pub fn fit_rvq(train: &[SynthSample], cfg: &RvqConfig, teacher: bool, seed: u64) -> Result<RvqModel> {
    let feats: Vec<FeatureSequence> = train.iter().map(|s| s.features.clone()).collect();
    if teacher {
        let t: Vec<FeatureSequence> = train.iter().map(|s| s.teacher_semantic.clone()).collect();
        train_codebooks(&feats, Some(&t), cfg, seed)
    } else {
        let plain = RvqConfig {
            semantic_teacher_weight: 0.0,
            ..cfg.clone()
        };
        train_codebooks(&feats, None, &plain, seed)
    }
}

/// `(v_1, v_{1:Q})` of `x` under `rvq`.
pub fn chain_views(rvq: &RvqModel, x: &FeatureSequence) -> Result<(FeatureSequence, FeatureSequence)> {
    let st = rvq.encode(x)?;
    Ok((rvq.sum_layers(&st, 1, 1)?, rvq.sum_layers(&st, 1, rvq.num_layers())?))
}

pub fn flow_examples(rvq: &RvqModel, train: &[SynthSample]) -> Result<Vec<FlowExample>> {
    train
        .iter()
        .map(|s| {
            let (v1, full) = chain_views(rvq, &s.features)?;
            Ok(FlowExample {
                semantic: v1.into_frames(),
                complete: full.into_frames(),
            })
        })
        .collect()
}

/// Conversion with a trained field: ground-truth content, other-speaker prompt.
pub fn eval_flow(
    corpus: &Corpus,
    model: &VectorFieldModel,
    mode: ChainMode,
    prior: PriorMode,
    solver: SolverSpec,
    prior_sigma: f64,
    seed: u64,
) -> Result<MetricPoint> {
    let rvq = &corpus.teacher_rvq;
    let reqs = corpus
        .eval
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let (p1, pfull) = chain_views(rvq, &item.prompt)?;
            let (t1, _) = chain_views(rvq, &item.source)?;
            let mut r = InferenceRequest::new(mode, pfull, p1, t1, solver, seed.wrapping_add(i as u64));
            r.prior = prior;
            r.prior_sigma = prior_sigma;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = infer_chain_batch(model, &reqs)?
        .iter()
        .map(|v| rvq.decode(v))
        .collect::<Result<Vec<_>>>()?;
    corpus.score(solver.steps(), &out)
}

fn flow_train_config(cfg: &ExperimentConfig, mode: ChainMode, prior: PriorMode) -> FlowTrainConfig {
    FlowTrainConfig {
        mode,
        prior: Some(prior),
        steps: cfg.flow.steps,
        batch_size: cfg.flow.batch_size,
        prior_sigma: cfg.flow.prior_sigma,
        sigma_min: cfg.flow.sigma_min,
        adam: cfg.flow.adam.clone(),
    }
}

fn check_equal<T: PartialEq + std::fmt::Debug>(what: &str, values: &[T]) -> Result<()> {
    if values.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Contract(format!("{what} differ across arms: {values:?}")));
    }
    Ok(())
}

fn check_params_close(counts: &[usize]) -> Result<()> {
    let lo = *counts.iter().min().expect("arms");
    let hi = *counts.iter().max().expect("arms");
    if (hi - lo) as f64 > 0.01 * lo as f64 {
        return Err(Error::Contract(format!(
            "parameter counts {counts:?} differ by more than 1%"
        )));
    }
    Ok(())
}

/// `net` with its FFN width moved so that `count` lands as close to `target` as possible.
/// Keeps layers, heads and hidden size; used to parameter-match arms whose
/// input and output layers differ.
pub fn ffn_matched(net: &NetConfig, target: usize, count: impl Fn(&NetConfig) -> usize) -> NetConfig {
    let at = |f: usize| {
        let mut n = net.clone();
        n.ffn_dim = f;
        count(&n) as f64
    };
    let per_unit = at(net.ffn_dim + 1) - at(net.ffn_dim);
    if per_unit <= 0.0 {
        return net.clone();
    }
    let shift = ((target as f64 - at(net.ffn_dim)) / per_unit).round();
    let mut out = net.clone();
    out.ffn_dim = (net.ffn_dim as f64 + shift).max(1.0) as usize;
    out
}

/// Mean of the last tenth of a curve (at least one point).
pub fn tail_mean(curve: &[f64]) -> f64 {
    let n = (curve.len() / 10).max(1).min(curve.len());
    curve[curve.len() - n..].iter().sum::<f64>() / n as f64
}

fn finish(
    mut r: ExperimentResult,
    steps: usize,
    params: usize,
    curve: &[f64],
    window: usize,
    started: Instant,
) -> Result<ExperimentResult> {
    r.train_steps = steps;
    r.param_count = params;
    r.series.push(Series::windowed("loss", curve, window)?);
    r.extra.insert("final_loss".into(), tail_mean(curve));
    r.runtime_secs = started.elapsed().as_secs_f64();
    Ok(r)
}

/// Standard vs. semantic prior, both on implicit-chain pairing, swept over ODE steps.
pub fn run_prior_comparison(cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let corpus = Corpus::build(cfg)?;
    let examples = flow_examples(&corpus.teacher_rvq, &corpus.train)?;
    let net = cfg.flow.net_config();
    let dim = cfg.synth.dim;
    let arms = [("standard", PriorMode::Standard), ("semantic", PriorMode::Semantic)];
    let tcs: Vec<FlowTrainConfig> = arms
        .iter()
        .map(|&(_, p)| flow_train_config(cfg, ChainMode::Implicit, p))
        .collect();
    check_equal("step counts", &tcs.iter().map(|t| t.steps).collect::<Vec<_>>())?;
    check_equal("batch sizes", &tcs.iter().map(|t| t.batch_size).collect::<Vec<_>>())?;
    check_params_close(&[VectorFieldModel::param_count_for(&net, dim); 2])?;
    let digest = cfg.digest();
    let jobs: Vec<_> = arms
        .iter()
        .zip(&tcs)
        .map(|(&(name, prior), tc)| {
            let (corpus, examples, net, digest) = (&corpus, &examples, &net, &digest);
            move || -> Result<ExperimentResult> {
                let started = Instant::now();
                let mut model = VectorFieldModel::init(net, dim, cfg.seed)?;
                let curve = train_flow(&mut model, examples, tc, cfg.seed)?;
                let mut r = ExperimentResult::new("prior", name, digest, cfg.seed);
                for &steps in &cfg.eval.ode_steps {
                    let solver = SolverSpec::new(cfg.flow.method, steps)?;
                    r.metrics.push(eval_flow(
                        corpus,
                        &model,
                        ChainMode::Implicit,
                        prior,
                        solver,
                        cfg.flow.prior_sigma,
                        cfg.seed,
                    )?);
                }
                finish(r, tc.steps, model.param_count(), &curve, cfg.eval.loss_window, started)
            }
        })
        .collect();
    run_parallel(jobs)
}

/// Tiny / Small / Base field networks on identical streams.
pub fn run_scaling_study(cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let corpus = Corpus::build(cfg)?;
    let examples = flow_examples(&corpus.teacher_rvq, &corpus.train)?;
    let dim = cfg.synth.dim;
    let tc = flow_train_config(cfg, ChainMode::Implicit, PriorMode::Semantic);
    let digest = cfg.digest();
    let presets = [Preset::Tiny, Preset::Small, Preset::Base];
    let jobs: Vec<_> = presets
        .iter()
        .map(|&p| {
            let (corpus, examples, digest) = (&corpus, &examples, &digest);
            let net = NetConfig::preset(p);
            let mut tc = tc.clone();
            let width = NetConfig::preset(Preset::Tiny).hidden_dim as f64 / net.hidden_dim as f64;
            tc.adam.lr *= width.powf(cfg.flow.lr_width_exponent);
            move || -> Result<ExperimentResult> {
                let started = Instant::now();
                let mut model = VectorFieldModel::init(&net, dim, cfg.seed)?;
                if model.param_count() != VectorFieldModel::param_count_for(&net, dim) {
                    return Err(Error::Contract("parameter count disagrees with formula".into()));
                }
                let curve = train_flow(&mut model, examples, &tc, cfg.seed)?;
                let name = format!("{p:?}").to_ascii_lowercase();
                let mut r = ExperimentResult::new("scale", &name, digest, cfg.seed);
                let solver = SolverSpec::new(cfg.flow.method, cfg.eval.fixed_iterations)?;
                r.metrics.push(eval_flow(
                    corpus,
                    &model,
                    ChainMode::Implicit,
                    PriorMode::Semantic,
                    solver,
                    cfg.flow.prior_sigma,
                    cfg.seed,
                )?);
                let frames: usize = examples.iter().map(|e| e.semantic.nrows()).sum();
                r.extra.insert(
                    "frames_per_step".into(),
                    tc.batch_size as f64 * frames as f64 / examples.len() as f64,
                );
                r.extra.insert("lr".into(), tc.adam.lr);
                finish(r, tc.steps, model.param_count(), &curve, cfg.eval.loss_window, started)
            }
        })
        .collect();
    let out = run_parallel(jobs)?;
    check_equal("step counts", &out.iter().map(|r| r.train_steps).collect::<Vec<_>>())?;
    Ok(out)
}

/// Decodes `content` tokens for every eval item and maps stacks to features.
fn eval_discrete(
    corpus: &Corpus,
    model: &DiscreteModel,
    content: &[Vec<u32>],
    prompt_stack: impl Fn(&FeatureSequence) -> Result<TokenStack>,
    to_features: impl Fn(&TokenStack) -> Result<FeatureSequence>,
    iterations: usize,
    temperature: f64,
    seed: u64,
) -> Result<MetricPoint> {
    let schedule = DecodeSchedule::cosine(iterations)?;
    let mut out = Vec::with_capacity(corpus.eval.len());
    for (i, (item, tokens)) in corpus.eval.iter().zip(content).enumerate() {
        let prompt = prompt_stack(&item.prompt)?;
        let full = iterative_decode(model, tokens, &prompt, &schedule, temperature, seed.wrapping_add(i as u64))?;
        let target = full.slice_frames(prompt.len(), full.len());
        out.push(to_features(&target)?);
    }
    corpus.score(iterations, &out)
}

/// Continuous (implicit chain) vs. discrete (masked tokens) with matched trunks.
pub fn run_cont_vs_disc(cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let corpus = Corpus::build(cfg)?;
    let rvq = &corpus.teacher_rvq;
    let net = cfg.flow.net_config();
    let dim = cfg.synth.dim;
    let (q, k) = (rvq.num_layers(), rvq.codebook_size());
    // Same trunk shape; the FFN width absorbs the difference in input/output layers.
    let dcfg = DiscreteConfig {
        net: ffn_matched(&net, VectorFieldModel::param_count_for(&net, dim), |n| {
            DiscreteModel::param_count_for(&DiscreteConfig {
                net: n.clone(),
                num_layers: q,
                codebook_size: k,
            })
        }),
        num_layers: q,
        codebook_size: k,
    };
    let iters = cfg.eval.fixed_iterations;
    check_params_close(&[
        VectorFieldModel::param_count_for(&net, dim),
        DiscreteModel::param_count_for(&dcfg),
    ])?;
    let digest = cfg.digest();
    let tc = flow_train_config(cfg, ChainMode::Implicit, PriorMode::Semantic);
    let dtc = DiscreteTrainConfig {
        steps: tc.steps,
        batch_size: tc.batch_size,
        adam: tc.adam.clone(),
    };

    let continuous = || -> Result<ExperimentResult> {
        let started = Instant::now();
        let examples = flow_examples(rvq, &corpus.train)?;
        let mut model = VectorFieldModel::init(&net, dim, cfg.seed)?;
        let curve = train_flow(&mut model, &examples, &tc, cfg.seed)?;
        let mut r = ExperimentResult::new("contdisc", "continuous", &digest, cfg.seed);
        let solver = SolverSpec::new(cfg.flow.method, iters)?;
        r.metrics.push(eval_flow(
            &corpus,
            &model,
            ChainMode::Implicit,
            PriorMode::Semantic,
            solver,
            cfg.flow.prior_sigma,
            cfg.seed,
        )?);
        r.extra.insert("inference_iterations".into(), iters as f64);
        finish(r, tc.steps, model.param_count(), &curve, cfg.eval.loss_window, started)
    };
    let discrete = || -> Result<ExperimentResult> {
        let started = Instant::now();
        let stacks = corpus
            .train
            .iter()
            .map(|s| rvq.encode(&s.features))
            .collect::<Result<Vec<_>>>()?;
        let mut model = DiscreteModel::init(&dcfg, cfg.seed)?;
        let curve = train_discrete(&mut model, &stacks, &dtc, cfg.seed)?;
        let content = corpus
            .eval
            .iter()
            .map(|it| Ok(rvq.encode(&it.source)?.layer(1).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut r = ExperimentResult::new("contdisc", "discrete", &digest, cfg.seed);
        r.metrics.push(eval_discrete(
            &corpus,
            &model,
            &content,
            |p| rvq.encode(p),
            |st| rvq.decode(&rvq.sum_layers(st, 1, rvq.num_layers())?),
            iters,
            cfg.discrete.temperature,
            cfg.seed,
        )?);
        r.extra.insert("inference_iterations".into(), iters as f64);
        r.extra.insert("ffn_dim".into(), dcfg.net.ffn_dim as f64);
        finish(r, dtc.steps, model.param_count(), &curve, cfg.eval.loss_window, started)
    };
    let jobs: Vec<Box<dyn FnOnce() -> Result<ExperimentResult> + Send + '_>> =
        vec![Box::new(continuous), Box::new(discrete)];
    run_parallel(jobs)
}

/// How an arm turns features into its token stack and back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainArm {
    /// Plain quantizer; content model targets its layer 1.
    Ig,
    /// Teacher layer 1 on top of the plain quantizer's full stack.
    Sdg,
    /// Teacher quantizer; layer 1 semantic, the rest perceptual.
    Coig,
}

impl ChainArm {
    pub fn name(self) -> &'static str {
        match self {
            ChainArm::Ig => "ig",
            ChainArm::Sdg => "sdg",
            ChainArm::Coig => "coig",
        }
    }
}

struct ArmCodec<'a> {
    arm: ChainArm,
    teacher: &'a RvqModel,
    plain: &'a RvqModel,
}

impl ArmCodec<'_> {
    fn encode(&self, x: &FeatureSequence) -> Result<TokenStack> {
        match self.arm {
            ChainArm::Coig => self.teacher.encode(x),
            ChainArm::Ig => self.plain.encode(x),
            ChainArm::Sdg => {
                let sem = self.teacher.encode(x)?;
                let mut layers = vec![sem.layer(1).to_vec()];
                layers.extend(self.plain.encode(x)?.layers().iter().cloned());
                TokenStack::new(layers, self.teacher.codebook_size())
            }
        }
    }

    fn features(&self, st: &TokenStack) -> Result<FeatureSequence> {
        match self.arm {
            ChainArm::Coig => self.teacher.decode(&self.teacher.sum_layers(st, 1, st.num_layers())?),
            ChainArm::Ig => self.plain.decode(&self.plain.sum_layers(st, 1, st.num_layers())?),
            ChainArm::Sdg => {
                let rest = TokenStack::new(st.layers()[1..].to_vec(), self.plain.codebook_size())?;
                self.plain.decode(&self.plain.sum_layers(&rest, 1, rest.num_layers())?)
            }
        }
    }
}

/// LM settings for a source/target vocabulary pair and utterance length.
pub fn lm_config(cfg: &ExperimentConfig, vocab: &VocabLayout) -> LmConfig {
    LmConfig {
        vocab_size: vocab.size(),
        layers: cfg.ar.layers,
        hidden_dim: cfg.ar.hidden_dim,
        ffn_dim: cfg.ar.ffn_dim,
        heads: cfg.ar.heads,
        max_seq_len: 2 * cfg.synth.seq_len_max + 3,
        eos_id: Some(semantic_ar::EOS),
    }
}

/// Trains the content model mapping state sequences to `targets` (layer-1 codes).
pub fn train_content_model(
    cfg: &ExperimentConfig,
    train: &[SynthSample],
    targets: &[Vec<u32>],
    codebook_size: usize,
) -> Result<(SemanticLM, VocabLayout, Vec<f64>)> {
    let vocab = VocabLayout::new(cfg.synth.num_semantic_states as u32, codebook_size as u32);
    let data: Vec<_> = train
        .iter()
        .zip(targets)
        .map(|(s, t)| {
            let src: Vec<u32> = s.semantic_states.iter().map(|&v| v as u32).collect();
            vocab.sample(&src, t)
        })
        .collect();
    let mut lm = SemanticLM::init(&lm_config(cfg, &vocab), cfg.seed)?;
    let tc = LmTrainConfig {
        steps: cfg.ar.steps,
        batch_size: cfg.ar.batch_size,
        adam: cfg.ar.adam.clone(),
    };
    let curve = semantic_ar::train(&mut lm, &data, &tc, cfg.seed)?;
    Ok((lm, vocab, curve))
}

/// IG vs. SDG vs. CoIG: content model plus masked-token perceptual model per arm.
pub fn run_coig_comparison(cfg: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    let corpus = Corpus::build(cfg)?;
    let plain = fit_rvq(&corpus.train, &cfg.rvq, false, cfg.seed)?;
    let teacher = &corpus.teacher_rvq;
    let k = teacher.codebook_size();
    let arms = [ChainArm::Ig, ChainArm::Sdg, ChainArm::Coig];
    let base = DiscreteConfig {
        net: cfg.discrete.net_config(),
        num_layers: teacher.num_layers(),
        codebook_size: k,
    };
    // SDG carries one extra token layer; its FFN shrinks to keep the budget.
    let sdg_layers = teacher.num_layers() + 1;
    let sdg = DiscreteConfig {
        net: ffn_matched(&base.net, DiscreteModel::param_count_for(&base), |n| {
            DiscreteModel::param_count_for(&DiscreteConfig {
                net: n.clone(),
                num_layers: sdg_layers,
                codebook_size: k,
            })
        }),
        num_layers: sdg_layers,
        codebook_size: k,
    };
    let dcfgs: Vec<DiscreteConfig> = arms
        .iter()
        .map(|&a| if a == ChainArm::Sdg { sdg.clone() } else { base.clone() })
        .collect();
    check_params_close(&dcfgs.iter().map(DiscreteModel::param_count_for).collect::<Vec<_>>())?;
    let dtc = DiscreteTrainConfig {
        steps: cfg.discrete.steps,
        batch_size: cfg.discrete.batch_size,
        adam: cfg.discrete.adam.clone(),
    };
    let digest = cfg.digest();

    // SDG and CoIG share the content target (teacher layer 1), so one model serves both.
    let ig_targets = corpus
        .train
        .iter()
        .map(|s| Ok(plain.encode(&s.features)?.layer(1).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let sem_targets = corpus
        .train
        .iter()
        .map(|s| Ok(teacher.encode(&s.features)?.layer(1).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let content_jobs: Vec<Box<dyn FnOnce() -> Result<_> + Send + '_>> = vec![
        Box::new(|| train_content_model(cfg, &corpus.train, &ig_targets, k)),
        Box::new(|| train_content_model(cfg, &corpus.train, &sem_targets, k)),
    ];
    let mut content = run_parallel(content_jobs)?;
    let sem_lm = content.pop().expect("two content models");
    let ig_lm = content.pop().expect("two content models");

    let jobs: Vec<_> = arms
        .iter()
        .zip(&dcfgs)
        .map(|(&arm, dcfg)| {
            let (corpus, plain, dtc, digest) = (&corpus, &plain, &dtc, &digest);
            let (lm, vocab, ar_curve) = if arm == ChainArm::Ig { &ig_lm } else { &sem_lm };
            move || -> Result<ExperimentResult> {
                let started = Instant::now();
                let codec = ArmCodec {
                    arm,
                    teacher,
                    plain,
                };
                let stacks = corpus
                    .train
                    .iter()
                    .map(|s| codec.encode(&s.features))
                    .collect::<Result<Vec<_>>>()?;
                let mut model = DiscreteModel::init(dcfg, cfg.seed)?;
                let curve = train_discrete(&mut model, &stacks, dtc, cfg.seed)?;
                let tokens = corpus
                    .eval
                    .iter()
                    .map(|it| {
                        let src: Vec<u32> = it.target_states.iter().map(|&s| s as u32).collect();
                        lm.generate_targets(vocab, &src, src.len(), Sampling::Greedy, cfg.seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut r = ExperimentResult::new("coig", arm.name(), digest, cfg.seed);
                for &it in &cfg.eval.iterations {
                    r.metrics.push(eval_discrete(
                        corpus,
                        &model,
                        &tokens,
                        |p| codec.encode(p),
                        |st| codec.features(st),
                        it,
                        cfg.discrete.temperature,
                        cfg.seed,
                    )?);
                }
                let predicted = (dcfg.num_layers - 1) as f64;
                r.extra.insert("predicted_layers".into(), predicted);
                r.extra.insert("ffn_dim".into(), dcfg.net.ffn_dim as f64);
                r.extra.insert("final_nar_loss_per_frame".into(), predicted * tail_mean(&curve));
                r.extra.insert("final_ar_loss".into(), tail_mean(ar_curve));
                r.extra.insert("ar_param_count".into(), lm.param_count() as f64);
                r.series.push(Series::windowed("ar_loss", ar_curve, cfg.eval.loss_window)?);
                finish(r, dtc.steps, model.param_count(), &curve, cfg.eval.loss_window, started)
            }
        })
        .collect();
    let out = run_parallel(jobs)?;
    check_equal("step counts", &out.iter().map(|r| r.train_steps).collect::<Vec<_>>())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_length_rounds_and_clamps() {
        assert_eq!(prompt_len(24, 0.25), 6);
        assert_eq!(prompt_len(2, 0.25), 1);
        assert_eq!(prompt_len(4, 0.99), 3);
    }

    #[test]
    fn parallel_runner_keeps_order() {
        let jobs: Vec<_> = (0..5).map(|i| move || -> Result<usize> { Ok(i * i) }).collect();
        assert_eq!(run_parallel(jobs).unwrap(), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn contract_checks() {
        assert!(check_params_close(&[1000, 1009]).is_ok());
        assert!(check_params_close(&[1000, 1011]).is_err());
        assert!(check_equal("x", &[1, 1, 2]).is_err());
    }

    #[test]
    fn ffn_matching_brings_arms_within_budget() {
        for p in [Preset::Tiny, Preset::Small, Preset::Base] {
            let net = NetConfig::preset(p);
            let flow = VectorFieldModel::param_count_for(&net, 16);
            let count = |n: &NetConfig| {
                DiscreteModel::param_count_for(&DiscreteConfig {
                    net: n.clone(),
                    num_layers: 4,
                    codebook_size: 16,
                })
            };
            let m = ffn_matched(&net, flow, count);
            assert_eq!((m.layers, m.hidden_dim, m.heads), (net.layers, net.hidden_dim, net.heads));
            check_params_close(&[flow, count(&m)]).unwrap();
        }
    }
}
