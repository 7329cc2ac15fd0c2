//! The vector-field network `v_t(x_t, x_pmt, z; θ)`.
//!
//! Input arrangement: `(x_t ‖ z)` is projected from `2H` to `H`, then
//! concatenated with `x_pmt` to form the `T×2H` network input. The flow step
//! `t` enters through a sinusoidal embedding and a two-layer MLP whose output
//! is added to every frame after the input projection.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, SeqLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{ChainMode, FieldQuery, FlowBatch, PriorMode, VectorField};
use crate::gradcheck::{self, GradCheckReport};
use crate::nn::{NetConfig, SeqCtx, Trunk};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamLayout;

/// Frequency multiplier applied to `t ∈ [0,1]` before the sinusoids.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug)]
struct Slots {
    cond_w: usize,
    cond_b: usize,
    in_w: usize,
    in_b: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Debug)]
pub struct VectorFieldModel {
    config: NetConfig,
    dim: usize,
    layout: ParamLayout,
    params: Vec<f64>,
    slots: Slots,
    trunk: Trunk,
    trained_with: Option<(ChainMode, PriorMode)>,
}

/// Sinusoidal embedding of each `t`, one row per value.
pub fn time_embedding(ts: &[f64], dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = TIME_SCALE * t * freq;
            out[[r, i]] = arg.sin();
            out[[r, half + i]] = arg.cos();
        }
    }
    out
}

fn layout_for(config: &NetConfig, dim: usize) -> (ParamLayout, Slots, Trunk) {
    let h = config.hidden_dim;
    let mut l = ParamLayout::new();
    let cond_w = l.weight("cond_proj.w", 2 * dim, dim);
    let cond_b = l.bias("cond_proj.b", dim);
    let in_w = l.weight("in_proj.w", 2 * dim, h);
    let in_b = l.bias("in_proj.b", h);
    let t_w1 = l.weight("time.w1", config.time_embed_dim, h);
    let t_b1 = l.bias("time.b1", h);
    let t_w2 = l.weight("time.w2", h, h);
    let t_b2 = l.bias("time.b2", h);
    let trunk = Trunk::register(&mut l, config);
    let head_w = l.weight("head.w", h, dim);
    let head_b = l.bias("head.b", dim);
    let slots = Slots {
        cond_w,
        cond_b,
        in_w,
        in_b,
        t_w1,
        t_b1,
        t_w2,
        t_b2,
        head_w,
        head_b,
    };
    (l, slots, trunk)
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("flow step t={t} outside [0,1]")));
    }
    Ok(())
}

impl VectorFieldModel {
    pub fn init(config: &NetConfig, dim: usize, seed: u64) -> Result<Self> {
        let (layout, _, _) = layout_for(config, dim);
        let params = layout.init(seed);
        Self::from_params(config, dim, params)
    }

    pub fn from_params(config: &NetConfig, dim: usize, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("feature dim must be ≥ 1".into()));
        }
        let (layout, slots, trunk) = layout_for(config, dim);
        if params.len() != layout.total() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            )));
        }
        layout.check_finite(&params, "parameters")?;
        Ok(VectorFieldModel {
            config: config.clone(),
            dim,
            layout,
            params,
            slots,
            trunk,
            trained_with: None,
        })
    }

    /// Closed-form parameter count.
    pub fn param_count_for(config: &NetConfig, dim: usize) -> usize {
        let h = config.hidden_dim;
        let cond = 2 * dim * dim + dim;
        let inp = 2 * dim * h + h;
        let time = config.time_embed_dim * h + h + h * h + h;
        let head = h * dim + dim;
        cond + inp + time + Trunk::param_count(config) + head
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn trained_with(&self) -> Option<(ChainMode, PriorMode)> {
        self.trained_with
    }

    pub fn set_trained_with(&mut self, v: Option<(ChainMode, PriorMode)>) {
        self.trained_with = v;
    }

    /// Overwrites every parameter; keeps the layout.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch("parameter vector length".into()));
        }
        self.layout.check_finite(&params, "parameters")?;
        self.params = params;
        Ok(())
    }

    /// Overwrites one named slice (row-major).
    pub fn set_slice(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let s = self
            .layout
            .slice(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter slice `{name}`")))?;
        if values.len() != s.len() {
            return Err(Error::DimensionMismatch(format!(
                "slice `{name}` has {} values, got {}",
                s.len(),
                values.len()
            )));
        }
        self.params[s.range()].copy_from_slice(values);
        Ok(())
    }

    /// `concat(proj(x_t ‖ z), x_pmt)`, shape `T×2H`.
    pub fn build_condition(
        &self,
        xt: ArrayView2<f64>,
        z: ArrayView2<f64>,
        x_pmt: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_inputs(xt, z, x_pmt)?;
        let w = self.layout.matrix(&self.params, self.slots.cond_w);
        let b = self.layout.matrix(&self.params, self.slots.cond_b);
        let xz = ndarray::concatenate(Axis(1), &[xt, z]).expect("rows checked");
        let c = xz.dot(&w) + &b;
        Ok(ndarray::concatenate(Axis(1), &[c.view(), x_pmt]).expect("rows checked"))
    }

    fn check_inputs(
        &self,
        xt: ArrayView2<f64>,
        z: ArrayView2<f64>,
        x_pmt: ArrayView2<f64>,
    ) -> Result<()> {
        let want = (xt.nrows(), self.dim);
        for (name, m) in [("x_t", xt), ("z", z), ("x_pmt", x_pmt)] {
            if m.dim() != want || m.nrows() == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {:?}, expected {want:?}",
                    m.dim()
                )));
            }
        }
        Ok(())
    }

    /// Runs the network on a `T×2H` input.
    pub fn forward(&self, input: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        check_t(t)?;
        if input.ncols() != 2 * self.dim || input.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "network input is {:?}, expected (T, {})",
                input.dim(),
                2 * self.dim
            )));
        }
        let mut tape = Tape::new();
        let vars = self.layout.bind(&mut tape, &self.params);
        let x = tape.constant(input.to_owned());
        let layout = Rc::new(SeqLayout::single(input.nrows()));
        let out = self.body(&mut tape, &vars, x, &[t], layout, 0);
        Ok(tape.value(out).clone())
    }

    /// Same as [`forward`](Self::forward) with all rotary positions shifted by `offset`.
    pub fn forward_shifted(&self, input: ArrayView2<f64>, t: f64, offset: usize) -> Result<Array2<f64>> {
        check_t(t)?;
        let mut tape = Tape::new();
        let vars = self.layout.bind(&mut tape, &self.params);
        let x = tape.constant(input.to_owned());
        let layout = Rc::new(SeqLayout::single(input.nrows()));
        let out = self.body(&mut tape, &vars, x, &[t], layout, offset);
        Ok(tape.value(out).clone())
    }

    fn body(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        ts: &[f64],
        layout: Rc<SeqLayout>,
        rotary_offset: usize,
    ) -> Var {
        let sl = &self.slots;
        let h = tape.linear(input, vars[sl.in_w], vars[sl.in_b]);
        let temb = tape.constant(time_embedding(ts, self.config.time_embed_dim));
        let e = tape.linear(temb, vars[sl.t_w1], vars[sl.t_b1]);
        let e = tape.gelu(e);
        let e = tape.linear(e, vars[sl.t_w2], vars[sl.t_b2]);
        let e = tape.repeat_segments(e, layout.clone());
        let h = tape.add(h, e);
        let ctx = SeqCtx {
            layout,
            causal: false,
            rotary_offset,
        };
        let h = self.trunk.forward(tape, vars, h, &ctx);
        tape.linear(h, vars[sl.head_w], vars[sl.head_b])
    }

    /// Stacked graph over several flow states; returns the output node.
    fn graph(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        xt: &[ArrayView2<f64>],
        z: &[ArrayView2<f64>],
        x_pmt: &[ArrayView2<f64>],
        ts: &[f64],
    ) -> Var {
        let lengths: Vec<usize> = xt.iter().map(|m| m.nrows()).collect();
        let layout = Rc::new(SeqLayout::from_lengths(&lengths));
        let xt = ndarray::concatenate(Axis(0), xt).expect("equal widths");
        let z = ndarray::concatenate(Axis(0), z).expect("equal widths");
        let pmt = ndarray::concatenate(Axis(0), x_pmt).expect("equal widths");
        let xz = ndarray::concatenate(Axis(1), &[xt.view(), z.view()]).expect("equal rows");
        let xz = tape.constant(xz);
        let c = tape.linear(xz, vars[self.slots.cond_w], vars[self.slots.cond_b]);
        let p = tape.constant(pmt);
        let input = tape.concat_cols(&[c, p]);
        self.body(tape, vars, input, ts, layout, 0)
    }

    fn loss_graph(&self, tape: &mut Tape, batches: &[FlowBatch]) -> Result<(Vec<Var>, Var)> {
        if batches.is_empty() {
            return Err(Error::Empty("flow batch list".into()));
        }
        for b in batches {
            b.validate()?;
            if b.dim() != self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "batch dim {} vs model dim {}",
                    b.dim(),
                    self.dim
                )));
            }
        }
        let vars = self.layout.bind(tape, &self.params);
        let xt: Vec<_> = batches.iter().map(|b| b.xt.view()).collect();
        let z: Vec<_> = batches.iter().map(|b| b.z.view()).collect();
        let pmt: Vec<_> = batches.iter().map(|b| b.x_pmt.view()).collect();
        let ts: Vec<f64> = batches.iter().map(|b| b.t).collect();
        let out = self.graph(tape, &vars, &xt, &z, &pmt, &ts);
        let targets: Vec<Mat> = batches.iter().map(|b| b.target_field()).collect();
        let views: Vec<_> = targets.iter().map(|m| m.view()).collect();
        let target = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        let nb = batches.len() as f64;
        let mut weights = Vec::with_capacity(target.nrows());
        for b in batches {
            let denom = (b.mask.num_target() * self.dim) as f64 * nb;
            weights.extend(b.mask.values().into_iter().map(|m| m / denom));
        }
        let loss = tape.weighted_sq_err(out, target, weights);
        Ok((vars, loss))
    }

    /// Mean `cfm_loss` over `batches`.
    pub fn loss(&self, batches: &[FlowBatch]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.loss_graph(&mut tape, batches)?;
        Ok(tape.scalar(loss))
    }

    /// Mean `cfm_loss` over `batches` and its exact gradient.
    pub fn loss_and_grad(&self, batches: &[FlowBatch]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (vars, loss) = self.loss_graph(&mut tape, batches)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("flow loss".into()));
        }
        let grads = tape.backward(loss);
        let flat = self.layout.gather(&grads, &vars);
        self.layout.check_finite(&flat, "gradient")?;
        Ok((value, flat))
    }

    /// Max relative error between analytic and central-difference gradients.
    pub fn grad_check(
        &self,
        batches: &[FlowBatch],
        epsilon: f64,
        per_slice: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, analytic) = self.loss_and_grad(batches)?;
        let mut probe = self.clone();
        Ok(gradcheck::check(
            &self.layout,
            &self.params,
            &analytic,
            |p| {
                probe.params.copy_from_slice(p);
                probe.loss(batches).unwrap_or(f64::NAN)
            },
            epsilon,
            per_slice,
            seed,
        ))
    }

    /// One Adam step on `batches`; returns the pre-update loss.
    pub fn train_step(
        &mut self,
        batches: &[FlowBatch],
        state: &mut AdamState,
        adam: &AdamConfig,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(batches)?;
        state.update(&mut self.params, &grads, adam)?;
        Ok(loss)
    }
}

impl VectorField for VectorFieldModel {
    fn field(
        &self,
        xt: ArrayView2<f64>,
        z: ArrayView2<f64>,
        x_pmt: ArrayView2<f64>,
        t: f64,
    ) -> Result<Array2<f64>> {
        let input = self.build_condition(xt, z, x_pmt)?;
        self.forward(input.view(), t)
    }

    fn field_batch(&self, queries: &[FieldQuery<'_>]) -> Result<Vec<Array2<f64>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        for q in queries {
            check_t(q.t)?;
            self.check_inputs(q.xt, q.z, q.x_pmt)?;
        }
        let mut tape = Tape::new();
        let vars = self.layout.bind(&mut tape, &self.params);
        let xt: Vec<_> = queries.iter().map(|q| q.xt).collect();
        let z: Vec<_> = queries.iter().map(|q| q.z).collect();
        let pmt: Vec<_> = queries.iter().map(|q| q.x_pmt).collect();
        let ts: Vec<f64> = queries.iter().map(|q| q.t).collect();
        let out = self.graph(&mut tape, &vars, &xt, &z, &pmt, &ts);
        let out = tape.value(out);
        let mut res = Vec::with_capacity(queries.len());
        let mut start = 0;
        for q in queries {
            let n = q.xt.nrows();
            res.push(out.slice(s![start..start + n, ..]).to_owned());
            start += n;
        }
        Ok(res)
    }

    fn trained_with(&self) -> Option<(ChainMode, PriorMode)> {
        self.trained_with
    }
}

/// One utterance's representations for flow training.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowExample {
    /// `v_1`, `T×H`
    pub semantic: Array2<f64>,
    /// `v_{1:Q}`, `T×H`
    pub complete: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub mode: ChainMode,
    /// Overrides the prior implied by `mode`.
    pub prior: Option<PriorMode>,
    pub steps: usize,
    pub batch_size: usize,
    pub prior_sigma: f64,
    pub sigma_min: f64,
    pub adam: AdamConfig,
}

impl FlowTrainConfig {
    pub fn prior_mode(&self) -> PriorMode {
        self.prior.unwrap_or(self.mode.prior_mode())
    }
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            mode: ChainMode::Implicit,
            prior: None,
            steps: 1000,
            batch_size: 8,
            prior_sigma: 1.0,
            sigma_min: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

/// Samples a minibatch of flow instances from `examples`.
pub fn sample_flow_batches(
    examples: &[FlowExample],
    cfg: &FlowTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FlowBatch>> {
    use rand::Rng;
    (0..cfg.batch_size)
        .map(|_| {
            let ex = &examples[rng.random_range(0..examples.len())];
            FlowBatch::sample(
                cfg.mode,
                cfg.prior_mode(),
                ex.semantic.view(),
                ex.complete.view(),
                cfg.prior_sigma,
                cfg.sigma_min,
                rng,
            )
        })
        .collect()
}

/// Trains `model` in place; returns the per-step loss curve.
pub fn train_flow(
    model: &mut VectorFieldModel,
    examples: &[FlowExample],
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Empty("flow training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(model.param_count());
    let mut curve = Vec::with_capacity(cfg.steps);
    model.set_trained_with(Some((cfg.mode, cfg.prior_mode())));
    for step in 0..cfg.steps {
        let batches = sample_flow_batches(examples, cfg, &mut rng)?;
        let loss = model.train_step(&batches, &mut state, &cfg.adam)?;
        if step % 500 == 0 {
            log::debug!("flow step {step}: loss {loss:.5}");
        }
        curve.push(loss);
    }
    Ok(curve)
}
