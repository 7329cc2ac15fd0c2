//! Fixed-step integration of a learned field from `t = 0` to `t = 1`, and the
//! two chain-mode inference procedures.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::flow::{ChainMode, FieldQuery, PriorMode, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Midpoint,
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverMethod::Euler),
            "midpoint" => Ok(SolverMethod::Midpoint),
            other => Err(Error::InvalidArgument(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverSpec {
    method: SolverMethod,
    steps: usize,
}

impl SolverSpec {
    pub fn new(method: SolverMethod, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("solver steps must be ≥ 1".into()));
        }
        Ok(SolverSpec { method, steps })
    }

    pub fn euler(steps: usize) -> Result<Self> {
        Self::new(SolverMethod::Euler, steps)
    }

    pub fn midpoint(steps: usize) -> Result<Self> {
        Self::new(SolverMethod::Midpoint, steps)
    }

    pub fn method(&self) -> SolverMethod {
        self.method
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One trajectory to integrate. Rows `< clamp_rows` of the state are held at
/// their `x0` values throughout.
#[derive(Clone, Debug)]
pub struct OdeProblem {
    pub x0: Array2<f64>,
    pub z: Array2<f64>,
    pub x_pmt: Array2<f64>,
    pub clamp_rows: usize,
}

fn field_all(
    model: &impl VectorField,
    states: &[Array2<f64>],
    problems: &[OdeProblem],
    t: f64,
) -> Result<Vec<Array2<f64>>> {
    let queries: Vec<FieldQuery<'_>> = states
        .iter()
        .zip(problems)
        .map(|(x, p)| FieldQuery {
            xt: x.view(),
            z: p.z.view(),
            x_pmt: p.x_pmt.view(),
            t,
        })
        .collect();
    let out = model.field_batch(&queries)?;
    for (o, x) in out.iter().zip(states) {
        if o.dim() != x.dim() {
            return Err(Error::DimensionMismatch(format!(
                "field output {:?} vs state {:?}",
                o.dim(),
                x.dim()
            )));
        }
    }
    Ok(out)
}

fn clamp(state: &mut Array2<f64>, p: &OdeProblem) {
    if p.clamp_rows > 0 {
        state
            .slice_mut(s![..p.clamp_rows, ..])
            .assign(&p.x0.slice(s![..p.clamp_rows, ..]));
    }
}

/// Integrates every problem jointly (one batched field evaluation per stage).
pub fn integrate_batch(
    model: &impl VectorField,
    problems: &[OdeProblem],
    solver: SolverSpec,
) -> Result<Vec<Array2<f64>>> {
    for p in problems {
        let d = p.x0.dim();
        if p.z.dim() != d || p.x_pmt.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "x0 {:?}, z {:?}, x_pmt {:?}",
                d,
                p.z.dim(),
                p.x_pmt.dim()
            )));
        }
        if p.clamp_rows > d.0 {
            return Err(Error::OutOfRange("clamp_rows exceeds sequence length".into()));
        }
    }
    let h = 1.0 / solver.steps as f64;
    let mut states: Vec<Array2<f64>> = problems.iter().map(|p| p.x0.clone()).collect();
    for k in 0..solver.steps {
        let t = k as f64 * h;
        match solver.method {
            SolverMethod::Euler => {
                let v = field_all(model, &states, problems, t)?;
                for ((x, v), p) in states.iter_mut().zip(&v).zip(problems) {
                    x.scaled_add(h, v);
                    clamp(x, p);
                }
            }
            SolverMethod::Midpoint => {
                let k1 = field_all(model, &states, problems, t)?;
                let mids: Vec<Array2<f64>> = states
                    .iter()
                    .zip(&k1)
                    .zip(problems)
                    .map(|((x, v), p)| {
                        let mut m = x + &(v * (0.5 * h));
                        clamp(&mut m, p);
                        m
                    })
                    .collect();
                let k2 = field_all(model, &mids, problems, t + 0.5 * h)?;
                for ((x, v), p) in states.iter_mut().zip(&k2).zip(problems) {
                    x.scaled_add(h, v);
                    clamp(x, p);
                }
            }
        }
        if states.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
    }
    Ok(states)
}

/// `φ₁(x₀)` for a single unclamped trajectory.
pub fn integrate(
    model: &impl VectorField,
    x0: &FeatureSequence,
    z: &FeatureSequence,
    x_pmt: &FeatureSequence,
    solver: SolverSpec,
) -> Result<FeatureSequence> {
    let p = OdeProblem {
        x0: x0.frames().clone(),
        z: z.frames().clone(),
        x_pmt: x_pmt.frames().clone(),
        clamp_rows: 0,
    };
    let out = integrate_batch(model, &[p], solver)?.remove(0);
    FeatureSequence::with_frame_rate(out, x0.frame_rate())
}

#[derive(Clone, Debug)]
pub struct InferenceRequest {
    pub mode: ChainMode,
    pub prior: PriorMode,
    /// `v_{1:Q}` of the prompt frames.
    pub prompt_complete: FeatureSequence,
    /// `v_1` of the prompt frames.
    pub prompt_semantic: FeatureSequence,
    /// `v_1` of the frames to generate.
    pub target_semantic: FeatureSequence,
    pub solver: SolverSpec,
    pub seed: u64,
    /// Prior standard deviation; 0 gives the point-mass limit.
    pub prior_sigma: f64,
}

impl InferenceRequest {
    pub fn new(
        mode: ChainMode,
        prompt_complete: FeatureSequence,
        prompt_semantic: FeatureSequence,
        target_semantic: FeatureSequence,
        solver: SolverSpec,
        seed: u64,
    ) -> Self {
        InferenceRequest {
            mode,
            prior: mode.prior_mode(),
            prompt_complete,
            prompt_semantic,
            target_semantic,
            solver,
            seed,
            prior_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.prompt_complete.dim();
        self.prompt_semantic
            .check_same_shape(&self.prompt_complete, "prompt semantic vs complete")?;
        self.target_semantic.check_dim(h, "target semantic")?;
        if !(self.prior_sigma >= 0.0) {
            return Err(Error::InvalidConfig("prior_sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Assembles the clamped ODE problem; the noise stream depends only on `seed`.
    pub fn problem(&self) -> Result<OdeProblem> {
        self.validate()?;
        let p = self.prompt_complete.len();
        let n = self.target_semantic.len();
        let h = self.prompt_complete.dim();
        let z = concatenate(
            Axis(0),
            &[self.prompt_semantic.view(), self.target_semantic.view()],
        )
        .expect("dims checked");
        let mut x_pmt = Array2::zeros((p + n, h));
        x_pmt
            .slice_mut(s![..p, ..])
            .assign(self.prompt_complete.frames());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Array2::from_shape_simple_fn((n, h), || {
            self.prior_sigma * rng.sample::<f64, _>(StandardNormal)
        });
        let prompt_x1 = match self.mode {
            ChainMode::Explicit => self.prompt_complete.frames() - self.prompt_semantic.frames(),
            ChainMode::Implicit => self.prompt_complete.frames().clone(),
        };
        let target_x0 = match self.prior {
            PriorMode::Standard => noise,
            PriorMode::Semantic => self.target_semantic.frames() + &noise,
        };
        let x0 = concatenate(Axis(0), &[prompt_x1.view(), target_x0.view()]).expect("dims");
        Ok(OdeProblem {
            x0,
            z,
            x_pmt,
            clamp_rows: p,
        })
    }

    /// Maps the integrated state to `v̂_{1:Q}` over the target frames.
    pub fn finish(&self, state: ArrayView2<f64>) -> Result<FeatureSequence> {
        let p = self.prompt_complete.len();
        let x1 = state.slice(s![p.., ..]).to_owned();
        let out = match self.mode {
            ChainMode::Explicit => x1 + self.target_semantic.frames(),
            ChainMode::Implicit => x1,
        };
        FeatureSequence::with_frame_rate(out, self.target_semantic.frame_rate())
    }
}

fn check_mode(model: &impl VectorField, req: &InferenceRequest) -> Result<()> {
    match model.trained_with() {
        Some((m, p)) if m != req.mode || p != req.prior => Err(Error::ModeMismatch(format!(
            "model trained as {}/{:?}, request is {}/{:?}",
            m.as_str(),
            p,
            req.mode.as_str(),
            req.prior
        ))),
        _ => Ok(()),
    }
}

/// Generates `v̂_{1:Q}` for the target frames of one request.
pub fn infer_chain(model: &impl VectorField, request: &InferenceRequest) -> Result<FeatureSequence> {
    Ok(infer_chain_batch(model, std::slice::from_ref(request))?.remove(0))
}

/// Runs several requests with a shared solver in one batched integration.
pub fn infer_chain_batch(
    model: &impl VectorField,
    requests: &[InferenceRequest],
) -> Result<Vec<FeatureSequence>> {
    let Some(first) = requests.first() else {
        return Ok(Vec::new());
    };
    for r in requests {
        check_mode(model, r)?;
        if r.solver != first.solver {
            return Err(Error::InvalidArgument("batched requests need one solver".into()));
        }
    }
    let problems = requests
        .iter()
        .map(|r| r.problem())
        .collect::<Result<Vec<_>>>()?;
    let states = integrate_batch(model, &problems, first.solver)?;
    requests
        .iter()
        .zip(&states)
        .map(|(r, s)| r.finish(s.view()))
        .collect()
}

/// Stub fields used by tests and examples.
pub mod stub {
    use super::*;

    /// `v ≡ c` everywhere.
    pub struct ConstantField(pub f64);

    /// `v(x) = x`.
    pub struct LinearField;

    /// `v ≡ 0`.
    pub struct ZeroField;

    impl VectorField for ConstantField {
        fn field(
            &self,
            xt: ArrayView2<f64>,
            _: ArrayView2<f64>,
            _: ArrayView2<f64>,
            _: f64,
        ) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(xt.dim(), self.0))
        }
    }

    impl VectorField for LinearField {
        fn field(
            &self,
            xt: ArrayView2<f64>,
            _: ArrayView2<f64>,
            _: ArrayView2<f64>,
            _: f64,
        ) -> Result<Array2<f64>> {
            Ok(xt.to_owned())
        }
    }

    impl VectorField for ZeroField {
        fn field(
            &self,
            xt: ArrayView2<f64>,
            _: ArrayView2<f64>,
            _: ArrayView2<f64>,
            _: f64,
        ) -> Result<Array2<f64>> {
            Ok(Array2::zeros(xt.dim()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::*;
    use super::*;

    fn seq(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c))).unwrap()
    }

    #[test]
    fn constant_field_is_exact() {
        let x0 = seq(3, 2, |r, c| (r + 2 * c) as f64);
        for method in [SolverMethod::Euler, SolverMethod::Midpoint] {
            for steps in [1, 3, 10] {
                let s = SolverSpec::new(method, steps).unwrap();
                let out = integrate(&ConstantField(0.7), &x0, &x0, &x0, s).unwrap();
                for (a, b) in out.frames().iter().zip(x0.frames().iter()) {
                    assert!((a - (b + 0.7)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn euler_compound_growth() {
        let x0 = seq(1, 1, |_, _| 1.0);
        let out = integrate(&LinearField, &x0, &x0, &x0, SolverSpec::euler(10).unwrap()).unwrap();
        assert!((out.frames()[[0, 0]] - 2.593_742_460_1).abs() < 1e-10);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(SolverSpec::euler(0).is_err());
    }

    #[test]
    fn point_mass_prior_with_zero_field_returns_semantic() {
        let pc = seq(2, 3, |r, c| (r * 3 + c) as f64);
        let ps = seq(2, 3, |r, _| r as f64);
        let ts = seq(4, 3, |r, c| (r as f64) - (c as f64) * 0.5);
        for mode in [ChainMode::Explicit, ChainMode::Implicit] {
            let mut req =
                InferenceRequest::new(mode, pc.clone(), ps.clone(), ts.clone(), SolverSpec::euler(4).unwrap(), 1);
            req.prior_sigma = 0.0;
            assert_eq!(infer_chain(&ZeroField, &req).unwrap(), ts);
        }
    }

    #[test]
    fn prompt_rows_stay_clamped() {
        let pc = seq(3, 2, |r, c| (r + c) as f64);
        let ps = seq(3, 2, |_, c| c as f64);
        let ts = seq(2, 2, |_, _| 1.0);
        let req = InferenceRequest::new(
            ChainMode::Implicit,
            pc.clone(),
            ps,
            ts,
            SolverSpec::midpoint(5).unwrap(),
            9,
        );
        let prob = req.problem().unwrap();
        let out = integrate_batch(&LinearField, &[prob], req.solver).unwrap().remove(0);
        assert_eq!(out.slice(s![..3, ..]), pc.view());
    }
}
