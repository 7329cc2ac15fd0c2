//! Conditional flow matching: priors, OT paths, temporal masks, and the masked
//! regression loss.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    /// Standard prior; flows to the perceptual part `v_{2:Q}` and adds `v_1` back afterwards.
    Explicit,
    /// Semantic prior centred on `v_1`; flows to the complete representation `v_{1:Q}`.
    Implicit,
}

impl ChainMode {
    pub fn prior_mode(self) -> PriorMode {
        match self {
            ChainMode::Explicit => PriorMode::Standard,
            ChainMode::Implicit => PriorMode::Semantic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChainMode::Explicit => "explicit",
            ChainMode::Implicit => "implicit",
        }
    }
}

impl std::str::FromStr for ChainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "explicit" => Ok(ChainMode::Explicit),
            "implicit" => Ok(ChainMode::Implicit),
            other => Err(Error::InvalidArgument(format!("unknown chain mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Standard,
    Semantic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    mode: PriorMode,
    mean: Option<FeatureSequence>,
    sigma: f64,
    sigma_min: f64,
}

impl PriorSpec {
    pub fn standard(sigma: f64, sigma_min: f64) -> Result<Self> {
        Self::new(PriorMode::Standard, None, sigma, sigma_min)
    }

    pub fn semantic(mean: FeatureSequence, sigma: f64, sigma_min: f64) -> Result<Self> {
        Self::new(PriorMode::Semantic, Some(mean), sigma, sigma_min)
    }

    pub fn new(
        mode: PriorMode,
        mean: Option<FeatureSequence>,
        sigma: f64,
        sigma_min: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("prior sigma {sigma} must be > 0")));
        }
        Self::build(mode, mean, sigma, sigma_min)
    }

    /// The `σ → 0` limit: every sample equals the mean (zeros for Standard).
    pub fn point_mass(mode: PriorMode, mean: Option<FeatureSequence>) -> Result<Self> {
        Self::build(mode, mean, 0.0, 0.0)
    }

    fn build(
        mode: PriorMode,
        mean: Option<FeatureSequence>,
        sigma: f64,
        sigma_min: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&sigma_min) {
            return Err(Error::InvalidConfig(format!("sigma_min {sigma_min} outside [0,1)")));
        }
        if mode == PriorMode::Semantic && mean.is_none() {
            return Err(Error::InvalidConfig("semantic prior needs a mean".into()));
        }
        Ok(PriorSpec {
            mode,
            mean,
            sigma,
            sigma_min,
        })
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    pub fn mean(&self) -> Option<&FeatureSequence> {
        self.mean.as_ref()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }
}

/// Draws `x₀ ~ N(mean, σ²I)` with shape `(T, H)`.
pub fn sample_prior(
    spec: &PriorSpec,
    shape: (usize, usize),
    rng: &mut impl Rng,
) -> Result<FeatureSequence> {
    if shape.0 == 0 {
        return Err(Error::Empty("prior sample length".into()));
    }
    let mut out = Array2::zeros(shape);
    if spec.mode == PriorMode::Semantic {
        let mean = spec.mean.as_ref().expect("checked at construction");
        if mean.frames().dim() != shape {
            return Err(Error::DimensionMismatch(format!(
                "prior mean {:?} vs requested {:?}",
                mean.frames().dim(),
                shape
            )));
        }
        out.assign(mean.frames());
    }
    if spec.sigma > 0.0 {
        out.mapv_inplace(|m| m + spec.sigma * rng.sample::<f64, _>(StandardNormal));
    }
    FeatureSequence::new(out)
}

/// Binary prompt/target split over `len` frames: positions `< n` are prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    n: usize,
    len: usize,
}

impl TemporalMask {
    pub fn new(n: usize, len: usize) -> Result<Self> {
        if n >= len {
            return Err(Error::InvalidArgument(format!(
                "mask split {n} leaves no target frame in length {len}"
            )));
        }
        Ok(TemporalMask { n, len })
    }

    pub fn split(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_target(&self) -> usize {
        self.len - self.n
    }

    pub fn value(&self, i: usize) -> f64 {
        if i >= self.n {
            1.0
        } else {
            0.0
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.value(i)).collect()
    }
}

/// `n` uniform on `{0, …, N−1}`.
pub fn sample_mask(len: usize, rng: &mut impl Rng) -> Result<TemporalMask> {
    if len == 0 {
        return Err(Error::InvalidArgument("mask length must be ≥ 1".into()));
    }
    TemporalMask::new(rng.random_range(0..len), len)
}

fn check_pair(x0: &ArrayView2<f64>, x1: &ArrayView2<f64>) -> Result<()> {
    if x0.dim() != x1.dim() {
        return Err(Error::DimensionMismatch(format!(
            "x0 {:?} vs x1 {:?}",
            x0.dim(),
            x1.dim()
        )));
    }
    Ok(())
}

/// `x_t = (1 − (1 − σ_min)t)·x₀ + t·x₁`
pub fn ot_path_point(
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    t: f64,
    sigma_min: f64,
) -> Result<Array2<f64>> {
    check_pair(&x0, &x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("flow step t={t} outside [0,1]")));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    Ok(&x0 * a + &x1 * t)
}

/// `u = x₁ − (1 − σ_min)·x₀`, constant in `t`.
pub fn ot_target_field(
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    sigma_min: f64,
) -> Result<Array2<f64>> {
    check_pair(&x0, &x1)?;
    Ok(&x1 - &(&x0 * (1.0 - sigma_min)))
}

/// One CFM training instance. All matrices are `T×H`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub mode: ChainMode,
    pub prior: PriorMode,
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: f64,
    pub xt: Array2<f64>,
    pub z: Array2<f64>,
    pub mask: TemporalMask,
    pub x_pmt: Array2<f64>,
    pub x_tgt: Array2<f64>,
    pub sigma_min: f64,
}

impl FlowBatch {
    /// Builds a batch from the semantic part `v1` and the complete
    /// representation `v_full` of one utterance. Prompt rows of `x₀` are set to
    /// `x₁`, matching the clamped prompt at inference.
    pub fn build(
        mode: ChainMode,
        prior: PriorMode,
        v1: ArrayView2<f64>,
        v_full: ArrayView2<f64>,
        mask: TemporalMask,
        t: f64,
        noise: ArrayView2<f64>,
        sigma_min: f64,
    ) -> Result<Self> {
        check_pair(&v1, &v_full)?;
        check_pair(&v1, &noise)?;
        if mask.len() != v1.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} vs {} frames",
                mask.len(),
                v1.nrows()
            )));
        }
        let x1 = match mode {
            ChainMode::Explicit => &v_full - &v1,
            ChainMode::Implicit => v_full.to_owned(),
        };
        let mut x0 = match prior {
            PriorMode::Standard => noise.to_owned(),
            PriorMode::Semantic => &v1 + &noise,
        };
        let n = mask.split();
        x0.slice_mut(s![..n, ..]).assign(&x1.slice(s![..n, ..]));
        let xt = ot_path_point(x0.view(), x1.view(), t, sigma_min)?;
        let mut x_pmt = v_full.to_owned();
        x_pmt.slice_mut(s![n.., ..]).fill(0.0);
        let mut x_tgt = x1.clone();
        x_tgt.slice_mut(s![..n, ..]).fill(0.0);
        Ok(FlowBatch {
            mode,
            prior,
            x0,
            x1,
            t,
            xt,
            z: v1.to_owned(),
            mask,
            x_pmt,
            x_tgt,
            sigma_min,
        })
    }

    /// Draws mask, `t`, and prior noise (`σ`) for one utterance.
    pub fn sample(
        mode: ChainMode,
        prior: PriorMode,
        v1: ArrayView2<f64>,
        v_full: ArrayView2<f64>,
        sigma: f64,
        sigma_min: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mask = sample_mask(v1.nrows(), rng)?;
        let t: f64 = rng.random();
        let noise = Array2::from_shape_simple_fn(v1.dim(), || {
            sigma * rng.sample::<f64, _>(StandardNormal)
        });
        Self::build(mode, prior, v1, v_full, mask, t, noise.view(), sigma_min)
    }

    pub fn len(&self) -> usize {
        self.x1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x1.ncols()
    }

    /// Regression target `u_t(x_t | x₁)`.
    pub fn target_field(&self) -> Array2<f64> {
        ot_target_field(self.x0.view(), self.x1.view(), self.sigma_min).expect("shapes checked")
    }

    /// The complete representation whose prompt rows make up `x_pmt`.
    fn complete(&self) -> Array2<f64> {
        match self.mode {
            ChainMode::Explicit => &self.x1 + &self.z,
            ChainMode::Implicit => self.x1.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.x1.dim();
        for (name, m) in [
            ("x0", &self.x0),
            ("xt", &self.xt),
            ("z", &self.z),
            ("x_pmt", &self.x_pmt),
            ("x_tgt", &self.x_tgt),
        ] {
            if m.dim() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "{name} {:?} vs x1 {shape:?}",
                    m.dim()
                )));
            }
        }
        if self.mask.len() != shape.0 {
            return Err(Error::DimensionMismatch("mask length".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::OutOfRange(format!("t={}", self.t)));
        }
        let complete = self.complete();
        let n = self.mask.split();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let (pmt, tgt) = if r < n {
                    (complete[[r, c]], 0.0)
                } else {
                    (0.0, self.x1[[r, c]])
                };
                // Explicit mode rebuilds the prompt as (v − v₁) + v₁, which can differ in the last bit.
                let slack = 1e-12 * (1.0 + pmt.abs());
                if (self.x_pmt[[r, c]] - pmt).abs() > slack || self.x_tgt[[r, c]] != tgt {
                    return Err(Error::InvalidArgument(format!(
                        "x_pmt/x_tgt disagree with the mask at ({r},{c})"
                    )));
                }
            }
        }
        let xt = ot_path_point(self.x0.view(), self.x1.view(), self.t, self.sigma_min)?;
        if xt != self.xt {
            return Err(Error::InvalidArgument("xt is not the OT interpolant".into()));
        }
        Ok(())
    }
}

/// Mean over rows with mask 1 and all columns of `(pred − target)²`; 0 for an
/// empty support.
pub fn masked_mse(pred: ArrayView2<f64>, target: ArrayView2<f64>, mask: &[f64]) -> f64 {
    assert_eq!(pred.dim(), target.dim());
    assert_eq!(mask.len(), pred.nrows());
    let rows = mask.iter().filter(|&&m| m != 0.0).count();
    if rows == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (r, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (a, b) in pred.row(r).iter().zip(target.row(r).iter()) {
            acc += m * (a - b) * (a - b);
        }
    }
    acc / (rows * pred.ncols()) as f64
}

/// Anything that predicts a vector field for a set of flow states.
pub trait VectorField {
    /// Field at `(x_t, z, x_pmt, t)`; all inputs `T×H`, output `T×H`.
    fn field(
        &self,
        xt: ArrayView2<f64>,
        z: ArrayView2<f64>,
        x_pmt: ArrayView2<f64>,
        t: f64,
    ) -> Result<Array2<f64>>;

    /// Evaluates several independent states; the default loops.
    fn field_batch(&self, queries: &[FieldQuery<'_>]) -> Result<Vec<Array2<f64>>> {
        queries
            .iter()
            .map(|q| self.field(q.xt, q.z, q.x_pmt, q.t))
            .collect()
    }

    /// Chain mode and prior the field was trained with, when known.
    fn trained_with(&self) -> Option<(ChainMode, PriorMode)> {
        None
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FieldQuery<'a> {
    pub xt: ArrayView2<'a, f64>,
    pub z: ArrayView2<'a, f64>,
    pub x_pmt: ArrayView2<'a, f64>,
    pub t: f64,
}

/// Masked CFM loss of `model` on one batch.
pub fn cfm_loss(model: &impl VectorField, batch: &FlowBatch) -> Result<f64> {
    batch.validate()?;
    let pred = model.field(batch.xt.view(), batch.z.view(), batch.x_pmt.view(), batch.t)?;
    if pred.dim() != batch.x1.dim() {
        return Err(Error::DimensionMismatch("field output shape".into()));
    }
    Ok(masked_mse(
        pred.view(),
        batch.target_field().view(),
        &batch.mask.values(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_path_and_field() {
        let x0 = array![[1.0]];
        let x1 = array![[3.0]];
        assert_eq!(ot_path_point(x0.view(), x1.view(), 0.5, 0.0).unwrap()[[0, 0]], 2.0);
        let v = ot_path_point(x0.view(), x1.view(), 0.5, 0.1).unwrap()[[0, 0]];
        assert!((v - 2.05).abs() < 1e-15);
        assert_eq!(ot_target_field(x0.view(), x1.view(), 0.0).unwrap()[[0, 0]], 2.0);
        assert!(ot_path_point(x0.view(), x1.view(), 1.5, 0.0).is_err());
        assert!(ot_target_field(x0.view(), array![[1.0, 2.0]].view(), 0.0).is_err());
    }

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(1, &mut rng).unwrap();
        assert_eq!(m.values(), vec![1.0]);
        assert_eq!(TemporalMask::new(2, 4).unwrap().values(), vec![0.0, 0.0, 1.0, 1.0]);
        assert!(TemporalMask::new(4, 4).is_err());
        assert!(sample_mask(0, &mut rng).is_err());
    }

    #[test]
    fn prior_validation() {
        assert!(PriorSpec::standard(0.0, 0.0).is_err());
        assert!(PriorSpec::standard(1.0, 1.0).is_err());
        assert!(PriorSpec::new(PriorMode::Semantic, None, 1.0, 0.0).is_err());
        let mean = FeatureSequence::new(array![[1.0, 2.0]]).unwrap();
        let spec = PriorSpec::semantic(mean, 1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_prior(&spec, (2, 2), &mut rng).is_err());
    }

    #[test]
    fn batch_invariants_hold_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v1 = Array2::from_shape_fn((6, 3), |(r, c)| (r + c) as f64);
        let vf = Array2::from_shape_fn((6, 3), |(r, c)| (r * c) as f64 - 1.0);
        for mode in [ChainMode::Explicit, ChainMode::Implicit] {
            let b = FlowBatch::sample(mode, mode.prior_mode(), v1.view(), vf.view(), 1.0, 0.05, &mut rng).unwrap();
            b.validate().unwrap();
            assert_eq!(b.z, v1);
        }
    }

    struct Zero;
    impl VectorField for Zero {
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

    #[test]
    fn empty_support_is_zero() {
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        let t = Array2::zeros((2, 2));
        assert_eq!(masked_mse(p.view(), t.view(), &[0.0, 0.0]), 0.0);
        assert_eq!(masked_mse(p.view(), t.view(), &[0.0, 1.0]), 12.5);
    }

    #[test]
    fn corrupt_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Array2::from_elem((3, 2), 1.0);
        let mut b =
            FlowBatch::sample(ChainMode::Implicit, PriorMode::Semantic, v.view(), v.view(), 1.0, 0.0, &mut rng).unwrap();
        b.xt[[0, 0]] += 1.0;
        assert!(cfm_loss(&Zero, &b).is_err());
    }
}
