//! Synthetic corpus with known semantic and perceptual factors.
//!
//! Each frame is `A·onehot(state) + B·speaker + ε`. The columns of `A` live in
//! a semantic subspace and the speaker vectors in its orthogonal complement,
//! so the two factors can be separated exactly when `ε = 0`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::harness::metrics::SemanticProjector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_semantic_states: usize,
    pub num_speakers: usize,
    pub dim: usize,
    pub transition_temperature: f64,
    pub noise_sigma: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub dataset_size: usize,
    pub seed: u64,
    /// Norm of every semantic column of `A`.
    pub semantic_scale: f64,
    /// Norm of every speaker offset `B·speaker`.
    pub speaker_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_semantic_states: 8,
            num_speakers: 8,
            dim: 16,
            transition_temperature: 1.0,
            noise_sigma: 0.05,
            seq_len_min: 24,
            seq_len_max: 24,
            dataset_size: 256,
            seed: 0,
            semantic_scale: 3.0,
            speaker_scale: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_semantic_states < 2 || self.num_speakers < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 semantic states and 2 speakers".into(),
            ));
        }
        if self.dim < 2 {
            return Err(Error::InvalidConfig("dim must be ≥ 2".into()));
        }
        if !(self.transition_temperature > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "transition_temperature must be > 0 and noise_sigma ≥ 0".into(),
            ));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::InvalidConfig(format!(
                "seq_len range {}..={} is empty",
                self.seq_len_min, self.seq_len_max
            )));
        }
        if self.dataset_size == 0 {
            return Err(Error::InvalidConfig("dataset_size must be ≥ 1".into()));
        }
        if !(self.semantic_scale > 0.0) || !(self.speaker_scale >= 0.0) {
            return Err(Error::InvalidConfig("scales must be positive".into()));
        }
        Ok(())
    }

    /// Dimension of the semantic subspace.
    pub fn semantic_dim(&self) -> usize {
        self.num_semantic_states.min(self.dim / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub semantic_states: Vec<usize>,
    pub speaker_id: usize,
    pub features: FeatureSequence,
    pub teacher_semantic: FeatureSequence,
}

impl SynthSample {
    pub fn len(&self) -> usize {
        self.semantic_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic_states.is_empty()
    }
}

/// Fixed generative parameters drawn once from the config seed.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    config: SynthConfig,
    /// `H×d_sem`, orthonormal columns.
    semantic_basis: Array2<f64>,
    /// `H×S`; column `s` is the semantic vector of state `s`.
    a: Array2<f64>,
    /// `num_speakers×H` speaker offsets.
    speakers: Array2<f64>,
    /// Row-stochastic `S×S`.
    transitions: Array2<f64>,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.dim;
        let s = config.num_semantic_states;
        let d_sem = config.semantic_dim();
        let d_perc = h - d_sem;

        let basis = normal_matrix(h, h, &mut rng).qr().q();
        let u_sem = basis.columns(0, d_sem).into_owned();
        let u_perc = basis.columns(d_sem, d_perc).into_owned();

        // Equal singular values: rows of `m` orthonormal, columns of equal expected norm.
        let m = normal_matrix(d_sem, s, &mut rng);
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let mut m = u * vt;
        for mut c in m.column_iter_mut() {
            let n = c.norm();
            c *= config.semantic_scale / n;
        }
        let a_na = &u_sem * m;

        let mut speakers = Array2::zeros((config.num_speakers, h));
        for k in 0..config.num_speakers {
            let v = normal_matrix(d_perc, 1, &mut rng);
            let v = &u_perc * (v.clone() * (config.speaker_scale / v.norm()));
            for j in 0..h {
                speakers[[k, j]] = v[(j, 0)];
            }
        }

        let mut transitions = Array2::zeros((s, s));
        for i in 0..s {
            let logits: Vec<f64> = (0..s)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / config.transition_temperature)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..s {
                transitions[[i, j]] = (logits[j] - mx).exp() / z;
            }
        }

        Ok(SynthWorld {
            config: config.clone(),
            semantic_basis: Array2::from_shape_fn((h, d_sem), |(r, c)| u_sem[(r, c)]),
            a: Array2::from_shape_fn((h, s), |(r, c)| a_na[(r, c)]),
            speakers,
            transitions,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn semantic_matrix(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn speaker_vectors(&self) -> &Array2<f64> {
        &self.speakers
    }

    pub fn transitions(&self) -> &Array2<f64> {
        &self.transitions
    }

    pub fn projector(&self) -> SemanticProjector {
        SemanticProjector::new(self.semantic_basis.clone())
    }

    /// Semantic vector of `state`.
    pub fn semantic_vector(&self, state: usize) -> Array1<f64> {
        self.a.column(state).to_owned()
    }

    /// Draws sample number `index` of the stream; independent of other indices.
    pub fn sample(&self, index: u64) -> SynthSample {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index.wrapping_add(1));
        let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let speaker_id = rng.random_range(0..cfg.num_speakers);
        self.render(&self.walk(len, &mut rng), speaker_id, &mut rng)
    }

    /// Markov walk with a uniform initial state.
    pub fn walk(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let s = self.config.num_semantic_states;
        let mut states = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..s);
        states.push(cur);
        for _ in 1..len {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = s - 1;
            for j in 0..s {
                acc += self.transitions[[cur, j]];
                if u < acc {
                    next = j;
                    break;
                }
            }
            cur = next;
            states.push(cur);
        }
        states
    }

    /// Features for a given state sequence and speaker.
    pub fn render(&self, states: &[usize], speaker_id: usize, rng: &mut impl Rng) -> SynthSample {
        let h = self.config.dim;
        let len = states.len();
        let mut teacher = Array2::zeros((len, h));
        for (t, &s) in states.iter().enumerate() {
            teacher.row_mut(t).assign(&self.a.column(s));
        }
        let mut feats = &teacher + &self.speakers.row(speaker_id);
        if self.config.noise_sigma > 0.0 {
            feats.mapv_inplace(|v| v + self.config.noise_sigma * rng.sample::<f64, _>(StandardNormal));
        }
        SynthSample {
            semantic_states: states.to_vec(),
            speaker_id,
            features: FeatureSequence::new(feats).expect("finite by construction"),
            teacher_semantic: FeatureSequence::new(teacher).expect("finite by construction"),
        }
    }

    /// Samples `first..first+count` of the stream.
    pub fn generate(&self, first: u64, count: usize) -> Vec<SynthSample> {
        (0..count as u64).map(|i| self.sample(first + i)).collect()
    }
}

/// Training split: the first `dataset_size` samples of the stream.
pub fn gen_dataset(config: &SynthConfig) -> Result<Vec<SynthSample>> {
    let world = SynthWorld::new(config)?;
    Ok(world.generate(0, config.dataset_size))
}

/// Stream offset used for held-out samples.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;
