//! Residual vector quantization of feature sequences.
//!
//! Layer 1 carries semantic content (optionally fit against a teacher
//! sequence); layers `2..=Q` quantize what remains. Layers are numbered from 1
//! in the public API.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RvqConfig {
    pub num_layers: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// Blend of teacher into the layer-1 fitting targets: 0 = raw frames, 1 = teacher only.
    pub semantic_teacher_weight: f64,
    pub ema_decay: f64,
    pub kmeans_iters: usize,
    /// Pin code 0 of every codebook to the zero vector. This makes per-layer
    /// residual norms non-increasing for any input.
    pub reserve_zero_code: bool,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            num_layers: 4,
            codebook_size: 16,
            dim: 16,
            semantic_teacher_weight: 1.0,
            ema_decay: 0.9,
            kmeans_iters: 30,
            reserve_zero_code: true,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_layers {} < 2: need a semantic and a perceptual layer",
                self.num_layers
            )));
        }
        if self.codebook_size == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("codebook_size and dim must be ≥ 1".into()));
        }
        if self.reserve_zero_code && self.codebook_size < 2 {
            return Err(Error::InvalidConfig(
                "reserve_zero_code needs codebook_size ≥ 2".into(),
            ));
        }
        if !(self.semantic_teacher_weight >= 0.0) {
            return Err(Error::InvalidConfig("semantic_teacher_weight must be ≥ 0".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidConfig("ema_decay must lie in (0,1)".into()));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::InvalidConfig("kmeans_iters must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K×H`
    pub vectors: Array2<f64>,
    /// EMA cluster sizes.
    pub usage_counts: Vec<f64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Index of the nearest vector; ties go to the lowest index.
    pub fn nearest(&self, x: ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.vectors.outer_iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in x.iter().zip(c.iter()) {
                d += (a - b) * (a - b);
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Map from summed embeddings back to feature space.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Identity,
    /// `y = x·weight + bias`
    Affine {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqModel {
    pub config: RvqConfig,
    pub codebooks: Vec<Codebook>,
    pub decoder: Decoder,
}

/// `Q` token layers over `T` frames.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenStack {
    layers: Vec<Vec<u32>>,
}

impl TokenStack {
    pub fn new(layers: Vec<Vec<u32>>, codebook_size: usize) -> Result<Self> {
        let len = layers.first().map(|l| l.len()).unwrap_or(0);
        if layers.iter().any(|l| l.len() != len) {
            return Err(Error::DimensionMismatch("token layers differ in length".into()));
        }
        if let Some(bad) = layers.iter().flatten().find(|&&id| id as usize >= codebook_size) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} ≥ codebook size {codebook_size}"
            )));
        }
        Ok(TokenStack { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map(|l| l.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens of `layer` (1-based).
    pub fn layer(&self, layer: usize) -> &[u32] {
        &self.layers[layer - 1]
    }

    pub fn layers(&self) -> &[Vec<u32>] {
        &self.layers
    }

    /// Frames `start..end` of every layer.
    pub fn slice_frames(&self, start: usize, end: usize) -> TokenStack {
        TokenStack {
            layers: self.layers.iter().map(|l| l[start..end].to_vec()).collect(),
        }
    }

    /// Time-concatenation of two stacks with equal layer counts.
    pub fn concat(&self, other: &TokenStack) -> Result<TokenStack> {
        if self.num_layers() != other.num_layers() {
            return Err(Error::DimensionMismatch("concat: layer counts differ".into()));
        }
        Ok(TokenStack {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect(),
        })
    }
}

/// Fits one codebook: k-means++ seeding, then full-pass EMA updates with
/// dead-code reseeding.
pub fn fit_codebook(
    points: &Array2<f64>,
    k: usize,
    iters: usize,
    decay: f64,
    reserve_zero: bool,
    rng: &mut impl Rng,
) -> Codebook {
    let (n, dim) = points.dim();
    assert!(n > 0 && k > 0);
    let first_free = usize::from(reserve_zero);
    let mut vectors = Array2::<f64>::zeros((k, dim));

    // k-means++ seeding
    let mut d2 = vec![f64::INFINITY; n];
    let mut chosen = 0;
    if reserve_zero {
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = p.dot(&p);
        }
        chosen = 1;
    }
    for slot in first_free..k {
        let idx = if chosen == 0 {
            rng.random_range(0..n)
        } else {
            weighted_pick(&d2, rng).unwrap_or_else(|| rng.random_range(0..n))
        };
        vectors.row_mut(slot).assign(&points.row(idx));
        let c = vectors.row(slot).to_owned();
        for (i, p) in points.outer_iter().enumerate() {
            let d = sq_dist(p, c.view());
            if d < d2[i] {
                d2[i] = d;
            }
        }
        chosen += 1;
    }

    let mut book = Codebook {
        vectors,
        usage_counts: vec![0.0; k],
    };
    let mut ema_sum = Array2::<f64>::zeros((k, dim));
    let mut ema_count = vec![0.0; k];

    for pass in 0..iters {
        let mut counts = vec![0.0; k];
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut dist = vec![0.0; n];
        for (i, p) in points.outer_iter().enumerate() {
            let j = book.nearest(p);
            counts[j] += 1.0;
            let mut row = sums.row_mut(j);
            row += &p;
            dist[i] = sq_dist(p, book.vectors.row(j));
        }
        for j in first_free..k {
            if pass == 0 {
                ema_count[j] = counts[j];
                ema_sum.row_mut(j).assign(&sums.row(j));
            } else {
                ema_count[j] = decay * ema_count[j] + (1.0 - decay) * counts[j];
                let upd = &ema_sum.row(j) * decay + &sums.row(j) * (1.0 - decay);
                ema_sum.row_mut(j).assign(&upd);
            }
            if ema_count[j] > 0.0 && counts[j] > 0.0 {
                let c = &ema_sum.row(j) / ema_count[j];
                book.vectors.row_mut(j).assign(&c);
            }
        }
        if reserve_zero {
            ema_count[0] = if pass == 0 {
                counts[0]
            } else {
                decay * ema_count[0] + (1.0 - decay) * counts[0]
            };
        }
        // Dead codes move to a frame drawn in proportion to its current error.
        for j in first_free..k {
            if counts[j] == 0.0 {
                if let Some(idx) = weighted_pick(&dist, rng) {
                    book.vectors.row_mut(j).assign(&points.row(idx));
                    dist[idx] = 0.0;
                    ema_count[j] = 0.0;
                    ema_sum.row_mut(j).fill(0.0);
                }
            }
        }
    }
    book.usage_counts = ema_count;
    book
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().filter(|w| w.is_finite()).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w <= 0.0 {
            continue;
        }
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w.is_finite() && w > 0.0)
}

fn stack_frames(seqs: &[FeatureSequence]) -> Array2<f64> {
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal dims checked by caller")
}

/// Trains all `Q` codebooks. Layer 1 is fit against the teacher when given,
/// later layers sequentially against encode-time residuals.
pub fn train_codebooks(
    dataset: &[FeatureSequence],
    teacher: Option<&[FeatureSequence]>,
    config: &RvqConfig,
    seed: u64,
) -> Result<RvqModel> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("rvq training dataset".into()));
    }
    for s in dataset {
        s.check_dim(config.dim, "rvq dataset")?;
    }
    if let Some(t) = teacher {
        if t.len() != dataset.len() {
            return Err(Error::DimensionMismatch(format!(
                "teacher has {} sequences, dataset {}",
                t.len(),
                dataset.len()
            )));
        }
        for (a, b) in dataset.iter().zip(t) {
            a.check_same_shape(b, "teacher alignment")?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = stack_frames(dataset);
    let layer1_targets = match teacher {
        Some(t) => {
            let w = config.semantic_teacher_weight;
            let t = stack_frames(t);
            &frames * (1.0 - w) + &t * w
        }
        None => frames.clone(),
    };

    let mut codebooks = Vec::with_capacity(config.num_layers);
    let mut residual = frames;
    for layer in 0..config.num_layers {
        let fit_on = if layer == 0 { &layer1_targets } else { &residual };
        let book = fit_codebook(
            fit_on,
            config.codebook_size,
            config.kmeans_iters,
            config.ema_decay,
            config.reserve_zero_code,
            &mut rng,
        );
        for mut r in residual.outer_iter_mut() {
            let j = book.nearest(r.view());
            r -= &book.vectors.row(j);
        }
        codebooks.push(book);
    }
    Ok(RvqModel {
        config: config.clone(),
        codebooks,
        decoder: Decoder::Identity,
    })
}

impl RvqModel {
    pub fn num_layers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebooks.len() != self.config.num_layers {
            return Err(Error::InvalidConfig(format!(
                "{} codebooks for num_layers {}",
                self.codebooks.len(),
                self.config.num_layers
            )));
        }
        for (i, c) in self.codebooks.iter().enumerate() {
            if c.dim() != self.config.dim || c.size() != self.config.codebook_size {
                return Err(Error::InvalidConfig(format!("codebook {} has wrong shape", i + 1)));
            }
            if c.vectors.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("codebook {}", i + 1)));
            }
            if c.usage_counts.iter().any(|&u| !(u >= 0.0)) {
                return Err(Error::InvalidConfig(format!(
                    "codebook {} has negative usage",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Nearest-neighbour residual quantization of every frame.
    pub fn encode(&self, x: &FeatureSequence) -> Result<TokenStack> {
        Ok(self.encode_with_residuals(x)?.0)
    }

    /// Tokens plus `‖r_i‖₂` for each frame: column `i` is the residual entering
    /// layer `i+1`, the last column the final residual.
    pub fn encode_with_residuals(&self, x: &FeatureSequence) -> Result<(TokenStack, Array2<f64>)> {
        x.check_dim(self.dim(), "encode")?;
        let q = self.num_layers();
        let mut layers = vec![Vec::with_capacity(x.len()); q];
        let mut norms = Array2::zeros((x.len(), q + 1));
        for (t, frame) in x.frames().outer_iter().enumerate() {
            let mut r = frame.to_owned();
            for (i, book) in self.codebooks.iter().enumerate() {
                norms[[t, i]] = r.dot(&r).sqrt();
                let j = book.nearest(r.view());
                layers[i].push(j as u32);
                r -= &book.vectors.row(j);
            }
            norms[[t, q]] = r.dot(&r).sqrt();
        }
        Ok((TokenStack { layers }, norms))
    }

    /// Codebook lookup for one layer (1-based).
    pub fn embed_layer(&self, tokens: &[u32], layer: usize) -> Result<FeatureSequence> {
        if layer == 0 || layer > self.num_layers() {
            return Err(Error::OutOfRange(format!(
                "layer {layer} outside 1..={}",
                self.num_layers()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        let book = &self.codebooks[layer - 1];
        let mut out = Array2::zeros((tokens.len(), self.dim()));
        for (t, &id) in tokens.iter().enumerate() {
            if id as usize >= book.size() {
                return Err(Error::OutOfRange(format!(
                    "token id {id} ≥ codebook size {}",
                    book.size()
                )));
            }
            out.row_mut(t).assign(&book.vectors.row(id as usize));
        }
        FeatureSequence::new(out)
    }

    /// `Σ_{i=from}^{to} embed_layer(stack.layer(i), i)`, inclusive and 1-based.
    pub fn sum_layers(
        &self,
        stack: &TokenStack,
        from_layer: usize,
        to_layer: usize,
    ) -> Result<FeatureSequence> {
        if from_layer == 0 || from_layer > to_layer || to_layer > self.num_layers() {
            return Err(Error::OutOfRange(format!(
                "layer range {from_layer}..={to_layer} invalid for Q={}",
                self.num_layers()
            )));
        }
        if stack.num_layers() != self.num_layers() {
            return Err(Error::DimensionMismatch(format!(
                "stack has {} layers, model {}",
                stack.num_layers(),
                self.num_layers()
            )));
        }
        let mut acc = self.embed_layer(stack.layer(from_layer), from_layer)?;
        for layer in from_layer + 1..=to_layer {
            acc = &acc + &self.embed_layer(stack.layer(layer), layer)?;
        }
        Ok(acc)
    }

    /// Maps summed embeddings back to feature space.
    pub fn decode(&self, v: &FeatureSequence) -> Result<FeatureSequence> {
        v.check_dim(self.dim(), "decode")?;
        match &self.decoder {
            Decoder::Identity => Ok(v.clone()),
            Decoder::Affine { weight, bias } => {
                let out = v.frames().dot(weight) + bias;
                FeatureSequence::with_frame_rate(out, v.frame_rate())
            }
        }
    }

    /// Least-squares fit of an affine decoder on `(summed embedding, original)` pairs.
    pub fn fit_affine_decoder(&mut self, pairs: &[(FeatureSequence, FeatureSequence)]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Empty("decoder training pairs".into()));
        }
        let h = self.dim();
        for (a, b) in pairs {
            a.check_dim(h, "decoder input")?;
            a.check_same_shape(b, "decoder pair")?;
        }
        let rows: usize = pairs.iter().map(|(a, _)| a.len()).sum();
        let mut design = nalgebra::DMatrix::<f64>::zeros(rows, h + 1);
        let mut target = nalgebra::DMatrix::<f64>::zeros(rows, h);
        let mut r = 0;
        for (a, b) in pairs {
            for t in 0..a.len() {
                for c in 0..h {
                    design[(r, c)] = a.frames()[[t, c]];
                    target[(r, c)] = b.frames()[[t, c]];
                }
                design[(r, h)] = 1.0;
                r += 1;
            }
        }
        let svd = design.svd(true, true);
        let sol = svd
            .solve(&target, 1e-12)
            .map_err(|e| Error::InvalidArgument(format!("decoder least squares: {e}")))?;
        let weight = Array2::from_shape_fn((h, h), |(i, j)| sol[(i, j)]);
        let bias = Array1::from_shape_fn(h, |j| sol[(h, j)]);
        self.decoder = Decoder::Affine { weight, bias };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn seq(m: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(m).unwrap()
    }

    fn random_seqs(n: usize, len: usize, dim: usize, seed: u64) -> Vec<FeatureSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| seq(Array2::from_shape_fn((len, dim), |_| normal.sample(&mut rng))))
            .collect()
    }

    #[test]
    fn config_rejects_single_layer() {
        let cfg = RvqConfig {
            num_layers: 1,
            ..RvqConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_cluster_fixed_point() {
        let c = array![1.5, -2.0, 0.25];
        let frames = Array2::from_shape_fn((20, 3), |(_, j)| c[j]);
        let cfg = RvqConfig {
            num_layers: 2,
            codebook_size: 1,
            dim: 3,
            reserve_zero_code: false,
            ..RvqConfig::default()
        };
        let m = train_codebooks(&[seq(frames)], None, &cfg, 3).unwrap();
        for j in 0..3 {
            assert!((m.codebooks[0].vectors[[0, j]] - c[j]).abs() < 1e-12);
            assert!(m.codebooks[1].vectors[[0, j]].abs() < 1e-12);
        }
    }

    #[test]
    fn errors_on_bad_inputs() {
        let cfg = RvqConfig {
            dim: 3,
            ..RvqConfig::default()
        };
        assert!(matches!(train_codebooks(&[], None, &cfg, 0), Err(Error::Empty(_))));
        let wrong = random_seqs(1, 4, 2, 0);
        assert!(matches!(
            train_codebooks(&wrong, None, &cfg, 0),
            Err(Error::DimensionMismatch(_))
        ));
        let data = random_seqs(2, 4, 3, 0);
        let teacher = random_seqs(1, 4, 3, 1);
        assert!(matches!(
            train_codebooks(&data, Some(&teacher), &cfg, 0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_seqs(5, 10, 4, 11);
        let cfg = RvqConfig {
            dim: 4,
            codebook_size: 6,
            num_layers: 3,
            ..RvqConfig::default()
        };
        let a = train_codebooks(&data, None, &cfg, 42).unwrap();
        let b = train_codebooks(&data, None, &cfg, 42).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    fn handmade_model() -> RvqModel {
        let cfg = RvqConfig {
            num_layers: 3,
            codebook_size: 5,
            dim: 2,
            ..RvqConfig::default()
        };
        let mut books = Vec::new();
        for l in 0..3 {
            let v = Array2::from_shape_fn((5, 2), |(k, j)| {
                if k == 0 {
                    0.0
                } else {
                    (k as f64 + 0.5 * j as f64) / (l as f64 + 1.0)
                }
            });
            books.push(Codebook {
                vectors: v,
                usage_counts: vec![1.0; 5],
            });
        }
        RvqModel {
            config: cfg,
            codebooks: books,
            decoder: Decoder::Identity,
        }
    }

    #[test]
    fn exact_codeword_encodes_to_it_then_zeros() {
        let m = handmade_model();
        let frame = m.codebooks[0].vectors.row(3).to_owned().insert_axis(Axis(0));
        let stack = m.encode(&seq(frame)).unwrap();
        assert_eq!(stack.layers(), &[vec![3], vec![0], vec![0]]);
    }

    #[test]
    fn embed_and_sum_contracts() {
        let m = handmade_model();
        let x = random_seqs(1, 7, 2, 5).remove(0);
        let stack = m.encode(&x).unwrap();
        let zeros = m.embed_layer(&[0; 4], 2).unwrap();
        assert!(zeros.frames().iter().all(|&v| v == 0.0));
        assert_eq!(
            m.sum_layers(&stack, 2, 2).unwrap(),
            m.embed_layer(stack.layer(2), 2).unwrap()
        );
        let all = m.sum_layers(&stack, 1, 3).unwrap();
        let split = &m.sum_layers(&stack, 1, 1).unwrap() + &m.sum_layers(&stack, 2, 3).unwrap();
        assert_eq!(all, split);
        assert!(m.embed_layer(&[5], 1).is_err());
        assert!(m.embed_layer(&[0], 4).is_err());
        assert!(m.sum_layers(&stack, 2, 1).is_err());
        assert!(m.sum_layers(&stack, 0, 1).is_err());
    }

    #[test]
    fn identity_decoder_passes_through() {
        let m = handmade_model();
        let x = random_seqs(1, 3, 2, 9).remove(0);
        assert_eq!(m.decode(&x).unwrap(), x);
        assert!(m.decode(&random_seqs(1, 3, 3, 9)[0]).is_err());
    }

    #[test]
    fn token_stack_validation() {
        assert!(TokenStack::new(vec![vec![0, 1], vec![1]], 4).is_err());
        assert!(TokenStack::new(vec![vec![0, 4]], 4).is_err());
        let s = TokenStack::new(vec![vec![0, 1, 2], vec![3, 2, 1]], 4).unwrap();
        assert_eq!(s.slice_frames(1, 3).layer(2), &[2, 1]);
        assert_eq!(s.slice_frames(0, 1).concat(&s.slice_frames(1, 3)).unwrap(), s);
    }
}
