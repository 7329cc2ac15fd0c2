//! Proxy metrics: semantic accuracy via re-encoding, perceptual similarity via
//! the time-averaged component outside the semantic subspace.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rvq::RvqModel;

/// Orthogonal projection onto the complement of a semantic subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticProjector {
    /// `H×d`, orthonormal columns spanning the semantic subspace.
    basis: Array2<f64>,
}

impl SemanticProjector {
    pub fn new(basis: Array2<f64>) -> Self {
        SemanticProjector { basis }
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    /// `x − U Uᵀ x` for every frame.
    pub fn reject(&self, frames: &Array2<f64>) -> Array2<f64> {
        let coords = frames.dot(&self.basis);
        frames - &coords.dot(&self.basis.t())
    }
}

/// Layer-1 token → semantic state, by majority vote over reference data.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStateMap {
    map: Vec<Option<usize>>,
}

impl TokenStateMap {
    pub fn from_vec(map: Vec<Option<usize>>) -> Self {
        TokenStateMap { map }
    }

    /// Ties go to the lowest state; tokens never seen map to nothing.
    pub fn fit<'a>(
        rvq: &RvqModel,
        data: impl IntoIterator<Item = (&'a FeatureSequence, &'a [usize])>,
        num_states: usize,
    ) -> Result<Self> {
        let k = rvq.codebook_size();
        let mut counts = vec![vec![0usize; num_states]; k];
        for (feats, states) in data {
            if feats.len() != states.len() {
                return Err(Error::DimensionMismatch("features vs states length".into()));
            }
            let tokens = rvq.encode(feats)?;
            for (&tok, &s) in tokens.layer(1).iter().zip(states) {
                if s >= num_states {
                    return Err(Error::OutOfRange(format!("state {s}")));
                }
                counts[tok as usize][s] += 1;
            }
        }
        let map = counts
            .into_iter()
            .map(|c| {
                let (best, n) = c
                    .iter()
                    .enumerate()
                    .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
                (n > 0).then_some(best)
            })
            .collect();
        Ok(TokenStateMap { map })
    }

    pub fn state_of(&self, token: u32) -> Option<usize> {
        self.map.get(token as usize).copied().flatten()
    }
}

/// Fraction of frames whose re-encoded layer-1 token maps to the right state.
pub fn semantic_accuracy(
    rvq: &RvqModel,
    generated: &FeatureSequence,
    target_states: &[usize],
    map: &TokenStateMap,
) -> Result<f64> {
    if generated.len() != target_states.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} generated frames vs {} target states",
            generated.len(),
            target_states.len()
        )));
    }
    let tokens = rvq.encode(generated)?;
    let hits = tokens
        .layer(1)
        .iter()
        .zip(target_states)
        .filter(|(&tok, &s)| map.state_of(tok) == Some(s))
        .count();
    Ok(hits as f64 / target_states.len() as f64)
}

fn perceptual_embedding(x: &FeatureSequence, proj: &SemanticProjector) -> Array1<f64> {
    proj.reject(x.frames())
        .mean_axis(Axis(0))
        .expect("non-empty sequence")
}

/// Cosine of the time-averaged perceptual components.
pub fn perceptual_similarity(
    generated: &FeatureSequence,
    prompt: &FeatureSequence,
    projector: &SemanticProjector,
) -> Result<f64> {
    if generated.dim() != prompt.dim() || generated.dim() != projector.basis().nrows() {
        return Err(Error::DimensionMismatch(format!(
            "generated dim {}, prompt dim {}, projector dim {}",
            generated.dim(),
            prompt.dim(),
            projector.basis().nrows()
        )));
    }
    let a = perceptual_embedding(generated, projector);
    let b = perceptual_embedding(prompt, projector);
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("perceptual embedding".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}
