//! Frame-wise cosine similarity, max-over-frames retrieval score, and the
//! dataset-wide similarity map `M[x, y, z] = cos(q_x, v_yz)`.

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::corpus::{FeatureCorpus, Split};
use crate::encoder::{encode_text, encode_video, EncoderParams};
use crate::error::{ArlError, Result};

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two embeddings, clamped to `[-1, 1]`.
///
/// A zero vector is rejected rather than patched with an epsilon.
pub fn frame_similarity(q: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if q.len() != v.len() {
        return Err(ArlError::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            q.len(),
            v.len()
        )));
    }
    let nq = norm(q);
    let nv = norm(v);
    if nq == 0.0 || nv == 0.0 {
        return Err(ArlError::DegenerateInput(
            "cosine similarity with a zero vector".into(),
        ));
    }
    let dot: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let c = dot / (nq * nv);
    if !c.is_finite() {
        return Err(ArlError::numerical("cosine", "non-finite similarity"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// `(∂cos/∂q, ∂cos/∂v)` at a point where `cos(q, v) = c`.
pub fn cosine_grad(
    q: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    c: f64,
) -> (Array1<f64>, Array1<f64>) {
    let nq = norm(q);
    let nv = norm(v);
    let inv = 1.0 / (nq * nv);
    let dq = &v * inv - &q * (c / (nq * nq));
    let dv = &q * inv - &v * (c / (nv * nv));
    (dq, dv)
}

/// Max-over-frames score and the index of the best frame (lowest index on ties).
pub fn retrieval_score(q: ArrayView1<'_, f64>, frames: &Array2<f64>) -> Result<(f64, usize)> {
    if frames.nrows() == 0 {
        return Err(ArlError::DegenerateInput("video with no frames".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, row) in frames.rows().into_iter().enumerate() {
        let s = frame_similarity(q, row)?;
        if s > best.0 {
            best = (s, k);
        }
    }
    Ok(best)
}

/// Embeddings of every query and video of a corpus under one parameter state.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub queries: Vec<Array1<f64>>,
    pub videos: Vec<Array2<f64>>,
}

impl EncodedCorpus {
    pub fn encode(params: &EncoderParams, corpus: &FeatureCorpus) -> Result<Self> {
        let queries = (0..corpus.n_queries())
            .map(|i| encode_text(params, corpus.query(i)))
            .collect::<Result<Vec<_>>>()?;
        let videos = (0..corpus.n_videos())
            .map(|j| encode_video(params, corpus.video(j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { queries, videos })
    }

    pub fn score(&self, i: usize, j: usize) -> Result<(f64, usize)> {
        retrieval_score(self.queries[i].view(), &self.videos[j])
    }
}

/// Dense `N_q × N_v × L_v` cosine map for one encoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSimilarityMap {
    pub m: Array3<f64>,
    pub epoch: usize,
}

impl CorpusSimilarityMap {
    pub fn from_encoded(encoded: &EncodedCorpus, epoch: usize) -> Result<Self> {
        let n_q = encoded.queries.len();
        let n_v = encoded.videos.len();
        let l_v = encoded.videos.first().map_or(0, |v| v.nrows());
        let mut m = Array3::zeros((n_q, n_v, l_v));
        for (x, q) in encoded.queries.iter().enumerate() {
            for (y, frames) in encoded.videos.iter().enumerate() {
                for (z, v) in frames.rows().into_iter().enumerate() {
                    m[[x, y, z]] = frame_similarity(q.view(), v)?;
                }
            }
        }
        Ok(Self { m, epoch })
    }

    /// Retrieval score and best frame read straight from the map.
    pub fn score(&self, x: usize, y: usize) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (z, &s) in self.m.slice(ndarray::s![x, y, ..]).iter().enumerate() {
            if s > best.0 {
                best = (s, z);
            }
        }
        best
    }
}

/// Recomputes the full map from scratch for a train-split corpus.
pub fn build_corpus_map(
    params: &EncoderParams,
    corpus: &FeatureCorpus,
    epoch: usize,
) -> Result<CorpusSimilarityMap> {
    if corpus.split != Split::Train {
        return Err(ArlError::config(
            "similarity map must be built on the train split",
        ));
    }
    let encoded = EncodedCorpus::encode(params, corpus)?;
    CorpusSimilarityMap::from_encoded(&encoded, epoch)
}
