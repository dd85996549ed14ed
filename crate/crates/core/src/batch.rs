//! Mini-batch layout and the batch-level similarity tensor.
//!
//! A batch is a list of positive pairs given by their query indices. Its video
//! columns are the distinct paired videos in first-appearance order, so two
//! captions of one video share a column.

use ndarray::{Array2, Array3};

use crate::encoder::{EmbeddingAdjoint, ForwardPass};
use crate::error::{ArlError, Result};
use crate::similarity::{cosine_grad, frame_similarity};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// global query index per row
    pub queries: Vec<usize>,
    /// global video index per column
    pub videos: Vec<usize>,
    /// column of each row's paired video
    pub positive_col: Vec<usize>,
}

impl Batch {
    pub fn from_queries(pairing: &[usize], queries: &[usize]) -> Result<Self> {
        if queries.is_empty() {
            return Err(ArlError::config("empty batch"));
        }
        let mut videos: Vec<usize> = Vec::new();
        let mut positive_col = Vec::with_capacity(queries.len());
        for &i in queries {
            let j = *pairing
                .get(i)
                .ok_or_else(|| ArlError::Index(format!("query {i} not in pairing")))?;
            let col = match videos.iter().position(|&v| v == j) {
                Some(c) => c,
                None => {
                    videos.push(j);
                    videos.len() - 1
                }
            };
            positive_col.push(col);
        }
        Ok(Self {
            queries: queries.to_vec(),
            videos,
            positive_col,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.queries.len()
    }

    pub fn n_cols(&self) -> usize {
        self.videos.len()
    }

    /// True when `(row, col)` is a labelled positive.
    pub fn is_positive(&self, row: usize, col: usize) -> bool {
        self.positive_col[row] == col
    }
}

/// Frame similarities of every batch query against every batch video.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    /// `rows × cols × L_v`
    pub frame_sims: Array3<f64>,
    /// max over frames
    pub scores: Array2<f64>,
    pub best_frame: Array2<usize>,
}

impl BatchScores {
    pub fn from_frame_sims(frame_sims: Array3<f64>) -> Self {
        let (rows, cols, _) = frame_sims.dim();
        let mut scores = Array2::zeros((rows, cols));
        let mut best_frame = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let mut best = (f64::NEG_INFINITY, 0);
                for (k, &s) in frame_sims.slice(ndarray::s![r, c, ..]).iter().enumerate() {
                    if s > best.0 {
                        best = (s, k);
                    }
                }
                scores[[r, c]] = best.0;
                best_frame[[r, c]] = best.1;
            }
        }
        Self {
            frame_sims,
            scores,
            best_frame,
        }
    }

    /// Cosines between the pass's query embeddings (rows) and frame embeddings (columns).
    pub fn compute(pass: &ForwardPass) -> Result<Self> {
        let queries = pass.queries();
        let videos = pass.frames();
        let l_v = videos.first().map_or(0, |v| v.nrows());
        let mut sims = Array3::zeros((queries.len(), videos.len(), l_v));
        for (r, q) in queries.iter().enumerate() {
            for (c, frames) in videos.iter().enumerate() {
                for (k, v) in frames.rows().into_iter().enumerate() {
                    sims[[r, c, k]] = frame_similarity(q.view(), v)?;
                }
            }
        }
        Ok(Self::from_frame_sims(sims))
    }

    pub fn l_v(&self) -> usize {
        self.frame_sims.dim().2
    }

    /// Chains `∂loss/∂frame_sims` through the cosine to the embeddings.
    pub fn embedding_adjoint(
        &self,
        pass: &ForwardPass,
        d_frame_sims: &Array3<f64>,
    ) -> EmbeddingAdjoint {
        let mut adj = EmbeddingAdjoint::zeros(pass);
        for ((r, c, k), &g) in d_frame_sims.indexed_iter() {
            if g == 0.0 {
                continue;
            }
            let q = &pass.texts[r].q;
            let frames = pass.videos[c].frames();
            let (dq, dv) = cosine_grad(q.view(), frames.row(k), self.frame_sims[[r, c, k]]);
            adj.d_queries[r].scaled_add(g, &dq);
            adj.d_frames[c].row_mut(k).scaled_add(g, &dv);
        }
        adj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shared_videos_share_a_column() {
        let pairing = vec![0, 1, 0, 2];
        let b = Batch::from_queries(&pairing, &[2, 1, 0]).unwrap();
        assert_eq!(b.videos, vec![0, 1]);
        assert_eq!(b.positive_col, vec![0, 1, 0]);
        assert!(b.is_positive(2, 0));
        assert!(!b.is_positive(1, 0));
    }

    #[test]
    fn out_of_range_query_is_an_index_error() {
        assert!(matches!(
            Batch::from_queries(&[0], &[3]),
            Err(ArlError::Index(_))
        ));
        assert!(Batch::from_queries(&[0], &[]).is_err());
    }

    #[test]
    fn scores_take_max_with_lowest_index_ties() {
        let sims = array![[[0.2, 0.9, 0.9], [0.4, 0.4, 0.1]]];
        let s = BatchScores::from_frame_sims(sims);
        assert_eq!(s.scores, array![[0.9, 0.4]]);
        assert_eq!(s.best_frame, array![[1, 0]]);
    }
}
