//! Uncertainty estimation, per-epoch thresholds and label ambiguity detection.
//!
//! Uncertainty of a query is its mean similarity to every frame of the train
//! set; uncertainty of a frame is its mean similarity to every query. An
//! unpaired pair is ambiguous when both its similarity and its pairwise
//! uncertainty strictly exceed the epoch thresholds.

use ndarray::{Array1, Array2, Axis};

use crate::batch::{Batch, BatchScores};
use crate::corpus::FeatureCorpus;
use crate::error::{ArlError, Result};
use crate::similarity::CorpusSimilarityMap;

/// Dataset-wide uncertainties `Ū^q` (per query) and `Ū^v` (per video frame).
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyTables {
    pub u_q: Array1<f64>,
    /// `N_v × L_v`
    pub u_v: Array2<f64>,
    pub epoch: usize,
}

pub fn compute_uncertainty(map: &CorpusSimilarityMap) -> Result<UncertaintyTables> {
    let (n_q, n_v, l_v) = map.m.dim();
    if n_q == 0 || n_v == 0 || l_v == 0 {
        return Err(ArlError::config("similarity map is empty"));
    }
    if map.m.iter().any(|v| !v.is_finite()) {
        return Err(ArlError::numerical("similarity_map", "non-finite entry"));
    }
    // deviations from a reference entry; exact on a constant map
    let r = map.m[[0, 0, 0]];
    let mut u_q = Array1::zeros(n_q);
    for x in 0..n_q {
        let dev: f64 = map.m.index_axis(Axis(0), x).iter().map(|v| v - r).sum();
        u_q[x] = r + dev / (n_v * l_v) as f64;
    }
    let mut u_v = Array2::zeros((n_v, l_v));
    for x in 0..n_q {
        u_v += &map.m.index_axis(Axis(0), x).mapv(|v| v - r);
    }
    u_v.mapv_inplace(|d| r + d / n_q as f64);
    Ok(UncertaintyTables {
        u_q,
        u_v,
        epoch: map.epoch,
    })
}

impl UncertaintyTables {
    fn check(&self, i: usize, j: usize, k: usize) -> Result<()> {
        let (n_v, l_v) = self.u_v.dim();
        if i >= self.u_q.len() || j >= n_v || k >= l_v {
            return Err(ArlError::Index(format!(
                "uncertainty lookup ({i}, {j}, {k}) outside ({}, {n_v}, {l_v})",
                self.u_q.len()
            )));
        }
        Ok(())
    }

    /// `u(q_i, V_j) = (Ū^q_i + Ū^v_{j k̂}) / 2` with `k̂` the best frame of the pair.
    pub fn pair_uncertainty(&self, i: usize, j: usize, best_frame: usize) -> Result<f64> {
        self.frame_uncertainty(i, j, best_frame)
    }

    /// `u^f(q_i, v_jk) = (Ū^q_i + Ū^v_{jk}) / 2`.
    pub fn frame_uncertainty(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        self.check(i, j, k)?;
        Ok(0.5 * (self.u_q[i] + self.u_v[[j, k]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau_s: f64,
    pub tau_u: f64,
    pub epoch: usize,
}

/// `τ_s` = mean positive retrieval score, `τ_u` = mean positive pairwise uncertainty.
pub fn compute_thresholds(
    map: &CorpusSimilarityMap,
    corpus: &FeatureCorpus,
    tables: &UncertaintyTables,
) -> Result<Thresholds> {
    let n = corpus.n_queries();
    if n == 0 {
        return Err(ArlError::config("empty train set"));
    }
    if map.m.dim().0 != n || map.m.dim().1 != corpus.n_videos() {
        return Err(ArlError::Dimension(
            "similarity map does not match corpus".into(),
        ));
    }
    let mut sum_s = 0.0;
    let mut sum_u = 0.0;
    for (i, &j) in corpus.pairing.iter().enumerate() {
        let (s, k) = map.score(i, j);
        sum_s += s;
        sum_u += tables.pair_uncertainty(i, j, k)?;
    }
    let th = Thresholds {
        tau_s: sum_s / n as f64,
        tau_u: sum_u / n as f64,
        epoch: map.epoch,
    };
    if !th.tau_s.is_finite() || !th.tau_u.is_finite() {
        return Err(ArlError::numerical("thresholds", "non-finite threshold"));
    }
    Ok(th)
}

/// Strict two-threshold test shared by every detector.
#[inline]
pub fn exceeds(s: f64, u: f64, th: &Thresholds) -> bool {
    s > th.tau_s && u > th.tau_u
}

/// Text-video level sets, indexed by batch row / column.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VideoSets {
    /// `A^q_i`: ambiguous columns per row
    pub ambiguous_videos: Vec<Vec<usize>>,
    /// `N^q_i`
    pub negative_videos: Vec<Vec<usize>>,
    /// `A^v_j`: ambiguous rows per column
    pub ambiguous_queries: Vec<Vec<usize>>,
    /// `N^v_j`
    pub negative_queries: Vec<Vec<usize>>,
}

/// Text-frame level sets for the positive pair of one batch row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameSets {
    /// frame-positive `k̂` within the paired video
    pub best_frame: usize,
    pub ambiguous_frames: Vec<usize>,
    pub negative_frames: Vec<usize>,
    /// batch rows ambiguous to frame `k̂`
    pub ambiguous_queries: Vec<usize>,
    pub negative_queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AmbiguitySets {
    pub video: VideoSets,
    /// one entry per batch row
    pub frames: Vec<FrameSets>,
}

impl AmbiguitySets {
    /// Every unpaired member negative, no ambiguity anywhere.
    pub fn all_negative(batch: &Batch, scores: &BatchScores) -> Self {
        let (rows, cols) = (batch.n_rows(), batch.n_cols());
        let l_v = scores.l_v();
        let video = VideoSets {
            ambiguous_videos: vec![Vec::new(); rows],
            negative_videos: (0..rows)
                .map(|r| (0..cols).filter(|&c| !batch.is_positive(r, c)).collect())
                .collect(),
            ambiguous_queries: vec![Vec::new(); cols],
            negative_queries: (0..cols)
                .map(|c| (0..rows).filter(|&r| !batch.is_positive(r, c)).collect())
                .collect(),
        };
        let frames = (0..rows)
            .map(|r| {
                let c = batch.positive_col[r];
                let k_hat = scores.best_frame[[r, c]];
                FrameSets {
                    best_frame: k_hat,
                    ambiguous_frames: Vec::new(),
                    negative_frames: (0..l_v).filter(|&k| k != k_hat).collect(),
                    ambiguous_queries: Vec::new(),
                    negative_queries: (0..rows).filter(|&o| !batch.is_positive(o, c)).collect(),
                }
            })
            .collect();
        Self { video, frames }
    }

    pub fn ambiguous_pair_count(&self) -> usize {
        self.video.ambiguous_videos.iter().map(Vec::len).sum()
    }

    pub fn ambiguous_frame_count(&self) -> usize {
        self.frames.iter().map(|f| f.ambiguous_frames.len()).sum()
    }
}

/// Text-video LAD over one batch.
pub fn detect_video_ambiguity(
    batch: &Batch,
    scores: &BatchScores,
    tables: &UncertaintyTables,
    th: &Thresholds,
) -> Result<VideoSets> {
    let (rows, cols) = (batch.n_rows(), batch.n_cols());
    let mut sets = VideoSets {
        ambiguous_videos: vec![Vec::new(); rows],
        negative_videos: vec![Vec::new(); rows],
        ambiguous_queries: vec![Vec::new(); cols],
        negative_queries: vec![Vec::new(); cols],
    };
    for r in 0..rows {
        let i = batch.queries[r];
        for c in 0..cols {
            if batch.is_positive(r, c) {
                continue;
            }
            let j = batch.videos[c];
            let s = scores.scores[[r, c]];
            let u = tables.pair_uncertainty(i, j, scores.best_frame[[r, c]])?;
            if exceeds(s, u, th) {
                sets.ambiguous_videos[r].push(c);
                sets.ambiguous_queries[c].push(r);
            } else {
                sets.negative_videos[r].push(c);
                sets.negative_queries[c].push(r);
            }
        }
    }
    Ok(sets)
}

/// Text-frame LAD: within the paired video for each query, and across batch
/// queries for the paired video's best frame.
pub fn detect_frame_ambiguity(
    batch: &Batch,
    scores: &BatchScores,
    tables: &UncertaintyTables,
    th: &Thresholds,
) -> Result<Vec<FrameSets>> {
    let rows = batch.n_rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let i = batch.queries[r];
        let c = batch.positive_col[r];
        let j = batch.videos[c];
        let k_hat = scores.best_frame[[r, c]];
        let mut fs = FrameSets {
            best_frame: k_hat,
            ..Default::default()
        };
        for k in 0..scores.l_v() {
            if k == k_hat {
                continue;
            }
            let s = scores.frame_sims[[r, c, k]];
            let u = tables.frame_uncertainty(i, j, k)?;
            if exceeds(s, u, th) {
                fs.ambiguous_frames.push(k);
            } else {
                fs.negative_frames.push(k);
            }
        }
        for o in 0..rows {
            if batch.is_positive(o, c) {
                continue;
            }
            let s = scores.frame_sims[[o, c, k_hat]];
            let u = tables.frame_uncertainty(batch.queries[o], j, k_hat)?;
            if exceeds(s, u, th) {
                fs.ambiguous_queries.push(o);
            } else {
                fs.negative_queries.push(o);
            }
        }
        out.push(fs);
    }
    Ok(out)
}

/// Both detection levels for one batch.
pub fn detect(
    batch: &Batch,
    scores: &BatchScores,
    tables: &UncertaintyTables,
    th: &Thresholds,
) -> Result<AmbiguitySets> {
    Ok(AmbiguitySets {
        video: detect_video_ambiguity(batch, scores, tables, th)?,
        frames: detect_frame_ambiguity(batch, scores, tables, th)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn tables_from(m: Array3<f64>) -> UncertaintyTables {
        compute_uncertainty(&CorpusSimilarityMap { m, epoch: 0 }).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_tables() {
        let t = tables_from(Array3::from_elem((3, 4, 2), 0.37));
        assert!(t.u_q.iter().all(|&v| v == 0.37));
        assert!(t.u_v.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn small_map_averages() {
        let t = tables_from(array![[[0.1], [0.5]]]);
        assert!((t.u_q[0] - 0.3).abs() < 1e-15);
        assert_eq!(t.u_v, array![[0.1], [0.5]]);
    }

    #[test]
    fn duplicated_queries_leave_frame_uncertainty_unchanged() {
        let m = array![[[0.1, -0.3], [0.5, 0.2]], [[0.7, 0.0], [-0.4, 0.9]]];
        let a = tables_from(m.clone());
        let doubled = ndarray::concatenate(Axis(0), &[m.view(), m.view()]).unwrap();
        let b = tables_from(doubled);
        for (x, y) in a.u_v.iter().zip(b.u_v.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_and_frame_uncertainty() {
        let t = UncertaintyTables {
            u_q: array![0.4],
            u_v: array![[0.2, 0.6]],
            epoch: 0,
        };
        assert!((t.pair_uncertainty(0, 0, 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(
            t.frame_uncertainty(0, 0, 0).unwrap(),
            t.pair_uncertainty(0, 0, 0).unwrap()
        );
        let t2 = UncertaintyTables {
            u_q: array![0.6],
            u_v: array![[0.2, 0.6]],
            epoch: 0,
        };
        assert_eq!(t2.frame_uncertainty(0, 0, 1).unwrap(), 0.6);
        assert!(matches!(
            t.frame_uncertainty(0, 0, 2),
            Err(ArlError::Index(_))
        ));
        assert!(matches!(
            t.pair_uncertainty(1, 0, 0),
            Err(ArlError::Index(_))
        ));
    }

    fn three_pair_case() -> (Batch, BatchScores, UncertaintyTables) {
        // rows 0,1,2 pair with columns 0,1,2; row 0 probes the three unpaired cases
        let pairing = vec![0, 1, 2, 3];
        let batch = Batch::from_queries(&pairing, &[0, 1, 2, 3]).unwrap();
        let mut sims = Array3::from_elem((4, 4, 1), 0.0);
        for r in 0..4 {
            sims[[r, r, 0]] = 0.95;
        }
        sims[[0, 1, 0]] = 0.9;
        sims[[0, 2, 0]] = 0.9;
        sims[[0, 3, 0]] = 0.3;
        let scores = BatchScores::from_frame_sims(sims);
        // u(0, c) = (u_q[0] + u_v[c]) / 2 with u_q[0] = 0.5 gives 0.5, 0.1, 0.5
        let tables = UncertaintyTables {
            u_q: array![0.5, 0.0, 0.0, 0.0],
            u_v: array![[0.0], [0.5], [-0.3], [0.5]],
            epoch: 0,
        };
        (batch, scores, tables)
    }

    #[test]
    fn only_pairs_above_both_thresholds_are_ambiguous() {
        let (batch, scores, tables) = three_pair_case();
        let th = Thresholds {
            tau_s: 0.5,
            tau_u: 0.3,
            epoch: 0,
        };
        let sets = detect_video_ambiguity(&batch, &scores, &tables, &th).unwrap();
        assert_eq!(sets.ambiguous_videos[0], vec![1]);
        assert_eq!(sets.negative_videos[0], vec![2, 3]);
        assert_eq!(sets.ambiguous_queries[1], vec![0]);
    }

    #[test]
    fn saturated_thresholds_leave_everything_negative() {
        let (batch, scores, tables) = three_pair_case();
        let th = Thresholds {
            tau_s: 2.0,
            tau_u: 2.0,
            epoch: 0,
        };
        let sets = detect(&batch, &scores, &tables, &th).unwrap();
        assert_eq!(sets, AmbiguitySets::all_negative(&batch, &scores));
    }

    #[test]
    fn positives_never_ambiguous() {
        let (batch, scores, tables) = three_pair_case();
        let th = Thresholds {
            tau_s: -2.0,
            tau_u: -2.0,
            epoch: 0,
        };
        let sets = detect_video_ambiguity(&batch, &scores, &tables, &th).unwrap();
        for r in 0..4 {
            assert!(!sets.ambiguous_videos[r].contains(&batch.positive_col[r]));
            assert_eq!(sets.ambiguous_videos[r].len(), 3);
            assert!(sets.negative_videos[r].is_empty());
        }
    }

    #[test]
    fn strict_inequality_sends_ties_to_negative() {
        let (batch, scores, tables) = three_pair_case();
        let th = Thresholds {
            tau_s: 0.9,
            tau_u: 0.3,
            epoch: 0,
        };
        let sets = detect_video_ambiguity(&batch, &scores, &tables, &th).unwrap();
        assert!(sets.ambiguous_videos[0].is_empty());
    }

    #[test]
    fn single_frame_videos_have_no_frame_sets() {
        let (batch, scores, tables) = three_pair_case();
        let th = Thresholds {
            tau_s: -2.0,
            tau_u: -2.0,
            epoch: 0,
        };
        for fs in detect_frame_ambiguity(&batch, &scores, &tables, &th).unwrap() {
            assert_eq!(fs.best_frame, 0);
            assert!(fs.ambiguous_frames.is_empty());
            assert!(fs.negative_frames.is_empty());
        }
    }

    #[test]
    fn frames_equal_to_best_become_ambiguous() {
        let batch = Batch::from_queries(&[0, 1], &[0, 1]).unwrap();
        let mut sims = Array3::from_elem((2, 2, 3), 0.1);
        for k in 0..3 {
            sims[[0, 0, k]] = 0.8;
        }
        let scores = BatchScores::from_frame_sims(sims);
        let tables = UncertaintyTables {
            u_q: array![0.4, 0.0],
            u_v: array![[0.4, 0.4, 0.4], [0.0, 0.0, 0.0]],
            epoch: 0,
        };
        let th = Thresholds {
            tau_s: 0.7,
            tau_u: 0.3,
            epoch: 0,
        };
        let fs = &detect_frame_ambiguity(&batch, &scores, &tables, &th).unwrap()[0];
        assert_eq!(fs.best_frame, 0);
        assert_eq!(fs.ambiguous_frames, vec![1, 2]);
        assert!(fs.negative_frames.is_empty());
        assert_eq!(fs.negative_queries, vec![1]);

        let high = Thresholds { tau_s: 0.9, ..th };
        let fs = &detect_frame_ambiguity(&batch, &scores, &tables, &high).unwrap()[0];
        assert!(fs.ambiguous_frames.is_empty());
        assert_eq!(fs.negative_frames, vec![1, 2]);
    }
}
