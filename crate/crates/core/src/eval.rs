//! Retrieval evaluation with the fused dual-branch score, and distribution /
//! detection audits on the train split.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::ambiguity::{compute_thresholds, compute_uncertainty, exceeds, Thresholds};
use crate::corpus::FeatureCorpus;
use crate::encoder::{encode_text, encode_video, EncoderParams};
use crate::error::{ArlError, Result};
use crate::similarity::{retrieval_score, CorpusSimilarityMap, EncodedCorpus};
use crate::trainer::DualBranchState;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 100];
pub const HISTOGRAM_BINS: usize = 50;

/// Average of the two branches' retrieval scores.
pub fn fused_score(
    theta: &EncoderParams,
    phi: &EncoderParams,
    words: ArrayView2<'_, f32>,
    frames: ArrayView2<'_, f32>,
) -> Result<f64> {
    let s_theta = retrieval_score(
        encode_text(theta, words)?.view(),
        &encode_video(theta, frames)?,
    )?
    .0;
    let s_phi = retrieval_score(encode_text(phi, words)?.view(), &encode_video(phi, frames)?)?.0;
    Ok(0.5 * (s_theta + s_phi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    /// K → fraction of queries whose paired video ranks within the top K
    pub r_at: BTreeMap<usize, f64>,
    /// `100 · Σ_K r_at[K]`
    pub sum_r: f64,
}

#[derive(Serialize)]
struct RecallJson {
    r1: f64,
    r5: f64,
    r10: f64,
    r100: f64,
    sumr: f64,
}

impl RecallReport {
    pub fn r(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RecallJson {
            r1: self.r(1),
            r5: self.r(5),
            r10: self.r(10),
            r100: self.r(100),
            sumr: self.sum_r,
        })
        .expect("plain numbers serialize")
    }
}

/// 0-based rank of the paired video: strictly better videos plus ties at a
/// lower index come first.
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let s = scores[positive];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < positive))
        .count()
}

/// R@K and SumR from a `N_q × N_v` score matrix.
pub fn recall_from_scores(scores: &Array2<f64>, pairing: &[usize]) -> Result<RecallReport> {
    let n_q = scores.nrows();
    if n_q == 0 || pairing.len() != n_q {
        return Err(ArlError::Dimension(format!(
            "score matrix has {n_q} rows, pairing {}",
            pairing.len()
        )));
    }
    let mut hits = [0usize; RECALL_KS.len()];
    for (i, row) in scores.rows().into_iter().enumerate() {
        let row = row.to_vec();
        if pairing[i] >= row.len() {
            return Err(ArlError::Index(format!(
                "pairing of query {i} out of range"
            )));
        }
        let rank = rank_of(&row, pairing[i]);
        for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let r_at: BTreeMap<usize, f64> = RECALL_KS
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / n_q as f64))
        .collect();
    let sum_r = 100.0 * r_at.values().sum::<f64>();
    Ok(RecallReport { r_at, sum_r })
}

/// Max-over-frames score matrix of one encoded corpus.
pub fn score_matrix(encoded: &EncodedCorpus) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((encoded.queries.len(), encoded.videos.len()));
    for i in 0..encoded.queries.len() {
        for j in 0..encoded.videos.len() {
            out[[i, j]] = encoded.score(i, j)?.0;
        }
    }
    Ok(out)
}

/// Fused score matrix of both branches over a corpus.
pub fn fused_score_matrix(state: &DualBranchState, corpus: &FeatureCorpus) -> Result<Array2<f64>> {
    let a = score_matrix(&EncodedCorpus::encode(&state.theta.params, corpus)?)?;
    let b = score_matrix(&EncodedCorpus::encode(&state.phi.params, corpus)?)?;
    Ok((a + b) * 0.5)
}

/// Ranks every test video per query by fused score.
pub fn evaluate(state: &DualBranchState, corpus: &FeatureCorpus) -> Result<RecallReport> {
    check_dims(state, corpus)?;
    recall_from_scores(&fused_score_matrix(state, corpus)?, &corpus.pairing)
}

fn check_dims(state: &DualBranchState, corpus: &FeatureCorpus) -> Result<()> {
    let d = state.dims();
    let got = (
        corpus.text_dim(),
        corpus.video_dim(),
        corpus.query_len(),
        corpus.video_len(),
    );
    if got != (d.d_t, d.d_v, d.l_q, d.l_v) {
        return Err(ArlError::Dimension(format!(
            "corpus (d_t, d_v, l_q, l_v) = {got:?} does not match checkpoint {:?}",
            (d.d_t, d.d_v, d.l_q, d.l_v)
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// probability mass per bin; sums to 1 when non-empty
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; the top edge falls in the last bin.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut mass = vec![0.0; bins];
        if values.is_empty() {
            return Self { lo, hi, mass };
        }
        let width = hi - lo;
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) * bins as f64).floor() as isize
            } else {
                0
            };
            mass[b.clamp(0, bins as isize - 1) as usize] += 1.0;
        }
        let n = values.len() as f64;
        for m in &mut mass {
            *m /= n;
        }
        Self { lo, hi, mass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionQuality {
    pub detected: usize,
    pub planted: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// set when precision or recall had an empty denominator and was reported as 0
    pub undefined: bool,
}

impl DetectionQuality {
    pub fn from_counts(detected: usize, planted: usize, true_positives: usize) -> Self {
        let undefined = detected == 0 || planted == 0;
        let precision = if detected == 0 {
            0.0
        } else {
            true_positives as f64 / detected as f64
        };
        let recall = if planted == 0 {
            0.0
        } else {
            true_positives as f64 / planted as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            detected,
            planted,
            true_positives,
            precision,
            recall,
            f1,
            undefined,
        }
    }
}

/// Pairwise `(s, u)` for one pair of the train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairStat {
    pub query: usize,
    pub video: usize,
    pub s: f64,
    pub u: f64,
    pub positive: bool,
    pub planted: bool,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub branch: usize,
    pub epoch: usize,
    pub tau_s: f64,
    pub tau_u: f64,
    pub similarity_positive: Histogram,
    pub similarity_unpaired: Histogram,
    pub uncertainty_positive: Histogram,
    pub uncertainty_unpaired: Histogram,
    pub mean_s_positive: f64,
    pub mean_s_unpaired: f64,
    pub mean_u_positive: f64,
    pub mean_u_unpaired: f64,
    pub quality: DetectionQuality,
    /// every detected unpaired pair, ascending by (query, video)
    pub ambiguous_pairs: Vec<PairStat>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn min_max(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// All `(s, u)` pairs of one parameter state with its current thresholds.
pub fn pair_stats(
    params: &EncoderParams,
    corpus: &FeatureCorpus,
    epoch: usize,
) -> Result<(Vec<PairStat>, Thresholds)> {
    let encoded = EncodedCorpus::encode(params, corpus)?;
    let map = CorpusSimilarityMap::from_encoded(&encoded, epoch)?;
    let tables = compute_uncertainty(&map)?;
    let th = compute_thresholds(&map, corpus, &tables)?;
    let mut out = Vec::with_capacity(corpus.n_queries() * corpus.n_videos());
    for i in 0..corpus.n_queries() {
        for j in 0..corpus.n_videos() {
            let (s, k) = map.score(i, j);
            let u = tables.pair_uncertainty(i, j, k)?;
            let positive = corpus.pairing[i] == j;
            out.push(PairStat {
                query: i,
                video: j,
                s,
                u,
                positive,
                planted: corpus.is_planted(i, j),
                detected: !positive && exceeds(s, u, &th),
            });
        }
    }
    Ok((out, th))
}

/// Similarity / uncertainty distributions and detection quality of one branch
/// (`0` = θ, `1` = Φ) on the train split.
pub fn audit(
    state: &DualBranchState,
    corpus: &FeatureCorpus,
    branch: usize,
) -> Result<AuditReport> {
    check_dims(state, corpus)?;
    let params = match branch {
        0 => &state.theta.params,
        1 => &state.phi.params,
        other => return Err(ArlError::Index(format!("branch {other} (expected 0 or 1)"))),
    };
    if corpus.split != crate::corpus::Split::Train {
        return Err(ArlError::config("audit runs on the train split"));
    }
    let (stats, th) = pair_stats(params, corpus, state.epoch)?;
    let split = |pos: bool, f: fn(&PairStat) -> f64| -> Vec<f64> {
        stats.iter().filter(|p| p.positive == pos).map(f).collect()
    };
    let s_pos = split(true, |p| p.s);
    let s_un = split(false, |p| p.s);
    let u_pos = split(true, |p| p.u);
    let u_un = split(false, |p| p.u);
    let (s_lo, s_hi) = min_max(&s_pos, &s_un);
    let (u_lo, u_hi) = min_max(&u_pos, &u_un);

    let detected: Vec<PairStat> = stats.iter().filter(|p| p.detected).copied().collect();
    let tp = detected.iter().filter(|p| p.planted).count();
    let planted = corpus.planted_ambiguity.as_ref().map_or(0, Vec::len);

    Ok(AuditReport {
        branch,
        epoch: state.epoch,
        tau_s: th.tau_s,
        tau_u: th.tau_u,
        similarity_positive: Histogram::build(&s_pos, s_lo, s_hi, HISTOGRAM_BINS),
        similarity_unpaired: Histogram::build(&s_un, s_lo, s_hi, HISTOGRAM_BINS),
        uncertainty_positive: Histogram::build(&u_pos, u_lo, u_hi, HISTOGRAM_BINS),
        uncertainty_unpaired: Histogram::build(&u_un, u_lo, u_hi, HISTOGRAM_BINS),
        mean_s_positive: mean(&s_pos),
        mean_s_unpaired: mean(&s_un),
        mean_u_positive: mean(&u_pos),
        mean_u_unpaired: mean(&u_un),
        quality: DetectionQuality::from_counts(detected.len(), planted, tp),
        ambiguous_pairs: detected,
    })
}

/// Long-format CSV: `record,branch,a,b,c,d,e`.
///
/// Records: `epoch` (per-epoch thresholds and set sizes from the training
/// history), `threshold`, `mean`, `quality`, `hist` and `pair`.
pub fn audit_csv(state: &DualBranchState, reports: &[AuditReport]) -> String {
    let mut out = String::from("record,branch,a,b,c,d,e\n");
    for row in &state.history.rows {
        let (ts, tu) = row.thresholds.map_or((String::new(), String::new()), |t| {
            (format!("{:e}", t.tau_s), format!("{:e}", t.tau_u))
        });
        writeln!(
            out,
            "epoch,{},{},{},{},{:e},{:e}",
            row.branch, row.epoch, ts, tu, row.mean_ambiguous_videos, row.mean_ambiguous_frames
        )
        .unwrap();
    }
    for r in reports {
        let b = r.branch;
        writeln!(
            out,
            "threshold,{b},{},{:e},{:e},,",
            r.epoch, r.tau_s, r.tau_u
        )
        .unwrap();
        writeln!(
            out,
            "mean,{b},{:e},{:e},{:e},{:e},",
            r.mean_s_positive, r.mean_s_unpaired, r.mean_u_positive, r.mean_u_unpaired
        )
        .unwrap();
        let q = &r.quality;
        writeln!(
            out,
            "quality,{b},{},{},{},{:e},{:e}",
            q.detected, q.planted, q.true_positives, q.precision, q.recall
        )
        .unwrap();
        writeln!(
            out,
            "quality_f1,{b},{:e},{},,,",
            q.f1,
            u8::from(q.undefined)
        )
        .unwrap();
        for (name, h) in [
            ("similarity_positive", &r.similarity_positive),
            ("similarity_unpaired", &r.similarity_unpaired),
            ("uncertainty_positive", &r.uncertainty_positive),
            ("uncertainty_unpaired", &r.uncertainty_unpaired),
        ] {
            let w = (h.hi - h.lo) / h.mass.len() as f64;
            for (k, m) in h.mass.iter().enumerate() {
                writeln!(
                    out,
                    "hist,{b},{name},{k},{:e},{:e},{:e}",
                    h.lo + w * k as f64,
                    h.lo + w * (k + 1) as f64,
                    m
                )
                .unwrap();
            }
        }
        for p in &r.ambiguous_pairs {
            writeln!(
                out,
                "pair,{b},{},{},{:e},{:e},{}",
                p.query,
                p.video,
                p.s,
                p.u,
                u8::from(p.planted)
            )
            .unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_ties_go_to_lower_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 2);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], 2), 1);
    }

    #[test]
    fn perfect_and_adversarial_scorers() {
        let n = 200;
        let pairing: Vec<usize> = (0..n).collect();
        let perfect = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let r = recall_from_scores(&perfect, &pairing).unwrap();
        assert!(r.r_at.values().all(|&v| v == 1.0));
        assert_eq!(r.sum_r, 400.0);
        let worst = Array2::from_shape_fn((n, n), |(i, j)| if i == j { -1.0 } else { 0.0 });
        let r = recall_from_scores(&worst, &pairing).unwrap();
        assert!(r.r_at.values().all(|&v| v == 0.0));
        assert_eq!(r.sum_r, 0.0);
    }

    #[test]
    fn k_beyond_corpus_saturates() {
        let scores = array![[0.1, 0.9, 0.3], [0.2, 0.1, 0.0]];
        let r = recall_from_scores(&scores, &[0, 2]).unwrap();
        assert_eq!(r.r(1), 0.0);
        assert_eq!(r.r(5), 1.0);
        assert_eq!(r.r(100), 1.0);
        assert!((r.sum_r - 300.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_mass_sums_to_one() {
        let h = Histogram::build(&[0.0, 0.5, 1.0, 1.0], 0.0, 1.0, 50);
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.mass[49], 0.5);
        let flat = Histogram::build(&[0.3, 0.3], 0.3, 0.3, 50);
        assert_eq!(flat.mass[0], 1.0);
    }

    #[test]
    fn detection_quality_conventions() {
        let q = DetectionQuality::from_counts(0, 0, 0);
        assert!(q.undefined);
        assert_eq!((q.precision, q.recall, q.f1), (0.0, 0.0, 0.0));
        let q = DetectionQuality::from_counts(5, 5, 5);
        assert_eq!((q.precision, q.recall, q.f1), (1.0, 1.0, 1.0));
        assert!(!q.undefined);
    }

    #[test]
    fn json_schema() {
        let scores = array![[0.9, 0.1], [0.2, 0.8]];
        let r = recall_from_scores(&scores, &[0, 1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["r1", "r5", "r10", "r100", "sumr"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["sumr"], 400.0);
    }
}
