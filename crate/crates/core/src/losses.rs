//! Training objectives over batch scores and ambiguity sets.
//!
//! Every loss here is a function of the batch frame-similarity tensor.
//! [`objective_with_grad`] also returns `∂loss/∂frame_sims`; video-level terms
//! route their gradient to the best frame of each pair.

use ndarray::Array3;

use crate::ambiguity::{AmbiguitySets, FrameSets, VideoSets};
use crate::batch::{Batch, BatchScores};
use crate::error::{ArlError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// margin for negatives
    pub margin_m: f64,
    /// margin for ambiguous members, below `margin_m`
    pub margin_ma: f64,
    pub lambda_nce: f64,
    pub warmup_epochs: usize,
    /// divides every similarity inside the contrastive exponentials
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_m: 0.2,
            margin_ma: 0.1,
            lambda_nce: 0.02,
            warmup_epochs: 3,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_ma >= 0.0 && self.margin_m >= 0.0) {
            return Err(ArlError::config("margins must be nonnegative"));
        }
        if self.margin_ma >= self.margin_m {
            return Err(ArlError::config(format!(
                "margin_ma ({}) must be below margin_m ({})",
                self.margin_ma, self.margin_m
            )));
        }
        if !(self.lambda_nce >= 0.0 && self.lambda_nce.is_finite()) {
            return Err(ArlError::config(
                "lambda_nce must be finite and nonnegative",
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ArlError::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// Per-step loss components. The `nce_*` fields are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nce_t2v: f64,
    pub nce_v2t: f64,
    pub trip_a: f64,
    pub trip_n: f64,
    pub video_total: f64,
    pub frame_nce: f64,
    pub frame_trip_a: f64,
    pub frame_trip_n: f64,
    pub frame_total: f64,
    pub grand_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletMode {
    Ambiguous,
    Negative,
}

/// Optional gradient accumulator over the frame-similarity tensor.
struct Sink<'a> {
    grad: Option<&'a mut Array3<f64>>,
    scale: f64,
}

impl Sink<'_> {
    fn add(&mut self, idx: (usize, usize, usize), v: f64) {
        if let Some(g) = self.grad.as_deref_mut() {
            g[[idx.0, idx.1, idx.2]] += self.scale * v;
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Multi-positive contrastive term over one anchor:
/// `−log[(e^{p} + Σ_A e^{a}) / (e^{p} + Σ_{A∪N} e^{x})]` with all similarities
/// divided by `temp`.
///
/// `members` pairs each similarity with its tensor index; gradients are pushed
/// into `sink`.
fn multi_positive_nce(
    pos: (f64, (usize, usize, usize)),
    ambiguous: &[(f64, (usize, usize, usize))],
    negatives: &[(f64, (usize, usize, usize))],
    temp: f64,
    sink: &mut Sink<'_>,
) -> f64 {
    if negatives.is_empty() {
        return 0.0;
    }
    let num = std::iter::once(pos.0)
        .chain(ambiguous.iter().map(|m| m.0))
        .map(|s| s / temp);
    let den = num.clone().chain(negatives.iter().map(|m| m.0 / temp));
    let lse_num = log_sum_exp(num);
    let lse_den = log_sum_exp(den);
    let value = lse_den - lse_num;
    if sink.grad.is_some() {
        for &(s, idx) in std::iter::once(&pos).chain(ambiguous) {
            let w_den = (s / temp - lse_den).exp();
            let w_num = (s / temp - lse_num).exp();
            sink.add(idx, (w_den - w_num) / temp);
        }
        for &(s, idx) in negatives {
            sink.add(idx, (s / temp - lse_den).exp() / temp);
        }
    }
    value.max(0.0)
}

/// Hinge against the hardest (most similar, lowest index on ties) member.
fn hardest_hinge(
    pos: (f64, (usize, usize, usize)),
    contrast: &[(f64, (usize, usize, usize))],
    margin: f64,
    sink: &mut Sink<'_>,
) -> f64 {
    let mut hardest: Option<(f64, (usize, usize, usize))> = None;
    for &m in contrast {
        if hardest.is_none_or(|h| m.0 > h.0) {
            hardest = Some(m);
        }
    }
    let Some((s_c, idx_c)) = hardest else {
        return 0.0;
    };
    let v = margin + s_c - pos.0;
    if v > 0.0 {
        sink.add(idx_c, 1.0);
        sink.add(pos.1, -1.0);
        v
    } else {
        0.0
    }
}

fn video_entry(scores: &BatchScores, r: usize, c: usize) -> (f64, (usize, usize, usize)) {
    (scores.scores[[r, c]], (r, c, scores.best_frame[[r, c]]))
}

fn video_members(
    scores: &BatchScores,
    r: usize,
    cols: &[usize],
) -> Vec<(f64, (usize, usize, usize))> {
    cols.iter().map(|&c| video_entry(scores, r, c)).collect()
}

fn query_members(
    scores: &BatchScores,
    c: usize,
    rows: &[usize],
) -> Vec<(f64, (usize, usize, usize))> {
    rows.iter().map(|&r| video_entry(scores, r, c)).collect()
}

fn t2v(
    batch: &Batch,
    r: usize,
    scores: &BatchScores,
    sets: &VideoSets,
    temp: f64,
    sink: &mut Sink<'_>,
) -> f64 {
    let c = batch.positive_col[r];
    multi_positive_nce(
        video_entry(scores, r, c),
        &video_members(scores, r, &sets.ambiguous_videos[r]),
        &video_members(scores, r, &sets.negative_videos[r]),
        temp,
        sink,
    )
}

fn v2t(
    batch: &Batch,
    r: usize,
    scores: &BatchScores,
    sets: &VideoSets,
    temp: f64,
    sink: &mut Sink<'_>,
) -> f64 {
    let c = batch.positive_col[r];
    multi_positive_nce(
        video_entry(scores, r, c),
        &query_members(scores, c, &sets.ambiguous_queries[c]),
        &query_members(scores, c, &sets.negative_queries[c]),
        temp,
        sink,
    )
}

/// Text-to-video contrastive term of one positive pair (batch row `r`).
pub fn loss_nce_t2v(
    batch: &Batch,
    r: usize,
    scores: &BatchScores,
    sets: &VideoSets,
    cfg: &LossConfig,
) -> f64 {
    t2v(
        batch,
        r,
        scores,
        sets,
        cfg.temperature,
        &mut Sink {
            grad: None,
            scale: 1.0,
        },
    )
}

/// Video-to-text contrastive term of one positive pair (batch row `r`).
pub fn loss_nce_v2t(
    batch: &Batch,
    r: usize,
    scores: &BatchScores,
    sets: &VideoSets,
    cfg: &LossConfig,
) -> f64 {
    v2t(
        batch,
        r,
        scores,
        sets,
        cfg.temperature,
        &mut Sink {
            grad: None,
            scale: 1.0,
        },
    )
}

/// Mean over positive pairs of `t2v + v2t`.
pub fn loss_nce(batch: &Batch, scores: &BatchScores, sets: &VideoSets, cfg: &LossConfig) -> f64 {
    let (a, b) = nce_parts(
        batch,
        scores,
        sets,
        cfg.temperature,
        &mut Sink {
            grad: None,
            scale: 1.0,
        },
    );
    a + b
}

fn nce_parts(
    batch: &Batch,
    scores: &BatchScores,
    sets: &VideoSets,
    temp: f64,
    sink: &mut Sink<'_>,
) -> (f64, f64) {
    let n = batch.n_rows() as f64;
    let mut a = 0.0;
    let mut b = 0.0;
    for r in 0..batch.n_rows() {
        a += t2v(batch, r, scores, sets, temp, sink);
        b += v2t(batch, r, scores, sets, temp, sink);
    }
    (a / n, b / n)
}

fn triplet(
    batch: &Batch,
    scores: &BatchScores,
    sets: &VideoSets,
    margin: f64,
    mode: TripletMode,
    sink: &mut Sink<'_>,
) -> f64 {
    let mut total = 0.0;
    for r in 0..batch.n_rows() {
        let c = batch.positive_col[r];
        let (videos, queries) = match mode {
            TripletMode::Ambiguous => (&sets.ambiguous_videos[r], &sets.ambiguous_queries[c]),
            TripletMode::Negative => (&sets.negative_videos[r], &sets.negative_queries[c]),
        };
        let pos = video_entry(scores, r, c);
        total += hardest_hinge(pos, &query_members(scores, c, queries), margin, sink);
        total += hardest_hinge(pos, &video_members(scores, r, videos), margin, sink);
    }
    total / batch.n_rows() as f64
}

/// Dual-triplet term in one mode, averaged over the batch.
pub fn loss_triplet(
    batch: &Batch,
    scores: &BatchScores,
    sets: &VideoSets,
    margin: f64,
    mode: TripletMode,
) -> f64 {
    triplet(
        batch,
        scores,
        sets,
        margin,
        mode,
        &mut Sink {
            grad: None,
            scale: 1.0,
        },
    )
}

fn video_objective(
    batch: &Batch,
    scores: &BatchScores,
    sets: &VideoSets,
    cfg: &LossConfig,
    grad: Option<&mut Array3<f64>>,
) -> LossBreakdown {
    let mut grad = grad;
    let n = batch.n_rows() as f64;
    let (nce_t2v, nce_v2t) = nce_parts(
        batch,
        scores,
        sets,
        cfg.temperature,
        &mut Sink {
            grad: grad.as_deref_mut(),
            scale: cfg.lambda_nce / n,
        },
    );
    let mut sink = Sink {
        grad,
        scale: 1.0 / n,
    };
    let trip_a = triplet(
        batch,
        scores,
        sets,
        cfg.margin_ma,
        TripletMode::Ambiguous,
        &mut sink,
    );
    let trip_n = triplet(
        batch,
        scores,
        sets,
        cfg.margin_m,
        TripletMode::Negative,
        &mut sink,
    );
    let video_total = cfg.lambda_nce * (nce_t2v + nce_v2t) + trip_a + trip_n;
    LossBreakdown {
        nce_t2v,
        nce_v2t,
        trip_a,
        trip_n,
        video_total,
        grand_total: video_total,
        ..Default::default()
    }
}

/// `λ·L^nce + L_a^trip + L_n^trip` at the text-video level.
pub fn loss_video(
    batch: &Batch,
    scores: &BatchScores,
    sets: &VideoSets,
    cfg: &LossConfig,
) -> LossBreakdown {
    video_objective(batch, scores, sets, cfg, None)
}

/// Frame-level components `(nce, trip_a, trip_n, total)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameLoss {
    pub nce: f64,
    pub trip_a: f64,
    pub trip_n: f64,
    pub total: f64,
}

fn frame_objective(
    batch: &Batch,
    scores: &BatchScores,
    frames: &[FrameSets],
    cfg: &LossConfig,
    grad: Option<&mut Array3<f64>>,
) -> FrameLoss {
    let mut grad = grad;
    let n = batch.n_rows() as f64;
    let mut nce = 0.0;
    let mut trip_a = 0.0;
    let mut trip_n = 0.0;
    for (r, fs) in frames.iter().enumerate() {
        let c = batch.positive_col[r];
        let k_hat = fs.best_frame;
        let entry = |row: usize, k: usize| (scores.frame_sims[[row, c, k]], (row, c, k));
        let pos = entry(r, k_hat);
        let amb_f: Vec<_> = fs.ambiguous_frames.iter().map(|&k| entry(r, k)).collect();
        let neg_f: Vec<_> = fs.negative_frames.iter().map(|&k| entry(r, k)).collect();
        let amb_q: Vec<_> = fs
            .ambiguous_queries
            .iter()
            .map(|&o| entry(o, k_hat))
            .collect();
        let neg_q: Vec<_> = fs
            .negative_queries
            .iter()
            .map(|&o| entry(o, k_hat))
            .collect();

        let mut sink = Sink {
            grad: grad.as_deref_mut(),
            scale: cfg.lambda_nce / n,
        };
        nce += multi_positive_nce(pos, &amb_f, &neg_f, cfg.temperature, &mut sink);
        nce += multi_positive_nce(pos, &amb_q, &neg_q, cfg.temperature, &mut sink);

        let mut sink = Sink {
            grad: grad.as_deref_mut(),
            scale: 1.0 / n,
        };
        trip_a += hardest_hinge(pos, &amb_q, cfg.margin_ma, &mut sink);
        trip_a += hardest_hinge(pos, &amb_f, cfg.margin_ma, &mut sink);
        trip_n += hardest_hinge(pos, &neg_q, cfg.margin_m, &mut sink);
        trip_n += hardest_hinge(pos, &neg_f, cfg.margin_m, &mut sink);
    }
    let (nce, trip_a, trip_n) = (nce / n, trip_a / n, trip_n / n);
    FrameLoss {
        nce,
        trip_a,
        trip_n,
        total: cfg.lambda_nce * nce + trip_a + trip_n,
    }
}

/// The text-video objective applied to text-frame positives, ambiguous and negatives.
pub fn loss_frame(
    batch: &Batch,
    scores: &BatchScores,
    frames: &[FrameSets],
    cfg: &LossConfig,
) -> FrameLoss {
    frame_objective(batch, scores, frames, cfg, None)
}

/// Warmup objective: the text-video objective with every unpaired member negative.
pub fn loss_warmup(batch: &Batch, scores: &BatchScores, cfg: &LossConfig) -> f64 {
    let sets = AmbiguitySets::all_negative(batch, scores);
    loss_video(batch, scores, &sets.video, cfg).video_total
}

/// Which terms take part in a training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub frame: bool,
}

/// Full objective value and `∂loss/∂frame_sims`.
pub fn objective_with_grad(
    batch: &Batch,
    scores: &BatchScores,
    sets: &AmbiguitySets,
    cfg: &LossConfig,
    terms: ObjectiveTerms,
) -> Result<(LossBreakdown, Array3<f64>)> {
    if sets.frames.len() != batch.n_rows() || sets.video.ambiguous_videos.len() != batch.n_rows() {
        return Err(ArlError::Dimension(
            "ambiguity sets do not match batch".into(),
        ));
    }
    let mut grad = Array3::zeros(scores.frame_sims.raw_dim());
    let mut bd = video_objective(batch, scores, &sets.video, cfg, Some(&mut grad));
    if terms.frame {
        let mut fgrad = Array3::zeros(scores.frame_sims.raw_dim());
        let fl = frame_objective(batch, scores, &sets.frames, cfg, Some(&mut fgrad));
        bd.frame_nce = fl.nce;
        bd.frame_trip_a = fl.trip_a;
        bd.frame_trip_n = fl.trip_n;
        bd.frame_total = fl.total;
        grad.scaled_add(1.0, &fgrad);
    }
    bd.grand_total = bd.video_total + bd.frame_total;
    if !bd.grand_total.is_finite() {
        return Err(ArlError::numerical("loss", "non-finite objective"));
    }
    Ok((bd, grad))
}

/// Objective value only.
pub fn objective(
    batch: &Batch,
    scores: &BatchScores,
    sets: &AmbiguitySets,
    cfg: &LossConfig,
    terms: ObjectiveTerms,
) -> LossBreakdown {
    let mut bd = loss_video(batch, scores, &sets.video, cfg);
    if terms.frame {
        let fl = loss_frame(batch, scores, &sets.frames, cfg);
        bd.frame_nce = fl.nce;
        bd.frame_trip_a = fl.trip_a;
        bd.frame_trip_n = fl.trip_n;
        bd.frame_total = fl.total;
    }
    bd.grand_total = bd.video_total + bd.frame_total;
    bd
}
