//! Central finite-difference check of the full training objective.
//!
//! Each instance draws a tiny corpus, perturbed parameters, a batch and a
//! random mix of ambiguous / negative sets. The sets stay fixed while the
//! parameters are perturbed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ambiguity::{AmbiguitySets, FrameSets, VideoSets};
use crate::batch::{Batch, BatchScores};
use crate::corpus::{FeatureCorpus, Split};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::Result;
use crate::losses::{objective, LossConfig, ObjectiveTerms};
use crate::trainer::{forward_batch, loss_and_grad};

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub instances: usize,
    pub scalars_checked: usize,
    pub max_rel_err: f64,
    /// tensor holding the worst entry
    pub worst_tensor: String,
}

/// A self-contained check problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub corpus: FeatureCorpus,
    pub params: EncoderParams,
    pub batch: Batch,
    pub sets: AmbiguitySets,
    pub loss: LossConfig,
}

fn coin(rng: &mut ChaCha8Rng) -> bool {
    rng.random_bool(0.5)
}

/// Random instance with `d ≤ 8`, `L_v ≤ 4` and at most 4 batch rows.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d_t = rng.random_range(2..=6);
    let d_v = rng.random_range(2..=6);
    let d = rng.random_range(2..=8);
    let l_q = rng.random_range(1..=4);
    let l_v = rng.random_range(1..=4);
    let rows = rng.random_range(2..=4);
    let n_v = rng.random_range(2..=rows);
    let pairing: Vec<usize> = (0..rows)
        .map(|i| if i < n_v { i } else { rng.random_range(0..n_v) })
        .collect();
    let text =
        Array3::from_shape_simple_fn((rows, l_q, d_t), || rng.sample::<f32, _>(StandardNormal));
    let video =
        Array3::from_shape_simple_fn((n_v, l_v, d_v), || rng.sample::<f32, _>(StandardNormal));
    let corpus = FeatureCorpus::new(text, video, pairing, Split::Train, None)?;

    let dims = EncoderDims {
        d_t,
        d_v,
        l_q,
        l_v,
        d,
    };
    let mut params = EncoderParams::init(dims, rng.random())?;
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let queries: Vec<usize> = (0..rows).collect();
    let batch = Batch::from_queries(&corpus.pairing, &queries)?;
    let scores = forward_batch(&params, &corpus, &batch)?.scores;
    let sets = random_sets(rng, &batch, &scores);
    let loss = LossConfig {
        lambda_nce: rng.random_range(0.02..1.0),
        temperature: rng.random_range(0.5..1.5),
        ..LossConfig::default()
    };
    Ok(Instance {
        corpus,
        params,
        batch,
        sets,
        loss,
    })
}

/// Each unpaired member lands in the ambiguous or negative set by a fair coin.
pub fn random_sets(rng: &mut ChaCha8Rng, batch: &Batch, scores: &BatchScores) -> AmbiguitySets {
    let (rows, cols) = (batch.n_rows(), batch.n_cols());
    let mut video = VideoSets {
        ambiguous_videos: vec![Vec::new(); rows],
        negative_videos: vec![Vec::new(); rows],
        ambiguous_queries: vec![Vec::new(); cols],
        negative_queries: vec![Vec::new(); cols],
    };
    for r in 0..rows {
        for c in 0..cols {
            if batch.is_positive(r, c) {
                continue;
            }
            if coin(rng) {
                video.ambiguous_videos[r].push(c);
            } else {
                video.negative_videos[r].push(c);
            }
            if coin(rng) {
                video.ambiguous_queries[c].push(r);
            } else {
                video.negative_queries[c].push(r);
            }
        }
    }
    let frames = (0..rows)
        .map(|r| {
            let c = batch.positive_col[r];
            let k_hat = scores.best_frame[[r, c]];
            let mut fs = FrameSets {
                best_frame: k_hat,
                ..FrameSets::default()
            };
            for k in (0..scores.l_v()).filter(|&k| k != k_hat) {
                if coin(rng) {
                    fs.ambiguous_frames.push(k);
                } else {
                    fs.negative_frames.push(k);
                }
            }
            for o in (0..rows).filter(|&o| !batch.is_positive(o, c)) {
                if coin(rng) {
                    fs.ambiguous_queries.push(o);
                } else {
                    fs.negative_queries.push(o);
                }
            }
            fs
        })
        .collect();
    AmbiguitySets { video, frames }
}

fn total(inst: &Instance, params: &EncoderParams) -> Result<f64> {
    let fwd = forward_batch(params, &inst.corpus, &inst.batch)?;
    Ok(objective(
        &inst.batch,
        &fwd.scores,
        &inst.sets,
        &inst.loss,
        ObjectiveTerms { frame: true },
    )
    .grand_total)
}

/// Worst `|g − fd| / max(1, |fd|)` over every scalar of one instance.
pub fn check_instance(inst: &Instance) -> Result<(f64, String, usize)> {
    let fwd = forward_batch(&inst.params, &inst.corpus, &inst.batch)?;
    let (_, tape) = loss_and_grad(
        &inst.params,
        &fwd,
        &inst.batch,
        &inst.sets,
        &inst.loss,
        ObjectiveTerms { frame: true },
    )?;
    let analytic: Vec<(&'static str, Vec<f64>)> = tape
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();

    let mut worst = (0.0, String::new());
    let mut count = 0;
    let mut p = inst.params.clone();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (idx, &g_an) in g.iter().enumerate() {
            let orig = p.tensors()[ti].1[idx];
            p.tensors_mut()[ti].1[idx] = orig + FD_STEP;
            let plus = total(inst, &p)?;
            p.tensors_mut()[ti].1[idx] = orig - FD_STEP;
            let minus = total(inst, &p)?;
            p.tensors_mut()[ti].1[idx] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let err = (g_an - fd).abs() / fd.abs().max(1.0);
            if err > worst.0 {
                worst = (err, format!("{name}[{idx}]"));
            }
            count += 1;
        }
    }
    Ok((worst.0, worst.1, count))
}

/// Runs `instances` random checks from one seed.
pub fn run(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        instances,
        scalars_checked: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
    };
    for _ in 0..instances {
        let inst = random_instance(&mut rng)?;
        let (err, at, n) = check_instance(&inst)?;
        report.scalars_checked += n;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_tensor = at;
        }
    }
    Ok(report)
}
