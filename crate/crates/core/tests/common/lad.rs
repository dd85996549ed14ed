use std::collections::BTreeSet;

use arl::ambiguity::{Thresholds, UncertaintyTables};
use arl::batch::{Batch, BatchScores};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Values on a coarse grid so that ties with the thresholds actually occur.
fn grid(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-4..=4) as f64 / 4.0
}

pub struct Case {
    pub batch: Batch,
    pub scores: BatchScores,
    pub tables: UncertaintyTables,
    pub th: Thresholds,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let n_q = rng.random_range(3..=12);
    let n_v = rng.random_range(2..=6);
    let l_v = rng.random_range(1..=5);
    let pairing: Vec<usize> = (0..n_q).map(|_| rng.random_range(0..n_v)).collect();
    let rows = rng.random_range(2..=n_q);
    let mut pool: Vec<usize> = (0..n_q).collect();
    let mut queries = Vec::new();
    for _ in 0..rows {
        queries.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    let batch = Batch::from_queries(&pairing, &queries).unwrap();
    let sims = Array3::from_shape_simple_fn((batch.n_rows(), batch.n_cols(), l_v), || grid(rng));
    let scores = BatchScores::from_frame_sims(sims);
    let tables = UncertaintyTables {
        u_q: Array1::from_shape_simple_fn(n_q, || grid(rng)),
        u_v: Array2::from_shape_simple_fn((n_v, l_v), || grid(rng)),
        epoch: 0,
    };
    let th = Thresholds {
        tau_s: grid(rng),
        tau_u: grid(rng),
        epoch: 0,
    };
    Case {
        batch,
        scores,
        tables,
        th,
    }
}

/// Literal set-builder reading: unpaired members whose similarity and pairwise
/// uncertainty both strictly exceed the thresholds.
pub struct Brute {
    pub ambiguous_videos: Vec<BTreeSet<usize>>,
    pub ambiguous_queries: Vec<BTreeSet<usize>>,
    pub ambiguous_frames: Vec<BTreeSet<usize>>,
    pub frame_queries: Vec<BTreeSet<usize>>,
}

pub fn brute(c: &Case) -> Brute {
    let b = &c.batch;
    let u = |i: usize, j: usize, k: usize| (c.tables.u_q[i] + c.tables.u_v[[j, k]]) / 2.0;
    let l_v = c.scores.frame_sims.dim().2;
    let pair = |r: usize, col: usize| {
        let sims: Vec<f64> = (0..l_v).map(|k| c.scores.frame_sims[[r, col, k]]).collect();
        let s = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let k_hat = sims.iter().position(|&x| x == s).unwrap();
        (s, k_hat)
    };
    let is_amb = |s: f64, uu: f64| s > c.th.tau_s && uu > c.th.tau_u;
    let mut out = Brute {
        ambiguous_videos: vec![BTreeSet::new(); b.n_rows()],
        ambiguous_queries: vec![BTreeSet::new(); b.n_cols()],
        ambiguous_frames: vec![BTreeSet::new(); b.n_rows()],
        frame_queries: vec![BTreeSet::new(); b.n_rows()],
    };
    for r in 0..b.n_rows() {
        for col in 0..b.n_cols() {
            if b.videos[col] == b.videos[b.positive_col[r]] {
                continue;
            }
            let (s, k) = pair(r, col);
            if is_amb(s, u(b.queries[r], b.videos[col], k)) {
                out.ambiguous_videos[r].insert(col);
                out.ambiguous_queries[col].insert(r);
            }
        }
        let col = b.positive_col[r];
        let j = b.videos[col];
        let (_, k_hat) = pair(r, col);
        for k in 0..l_v {
            if k != k_hat && is_amb(c.scores.frame_sims[[r, col, k]], u(b.queries[r], j, k)) {
                out.ambiguous_frames[r].insert(k);
            }
        }
        for o in 0..b.n_rows() {
            if b.positive_col[o] != col
                && is_amb(
                    c.scores.frame_sims[[o, col, k_hat]],
                    u(b.queries[o], j, k_hat),
                )
            {
                out.frame_queries[r].insert(o);
            }
        }
    }
    out
}
