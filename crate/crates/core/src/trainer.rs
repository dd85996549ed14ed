//! Training loop: warmup epochs, per-epoch uncertainty/threshold refresh,
//! mini-batch ambiguity-aware steps and cross-model set exchange.
//!
//! Each epoch after warmup, every branch rebuilds its similarity map,
//! uncertainty tables and thresholds from its parameters at the start of the
//! epoch. Per batch, both branches detect sets on their own scores; with
//! `cross_model` each branch then trains on its peer's sets.
//!
//! The data order depends on `(seed, epoch)` only and branch initialisation
//! on the branch seed, so the run is reproducible and resumable from a
//! checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ambiguity::{
    compute_thresholds, compute_uncertainty, detect, AmbiguitySets, Thresholds, UncertaintyTables,
};
use crate::batch::{Batch, BatchScores};
use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::{FeatureCorpus, Split};
use crate::encoder::{backward, EncoderDims, EncoderParams, ForwardPass, GradientTape};
use crate::error::{ArlError, Result};
use crate::losses::{objective_with_grad, LossBreakdown, LossConfig, ObjectiveTerms};
use crate::similarity::build_corpus_map;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// shared embedding dimension `d`
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub cross_model: bool,
    /// train the text-frame objective alongside the text-video one
    pub text_frame: bool,
    /// `loss.warmup_epochs` is the warmup length
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            embed_dim: 32,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            cross_model: true,
            text_frame: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn warmup_epochs(&self) -> usize {
        self.loss.warmup_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(ArlError::config("batch_size must be at least 2"));
        }
        if self.epochs < self.loss.warmup_epochs {
            return Err(ArlError::config(format!(
                "epochs ({}) must be at least warmup_epochs ({})",
                self.epochs, self.loss.warmup_epochs
            )));
        }
        if self.embed_dim == 0 {
            return Err(ArlError::config("embed_dim must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ArlError::config(
                "learning_rate must be finite and nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(ArlError::config("adam betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(ArlError::config(
                "adam_eps must be positive and weight_decay nonnegative",
            ));
        }
        Ok(())
    }

    pub fn dims_for(&self, corpus: &FeatureCorpus) -> EncoderDims {
        EncoderDims {
            d_t: corpus.text_dim(),
            d_v: corpus.video_dim(),
            l_q: corpus.query_len(),
            l_v: corpus.video_len(),
            d: self.embed_dim,
        }
    }
}

/// First and second moment estimates for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(dims: EncoderDims) -> Self {
        Self {
            m: EncoderParams::zeros(dims),
            v: EncoderParams::zeros(dims),
            step: 0,
        }
    }

    /// One bias-corrected update with decoupled weight decay.
    pub fn update(&mut self, params: &mut EncoderParams, grads: &GradientTape, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        let lr = cfg.learning_rate;
        let g_all = grads.tensors();
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(m_all.iter_mut().zip(v_all.iter_mut()))
        {
            for idx in 0..p.len() {
                m[idx] = cfg.adam_beta1 * m[idx] + (1.0 - cfg.adam_beta1) * g[idx];
                v[idx] = cfg.adam_beta2 * v[idx] + (1.0 - cfg.adam_beta2) * g[idx] * g[idx];
                let mhat = m[idx] / bc1;
                let vhat = v[idx] / bc2;
                p[idx] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p[idx]);
            }
        }
    }
}

/// One encoder with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub seed: u64,
}

impl Branch {
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        Ok(Self {
            params: EncoderParams::init(dims, seed)?,
            adam: AdamState::new(dims),
            seed,
        })
    }
}

/// Branch seeds derived from the run seed.
pub fn branch_seeds(seed: u64) -> [u64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    [rng.random(), rng.random()]
}

/// One branch's per-epoch statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub branch: usize,
    /// batch-mean loss components
    pub loss: LossBreakdown,
    /// `None` during warmup
    pub thresholds: Option<Thresholds>,
    /// mean `|A^q_i|` per query over the epoch (sets this branch trained on)
    pub mean_ambiguous_videos: f64,
    /// mean ambiguous frames per positive pair
    pub mean_ambiguous_frames: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
}

pub const LOG_HEADER: &str = "epoch,branch,phase,batches,nce_t2v,nce_v2t,trip_a,trip_n,video_total,frame_nce,frame_trip_a,frame_trip_n,frame_total,grand_total,tau_s,tau_u,mean_ambiguous_videos,mean_ambiguous_frames";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let (phase, ts, tu) = match &self.thresholds {
            Some(t) => ("arl", format!("{:e}", t.tau_s), format!("{:e}", t.tau_u)),
            None => ("warmup", String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{:e},{:e}",
            self.epoch,
            self.branch,
            phase,
            self.batches,
            l.nce_t2v,
            l.nce_v2t,
            l.trip_a,
            l.trip_n,
            l.video_total,
            l.frame_nce,
            l.frame_trip_a,
            l.frame_trip_n,
            l.frame_total,
            l.grand_total,
            ts,
            tu,
            self.mean_ambiguous_videos,
            self.mean_ambiguous_frames
        )
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{LOG_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(out, "{}", r.csv_row()).unwrap();
        }
        out
    }
}

/// Both branches plus the epoch counter and run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchState {
    pub theta: Branch,
    pub phi: Branch,
    /// epochs completed so far
    pub epoch: usize,
    pub seed: u64,
    pub history: TrainLog,
}

impl DualBranchState {
    pub fn init(corpus: &FeatureCorpus, cfg: &TrainConfig) -> Result<Self> {
        Self::init_with_seeds(corpus, cfg, branch_seeds(cfg.seed))
    }

    pub fn init_with_seeds(
        corpus: &FeatureCorpus,
        cfg: &TrainConfig,
        seeds: [u64; 2],
    ) -> Result<Self> {
        let dims = cfg.dims_for(corpus);
        Ok(Self {
            theta: Branch::init(dims, seeds[0])?,
            phi: Branch::init(dims, seeds[1])?,
            epoch: 0,
            seed: cfg.seed,
            history: TrainLog::default(),
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.theta.params.dims
    }
}

/// Per-epoch detection state of one branch.
#[derive(Debug, Clone)]
pub struct EpochTables {
    pub tables: UncertaintyTables,
    pub thresholds: Thresholds,
}

/// Rebuilds map, uncertainty and thresholds from the given parameters.
pub fn refresh_tables(
    params: &EncoderParams,
    corpus: &FeatureCorpus,
    epoch: usize,
) -> Result<EpochTables> {
    let map = build_corpus_map(params, corpus, epoch)?;
    let tables = compute_uncertainty(&map)?;
    let thresholds = compute_thresholds(&map, corpus, &tables)?;
    Ok(EpochTables { tables, thresholds })
}

/// Forward pass of one branch over a batch.
#[derive(Debug, Clone)]
pub struct BranchForward {
    pub pass: ForwardPass,
    pub scores: BatchScores,
}

pub fn forward_batch(
    params: &EncoderParams,
    corpus: &FeatureCorpus,
    batch: &Batch,
) -> Result<BranchForward> {
    let words: Vec<_> = batch.queries.iter().map(|&i| corpus.query(i)).collect();
    let frames: Vec<_> = batch.videos.iter().map(|&j| corpus.video(j)).collect();
    let pass = ForwardPass::run(params, &words, &frames)?;
    let scores = BatchScores::compute(&pass)?;
    Ok(BranchForward { pass, scores })
}

/// Loss and parameter gradient on fixed sets.
pub fn loss_and_grad(
    params: &EncoderParams,
    fwd: &BranchForward,
    batch: &Batch,
    sets: &AmbiguitySets,
    loss: &LossConfig,
    terms: ObjectiveTerms,
) -> Result<(LossBreakdown, GradientTape)> {
    let (bd, d_sims) = objective_with_grad(batch, &fwd.scores, sets, loss, terms)?;
    let adjoint = fwd.scores.embedding_adjoint(&fwd.pass, &d_sims);
    let tape = backward(params, &fwd.pass, &adjoint)?;
    Ok((bd, tape))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: GradientTape,
}

/// Computes the objective on the provided sets, backpropagates and applies one
/// optimizer update to `branch`.
pub fn step(
    branch: &mut Branch,
    corpus: &FeatureCorpus,
    batch: &Batch,
    sets: &AmbiguitySets,
    cfg: &TrainConfig,
    terms: ObjectiveTerms,
) -> Result<StepOutput> {
    let fwd = forward_batch(&branch.params, corpus, batch)?;
    step_with_forward(branch, &fwd, batch, sets, cfg, terms)
}

pub fn step_with_forward(
    branch: &mut Branch,
    fwd: &BranchForward,
    batch: &Batch,
    sets: &AmbiguitySets,
    cfg: &TrainConfig,
    terms: ObjectiveTerms,
) -> Result<StepOutput> {
    let (loss, grads) = loss_and_grad(&branch.params, fwd, batch, sets, &cfg.loss, terms)?;
    branch.adam.update(&mut branch.params, &grads, cfg);
    branch.params.check_finite()?;
    Ok(StepOutput { loss, grads })
}

/// Query order for one epoch; identical for every branch.
pub fn epoch_batches(
    corpus: &FeatureCorpus,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..corpus.n_queries()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1000 + epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks_exact(cfg.batch_size)
        .map(|chunk| Batch::from_queries(&corpus.pairing, chunk))
        .collect()
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.nce_t2v += l.nce_t2v;
    acc.nce_v2t += l.nce_v2t;
    acc.trip_a += l.trip_a;
    acc.trip_n += l.trip_n;
    acc.video_total += l.video_total;
    acc.frame_nce += l.frame_nce;
    acc.frame_trip_a += l.frame_trip_a;
    acc.frame_trip_n += l.frame_trip_n;
    acc.frame_total += l.frame_total;
    acc.grand_total += l.grand_total;
}

fn scale(acc: &mut LossBreakdown, s: f64) {
    for v in [
        &mut acc.nce_t2v,
        &mut acc.nce_v2t,
        &mut acc.trip_a,
        &mut acc.trip_n,
        &mut acc.video_total,
        &mut acc.frame_nce,
        &mut acc.frame_trip_a,
        &mut acc.frame_trip_n,
        &mut acc.frame_total,
        &mut acc.grand_total,
    ] {
        *v *= s;
    }
}

/// Runs one epoch over any number of branches. With two branches and
/// `cross_model`, branch `b` trains on the sets of branch `1 - b`.
pub fn run_epoch(
    branches: &mut [&mut Branch],
    corpus: &FeatureCorpus,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<EpochLog>> {
    let warmup = epoch < cfg.warmup_epochs();
    let tables: Vec<Option<EpochTables>> = if warmup {
        branches.iter().map(|_| None).collect()
    } else {
        branches
            .iter()
            .map(|b| refresh_tables(&b.params, corpus, epoch).map(Some))
            .collect::<Result<_>>()?
    };
    let exchange = cfg.cross_model && branches.len() == 2;
    let terms = ObjectiveTerms {
        frame: cfg.text_frame && !warmup,
    };

    let batches = epoch_batches(corpus, cfg, epoch)?;
    let mut sums = vec![LossBreakdown::default(); branches.len()];
    let mut amb_videos = vec![0.0; branches.len()];
    let mut amb_frames = vec![0.0; branches.len()];

    for (bi, batch) in batches.iter().enumerate() {
        let fwds = branches
            .iter()
            .map(|b| forward_batch(&b.params, corpus, batch))
            .collect::<Result<Vec<_>>>()?;
        let own_sets = fwds
            .iter()
            .zip(&tables)
            .map(|(f, t)| match t {
                None => Ok(AmbiguitySets::all_negative(batch, &f.scores)),
                Some(t) => detect(batch, &f.scores, &t.tables, &t.thresholds),
            })
            .collect::<Result<Vec<_>>>()?;
        for (b, branch) in branches.iter_mut().enumerate() {
            let sets = if exchange {
                &own_sets[1 - b]
            } else {
                &own_sets[b]
            };
            let out = step_with_forward(branch, &fwds[b], batch, sets, cfg, terms).map_err(
                |e| match e {
                    ArlError::Numerical { tensor, reason } => ArlError::numerical(
                        tensor,
                        format!("{reason} (epoch {epoch}, batch {bi}, branch {b})"),
                    ),
                    other => other,
                },
            )?;
            accumulate(&mut sums[b], &out.loss);
            amb_videos[b] += sets.ambiguous_pair_count() as f64 / batch.n_rows() as f64;
            amb_frames[b] += sets.ambiguous_frame_count() as f64 / batch.n_rows() as f64;
        }
    }

    let n = batches.len().max(1) as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, mut loss)| {
            scale(&mut loss, 1.0 / n);
            EpochLog {
                epoch,
                branch: b,
                loss,
                thresholds: tables[b].as_ref().map(|t| t.thresholds),
                mean_ambiguous_videos: amb_videos[b] / n,
                mean_ambiguous_frames: amb_frames[b] / n,
                batches: batches.len(),
            }
        })
        .collect())
}

fn check_corpus(corpus: &FeatureCorpus, dims: EncoderDims) -> Result<()> {
    if corpus.split != Split::Train {
        return Err(ArlError::config("training requires the train split"));
    }
    if corpus.n_queries() < 2 {
        return Err(ArlError::config("training needs at least two queries"));
    }
    let want = (dims.d_t, dims.d_v, dims.l_q, dims.l_v);
    let got = (
        corpus.text_dim(),
        corpus.video_dim(),
        corpus.query_len(),
        corpus.video_len(),
    );
    if want != got {
        return Err(ArlError::Dimension(format!(
            "corpus dims (d_t, d_v, l_q, l_v) = {got:?} but state expects {want:?}"
        )));
    }
    Ok(())
}

/// Continues training `state` up to `cfg.epochs`.
pub fn train_until(
    state: &mut DualBranchState,
    corpus: &FeatureCorpus,
    cfg: &TrainConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    check_corpus(corpus, state.dims())?;
    if cfg.batch_size > corpus.n_queries() {
        return Err(ArlError::config(format!(
            "batch_size {} exceeds {} train queries",
            cfg.batch_size,
            corpus.n_queries()
        )));
    }
    while state.epoch < until.min(cfg.epochs) {
        let epoch = state.epoch;
        let logs = run_epoch(&mut [&mut state.theta, &mut state.phi], corpus, cfg, epoch)?;
        for l in &logs {
            if !l.loss.grand_total.is_finite() {
                return Err(ArlError::numerical(
                    "loss",
                    format!("non-finite epoch loss at epoch {epoch}"),
                ));
            }
        }
        state.history.rows.extend(logs);
        state.epoch += 1;
    }
    Ok(())
}

/// Full run from fresh initialization.
pub fn train(corpus: &FeatureCorpus, cfg: &TrainConfig) -> Result<DualBranchState> {
    cfg.validate()?;
    let mut state = DualBranchState::init(corpus, cfg)?;
    train_until(&mut state, corpus, cfg, cfg.epochs)?;
    Ok(state)
}

/// Trains one branch by itself, for isolation comparisons.
pub fn train_single_branch(
    corpus: &FeatureCorpus,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Branch, TrainLog)> {
    cfg.validate()?;
    let dims = cfg.dims_for(corpus);
    check_corpus(corpus, dims)?;
    let mut branch = Branch::init(dims, seed)?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        log.rows
            .extend(run_epoch(&mut [&mut branch], corpus, cfg, epoch)?);
    }
    Ok((branch, log))
}

const CKPT_MAGIC: &[u8; 4] = b"PRVK";
const CKPT_VERSION: u32 = 1;

fn write_params(w: &mut ByteWriter, p: &EncoderParams) {
    for (_, t) in p.tensors() {
        w.f64s(t.iter());
    }
}

fn read_params(r: &mut ByteReader<'_>, dims: EncoderDims, what: &str) -> Result<EncoderParams> {
    let mut p = EncoderParams::zeros(dims);
    for (name, t) in p.tensors_mut() {
        let vals = r.f64s(t.len(), &format!("{what}.{name}"))?;
        t.copy_from_slice(&vals);
    }
    Ok(p)
}

fn write_log_row(w: &mut ByteWriter, row: &EpochLog) {
    w.u64(row.epoch as u64);
    w.u64(row.branch as u64);
    w.u64(row.batches as u64);
    let l = &row.loss;
    w.f64s(&[
        l.nce_t2v,
        l.nce_v2t,
        l.trip_a,
        l.trip_n,
        l.video_total,
        l.frame_nce,
        l.frame_trip_a,
        l.frame_trip_n,
        l.frame_total,
        l.grand_total,
        row.mean_ambiguous_videos,
        row.mean_ambiguous_frames,
    ]);
    match &row.thresholds {
        Some(t) => {
            w.u32(1);
            w.u64(t.epoch as u64);
            w.f64s(&[t.tau_s, t.tau_u]);
        }
        None => w.u32(0),
    }
}

fn read_log_row(r: &mut ByteReader<'_>) -> Result<EpochLog> {
    let epoch = r.u64("history.epoch")? as usize;
    let branch = r.u64("history.branch")? as usize;
    let batches = r.u64("history.batches")? as usize;
    let v = r.f64s(12, "history.loss")?;
    let loss = LossBreakdown {
        nce_t2v: v[0],
        nce_v2t: v[1],
        trip_a: v[2],
        trip_n: v[3],
        video_total: v[4],
        frame_nce: v[5],
        frame_trip_a: v[6],
        frame_trip_n: v[7],
        frame_total: v[8],
        grand_total: v[9],
    };
    let thresholds = match r.u32("history.has_thresholds")? {
        0 => None,
        1 => {
            let te = r.u64("history.threshold_epoch")? as usize;
            let t = r.f64s(2, "history.thresholds")?;
            Some(Thresholds {
                tau_s: t[0],
                tau_u: t[1],
                epoch: te,
            })
        }
        other => {
            return Err(ArlError::format(
                "history.has_thresholds",
                format!("invalid flag {other}"),
            ))
        }
    };
    Ok(EpochLog {
        epoch,
        branch,
        loss,
        thresholds,
        mean_ambiguous_videos: v[10],
        mean_ambiguous_frames: v[11],
        batches,
    })
}

impl DualBranchState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut w = ByteWriter::new();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u64(self.seed);
        w.u64(self.epoch as u64);
        for d in [dims.d_t, dims.d_v, dims.l_q, dims.l_v, dims.d] {
            w.u32(d as u32);
        }
        for b in [&self.theta, &self.phi] {
            w.u64(b.seed);
            w.u64(b.adam.step);
            write_params(&mut w, &b.params);
            write_params(&mut w, &b.adam.m);
            write_params(&mut w, &b.adam.v);
        }
        w.u64(self.history.rows.len() as u64);
        for row in &self.history.rows {
            write_log_row(&mut w, row);
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        r.magic(CKPT_MAGIC, "magic")?;
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(ArlError::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let seed = r.u64("seed")?;
        let epoch = r.u64("epoch")? as usize;
        let mut d = [0usize; 5];
        for (slot, name) in d.iter_mut().zip(["d_t", "d_v", "l_q", "l_v", "d"]) {
            let v = r.u32(name)? as usize;
            if v == 0 || v > 1 << 16 {
                return Err(ArlError::format(name, format!("implausible dimension {v}")));
            }
            *slot = v;
        }
        let dims = EncoderDims {
            d_t: d[0],
            d_v: d[1],
            l_q: d[2],
            l_v: d[3],
            d: d[4],
        };
        let mut branches = Vec::with_capacity(2);
        for name in ["theta", "phi"] {
            let bseed = r.u64(&format!("{name}.seed"))?;
            let step = r.u64(&format!("{name}.adam_step"))?;
            let params = read_params(&mut r, dims, name)?;
            let m = read_params(&mut r, dims, &format!("{name}.adam_m"))?;
            let v = read_params(&mut r, dims, &format!("{name}.adam_v"))?;
            params
                .check_finite()
                .map_err(|e| ArlError::format(format!("{name}.params"), e.to_string()))?;
            branches.push(Branch {
                params,
                adam: AdamState { m, v, step },
                seed: bseed,
            });
        }
        let n_rows = r.u64("history.len")? as usize;
        let mut rows = Vec::with_capacity(n_rows.min(1 << 16));
        for _ in 0..n_rows {
            rows.push(read_log_row(&mut r)?);
        }
        r.finish("payload")?;
        let phi = branches.pop().unwrap();
        let theta = branches.pop().unwrap();
        Ok(Self {
            theta,
            phi,
            epoch,
            seed,
            history: TrainLog { rows },
        })
    }
}

pub fn checkpoint(state: &DualBranchState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, state.to_bytes())?;
    Ok(())
}

pub fn resume(path: impl AsRef<Path>) -> Result<DualBranchState> {
    DualBranchState::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, CorpusSpec};

    fn tiny_corpus() -> FeatureCorpus {
        generate_synthetic(&CorpusSpec {
            n_q: 12,
            n_v: 6,
            l_q: 2,
            l_v: 4,
            d_t: 5,
            d_v: 6,
            seed: 11,
            segments_per_video: 2,
            ambiguity_rate: 0.5,
            noise_scale: 0.3,
            latent_dim: 4,
            plants_per_query: 1,
            split: Split::Train,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            embed_dim: 6,
            loss: LossConfig {
                warmup_epochs: 1,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 1,
            ..tiny_cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        }
        .validate()
        .is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn batches_drop_the_partial_tail() {
        let c = tiny_corpus();
        let cfg = TrainConfig {
            batch_size: 5,
            ..tiny_cfg()
        };
        let b = epoch_batches(&c, &cfg, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert_ne!(b, epoch_batches(&c, &cfg, 1).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let c = tiny_corpus();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let mut branch = Branch::init(cfg.dims_for(&c), 1).unwrap();
        let before = branch.params.clone();
        let batch = &epoch_batches(&c, &cfg, 0).unwrap()[0];
        let fwd = forward_batch(&branch.params, &c, batch).unwrap();
        let sets = AmbiguitySets::all_negative(batch, &fwd.scores);
        let out = step(
            &mut branch,
            &c,
            batch,
            &sets,
            &cfg,
            ObjectiveTerms { frame: true },
        )
        .unwrap();
        assert_eq!(branch.params, before);
        assert!(out.loss.grand_total > 0.0);
    }

    #[test]
    fn warmup_only_run_has_no_thresholds() {
        let c = tiny_corpus();
        let cfg = TrainConfig {
            epochs: 2,
            loss: LossConfig {
                warmup_epochs: 2,
                ..LossConfig::default()
            },
            ..tiny_cfg()
        };
        let s = train(&c, &cfg).unwrap();
        assert_eq!(s.history.rows.len(), 4);
        assert!(s.history.rows.iter().all(|r| r.thresholds.is_none()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = tiny_corpus();
        let s = train(&c, &tiny_cfg()).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(DualBranchState::from_bytes(&bytes).unwrap(), s);
        assert!(matches!(
            DualBranchState::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ArlError::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            DualBranchState::from_bytes(&bad),
            Err(ArlError::Format { .. })
        ));
    }

    #[test]
    fn test_split_is_rejected() {
        let mut c = tiny_corpus();
        c.split = Split::Test;
        assert!(matches!(train(&c, &tiny_cfg()), Err(ArlError::Config(_))));
    }
}
