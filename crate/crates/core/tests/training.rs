use arl::losses::ObjectiveTerms;
use arl::trainer::{
    branch_seeds, epoch_batches, forward_batch, step, train_single_branch, train_until, Branch,
};
use arl::{
    checkpoint, generate_synthetic, resume, train, AmbiguitySets, CorpusSpec, DualBranchState,
    FeatureCorpus, Split, TrainConfig,
};

fn corpus() -> FeatureCorpus {
    generate_synthetic(&CorpusSpec {
        n_q: 24,
        n_v: 12,
        l_q: 3,
        l_v: 8,
        d_t: 6,
        d_v: 6,
        seed: 4,
        latent_dim: 6,
        noise_scale: 0.2,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn cfg() -> TrainConfig {
    let mut c = TrainConfig {
        epochs: 4,
        batch_size: 8,
        embed_dim: 6,
        seed: 17,
        ..TrainConfig::default()
    };
    c.loss.warmup_epochs = 1;
    c
}

#[test]
fn without_exchange_each_branch_follows_its_solo_trajectory() {
    let data = corpus();
    let cfg = TrainConfig {
        cross_model: false,
        ..cfg()
    };
    let state = train(&data, &cfg).unwrap();
    let seeds = branch_seeds(cfg.seed);
    let (solo_theta, log_theta) = train_single_branch(&data, &cfg, seeds[0]).unwrap();
    let (solo_phi, _) = train_single_branch(&data, &cfg, seeds[1]).unwrap();
    assert_eq!(state.theta, solo_theta);
    assert_eq!(state.phi, solo_phi);
    let dual_theta: Vec<_> = state
        .history
        .rows
        .iter()
        .filter(|r| r.branch == 0)
        .cloned()
        .collect();
    assert_eq!(dual_theta, log_theta.rows);
}

#[test]
fn exchange_couples_the_branches() {
    let data = corpus();
    let with = train(&data, &cfg()).unwrap();
    let without = train(
        &data,
        &TrainConfig {
            cross_model: false,
            ..cfg()
        },
    )
    .unwrap();
    assert_ne!(with.theta.params, without.theta.params);
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = corpus();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&data, &cfg()).unwrap();
    let b = train(&data, &cfg()).unwrap();
    checkpoint(&a, dir.path().join("a.prvk")).unwrap();
    checkpoint(&b, dir.path().join("b.prvk")).unwrap();
    let bytes_a = std::fs::read(dir.path().join("a.prvk")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b.prvk")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.history.to_csv(), b.history.to_csv());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let data = corpus();
    let cfg = cfg();
    let full = train(&data, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.prvk");
    let mut partial = DualBranchState::init(&data, &cfg).unwrap();
    train_until(&mut partial, &data, &cfg, 2).unwrap();
    let before = partial.clone();
    checkpoint(&partial, &path).unwrap();
    assert_eq!(partial, before);
    let mut resumed = resume(&path).unwrap();
    assert_eq!(resumed, partial);
    train_until(&mut resumed, &data, &cfg, cfg.epochs).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn corrupted_checkpoint_is_a_format_error() {
    let data = corpus();
    let state = DualBranchState::init(&data, &cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.prvk");
    checkpoint(&state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(resume(&path).unwrap_err().kind(), "format");
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(resume(&path).unwrap_err().kind(), "format");
}

#[test]
fn swapping_branch_seeds_swaps_the_trajectories() {
    let data = corpus();
    let cfg = cfg();
    let [a, b] = branch_seeds(cfg.seed);
    let mut fwd = DualBranchState::init_with_seeds(&data, &cfg, [a, b]).unwrap();
    let mut rev = DualBranchState::init_with_seeds(&data, &cfg, [b, a]).unwrap();
    train_until(&mut fwd, &data, &cfg, cfg.epochs).unwrap();
    train_until(&mut rev, &data, &cfg, cfg.epochs).unwrap();
    assert_eq!(fwd.theta, rev.phi);
    assert_eq!(fwd.phi, rev.theta);
}

#[test]
fn warmup_only_run_logs_no_thresholds() {
    let data = corpus();
    let mut cfg = cfg();
    cfg.loss.warmup_epochs = cfg.epochs;
    let state = train(&data, &cfg).unwrap();
    assert!(state.history.rows.iter().all(|r| r.thresholds.is_none()));
    assert!(state
        .history
        .to_csv()
        .lines()
        .skip(1)
        .all(|l| l.contains(",warmup,")));
}

#[test]
fn zero_learning_rate_step_reports_loss_and_keeps_params() {
    let data = corpus();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..cfg()
    };
    let mut branch = Branch::init(cfg.dims_for(&data), 1).unwrap();
    let before = branch.params.clone();
    let batch = &epoch_batches(&data, &cfg, 0).unwrap()[0];
    let fwd = forward_batch(&branch.params, &data, batch).unwrap();
    let sets = AmbiguitySets::all_negative(batch, &fwd.scores);
    let out = step(
        &mut branch,
        &data,
        batch,
        &sets,
        &cfg,
        ObjectiveTerms { frame: true },
    )
    .unwrap();
    assert!(out.loss.grand_total > 0.0);
    assert_eq!(branch.params, before);
}

#[test]
fn the_sets_a_branch_trains_on_change_its_loss() {
    let data = corpus();
    let cfg = cfg();
    let batch = &epoch_batches(&data, &cfg, 0).unwrap()[0];
    let mut branch = Branch::init(cfg.dims_for(&data), 1).unwrap();
    let fwd = forward_batch(&branch.params, &data, batch).unwrap();
    let own = AmbiguitySets::all_negative(batch, &fwd.scores);
    let mut peer = own.clone();
    let r = 0;
    let c = peer.video.negative_videos[r].remove(0);
    peer.video.ambiguous_videos[r].push(c);
    let pos = peer.video.negative_queries[c]
        .iter()
        .position(|&x| x == r)
        .unwrap();
    peer.video.negative_queries[c].remove(pos);
    peer.video.ambiguous_queries[c].push(r);
    assert_ne!(own.video, peer.video);
    let terms = ObjectiveTerms { frame: true };
    let mut other = branch.clone();
    let a = step(&mut branch, &data, batch, &own, &cfg, terms).unwrap();
    let b = step(&mut other, &data, batch, &peer, &cfg, terms).unwrap();
    assert_ne!(a.loss.grand_total, b.loss.grand_total);
}

#[test]
fn training_rejects_the_test_split() {
    let mut data = corpus();
    data.split = Split::Test;
    assert_eq!(train(&data, &cfg()).unwrap_err().kind(), "config");
}
