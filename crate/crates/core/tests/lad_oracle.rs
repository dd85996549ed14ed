use std::collections::BTreeSet;

use arl::ambiguity::{detect_frame_ambiguity, detect_video_ambiguity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::lad::{brute, random_case};

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

#[test]
fn detectors_match_brute_force_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nonempty = 0;
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let want = brute(&c);
        let video = detect_video_ambiguity(&c.batch, &c.scores, &c.tables, &c.th).unwrap();
        let frames = detect_frame_ambiguity(&c.batch, &c.scores, &c.tables, &c.th).unwrap();
        for r in 0..c.batch.n_rows() {
            assert_eq!(set(&video.ambiguous_videos[r]), want.ambiguous_videos[r]);
            assert_eq!(set(&frames[r].ambiguous_frames), want.ambiguous_frames[r]);
            assert_eq!(set(&frames[r].ambiguous_queries), want.frame_queries[r]);
            nonempty += want.ambiguous_videos[r].len();
        }
        for col in 0..c.batch.n_cols() {
            assert_eq!(
                set(&video.ambiguous_queries[col]),
                want.ambiguous_queries[col]
            );
        }
    }
    assert!(nonempty > 0);
}

#[test]
fn ambiguous_and_negative_sets_partition_the_unpaired_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let c = random_case(&mut rng);
        let video = detect_video_ambiguity(&c.batch, &c.scores, &c.tables, &c.th).unwrap();
        for r in 0..c.batch.n_rows() {
            let mut all: Vec<usize> = video.ambiguous_videos[r]
                .iter()
                .chain(&video.negative_videos[r])
                .copied()
                .collect();
            all.sort_unstable();
            let want: Vec<usize> = (0..c.batch.n_cols())
                .filter(|&col| !c.batch.is_positive(r, col))
                .collect();
            assert_eq!(all, want);
        }
        let frames = detect_frame_ambiguity(&c.batch, &c.scores, &c.tables, &c.th).unwrap();
        for fs in &frames {
            assert_eq!(
                fs.ambiguous_frames.len() + fs.negative_frames.len(),
                c.scores.l_v() - 1
            );
            assert!(!fs.ambiguous_frames.contains(&fs.best_frame));
        }
    }
}
