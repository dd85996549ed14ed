//! Feature corpora: storage, synthetic generation with planted ambiguity, and
//! the `.prvc` binary file format.
//!
//! A synthetic video is a concatenation of `segments_per_video` segments, each
//! showing one latent concept. Every query describes exactly one segment of its
//! paired video. An ambiguous query has its concept copied into other videos,
//! which makes those (query, other video) pairs partially relevant even though
//! they are unpaired.
//!
//! File layout (all little-endian):
//!
//! ```text
//! magic "PRVC" | version u32 | n_q u32 | n_v u32 | l_q u32 | l_v u32 | d_t u32 | d_v u32 | flags u32
//! text features   n_q*l_q*d_t f32, row-major
//! video features  n_v*l_v*d_v f32, row-major
//! pairing         n_q u32
//! [flags & 1]     n_planted u64, then n_planted (query u32, video u32)
//! ```
//!
//! Flag bit 1 marks the test split.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{ArlError, Result};

const MAGIC: &[u8; 4] = b"PRVC";
const VERSION: u32 = 1;
const FLAG_PLANTED: u32 = 1;
const FLAG_TEST: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(ArlError::config(format!("unknown split `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Pre-extracted word and frame features with their one-to-one pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCorpus {
    /// `n_q × l_q × d_t`
    pub text_features: Array3<f32>,
    /// `n_v × l_v × d_v`
    pub video_features: Array3<f32>,
    /// query index → positive video index
    pub pairing: Vec<usize>,
    pub split: Split,
    /// Sorted (query, video) pairs sharing a segment concept; synthetic corpora only.
    pub planted_ambiguity: Option<Vec<(usize, usize)>>,
}

impl FeatureCorpus {
    /// Builds a corpus and checks all of its invariants.
    pub fn new(
        text_features: Array3<f32>,
        video_features: Array3<f32>,
        pairing: Vec<usize>,
        split: Split,
        planted_ambiguity: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let corpus = Self {
            text_features,
            video_features,
            pairing,
            split,
            planted_ambiguity,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let (n_q, l_q, d_t) = self.text_features.dim();
        let (n_v, l_v, d_v) = self.video_features.dim();
        if n_q == 0 || n_v == 0 || l_q == 0 || l_v == 0 || d_t == 0 || d_v == 0 {
            return Err(ArlError::Dimension(format!(
                "corpus dimensions must be positive: n_q={n_q} l_q={l_q} d_t={d_t} n_v={n_v} l_v={l_v} d_v={d_v}"
            )));
        }
        if self.pairing.len() != n_q {
            return Err(ArlError::Dimension(format!(
                "pairing has {} entries for {} queries",
                self.pairing.len(),
                n_q
            )));
        }
        if let Some(&bad) = self.pairing.iter().find(|&&j| j >= n_v) {
            return Err(ArlError::Index(format!(
                "pairing targets video {bad} but corpus has {n_v}"
            )));
        }
        if let Some(planted) = &self.planted_ambiguity {
            for &(i, j) in planted {
                if i >= n_q || j >= n_v {
                    return Err(ArlError::Index(format!(
                        "planted pair ({i}, {j}) out of range"
                    )));
                }
                if self.pairing[i] == j {
                    return Err(ArlError::config(format!(
                        "planted pair ({i}, {j}) duplicates a positive pair"
                    )));
                }
            }
        }
        if self.text_features.iter().any(|v| !v.is_finite()) {
            return Err(ArlError::numerical("text_features", "non-finite value"));
        }
        if self.video_features.iter().any(|v| !v.is_finite()) {
            return Err(ArlError::numerical("video_features", "non-finite value"));
        }
        Ok(())
    }

    pub fn n_queries(&self) -> usize {
        self.text_features.dim().0
    }

    pub fn n_videos(&self) -> usize {
        self.video_features.dim().0
    }

    pub fn query_len(&self) -> usize {
        self.text_features.dim().1
    }

    pub fn video_len(&self) -> usize {
        self.video_features.dim().1
    }

    pub fn text_dim(&self) -> usize {
        self.text_features.dim().2
    }

    pub fn video_dim(&self) -> usize {
        self.video_features.dim().2
    }

    pub fn query(&self, i: usize) -> ArrayView2<'_, f32> {
        self.text_features.index_axis(ndarray::Axis(0), i)
    }

    pub fn video(&self, j: usize) -> ArrayView2<'_, f32> {
        self.video_features.index_axis(ndarray::Axis(0), j)
    }

    pub fn is_planted(&self, i: usize, j: usize) -> bool {
        self.planted_ambiguity
            .as_ref()
            .is_some_and(|p| p.binary_search(&(i, j)).is_ok())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let data = fs::read(path)?;
        Self::from_bytes(&data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n_q, l_q, d_t) = self.text_features.dim();
        let (n_v, l_v, d_v) = self.video_features.dim();
        let mut flags = 0;
        if self.planted_ambiguity.is_some() {
            flags |= FLAG_PLANTED;
        }
        if self.split == Split::Test {
            flags |= FLAG_TEST;
        }
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for dim in [n_q, n_v, l_q, l_v, d_t, d_v] {
            w.u32(dim as u32);
        }
        w.u32(flags);
        w.f32s(self.text_features.iter());
        w.f32s(self.video_features.iter());
        for &j in &self.pairing {
            w.u32(j as u32);
        }
        if let Some(planted) = &self.planted_ambiguity {
            w.u64(planted.len() as u64);
            for &(i, j) in planted {
                w.u32(i as u32);
                w.u32(j as u32);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        r.magic(MAGIC, "magic")?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ArlError::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let mut dims = [0usize; 6];
        for (slot, name) in dims
            .iter_mut()
            .zip(["n_q", "n_v", "l_q", "l_v", "d_t", "d_v"])
        {
            let v = r.u32(name)? as usize;
            if v == 0 {
                return Err(ArlError::format(name, "dimension must be positive"));
            }
            *slot = v;
        }
        let [n_q, n_v, l_q, l_v, d_t, d_v] = dims;
        let flags = r.u32("flags")?;
        if flags & !(FLAG_PLANTED | FLAG_TEST) != 0 {
            return Err(ArlError::format(
                "flags",
                format!("unknown bits {flags:#x}"),
            ));
        }
        let text = r.f32s(n_q * l_q * d_t, "text_features")?;
        let video = r.f32s(n_v * l_v * d_v, "video_features")?;
        let mut pairing = Vec::with_capacity(n_q);
        for _ in 0..n_q {
            pairing.push(r.u32("pairing")? as usize);
        }
        let planted = if flags & FLAG_PLANTED != 0 {
            let n = r.u64("planted_count")? as usize;
            let mut pairs = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let i = r.u32("planted_ambiguity")? as usize;
                let j = r.u32("planted_ambiguity")? as usize;
                pairs.push((i, j));
            }
            Some(pairs)
        } else {
            None
        };
        r.finish("payload")?;
        let split = if flags & FLAG_TEST != 0 {
            Split::Test
        } else {
            Split::Train
        };
        let text_features = Array3::from_shape_vec((n_q, l_q, d_t), text)
            .map_err(|e| ArlError::format("text_features", e.to_string()))?;
        let video_features = Array3::from_shape_vec((n_v, l_v, d_v), video)
            .map_err(|e| ArlError::format("video_features", e.to_string()))?;
        FeatureCorpus::new(text_features, video_features, pairing, split, planted).map_err(|e| {
            match e {
                ArlError::Format { .. } => e,
                other => ArlError::format("payload", other.to_string()),
            }
        })
    }
}

/// Parameters of the synthetic planted-ambiguity generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_q: usize,
    pub n_v: usize,
    pub l_q: usize,
    pub l_v: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub seed: u64,
    pub segments_per_video: usize,
    pub ambiguity_rate: f64,
    pub noise_scale: f64,
    /// Dimension of the shared concept space before the per-modality maps.
    pub latent_dim: usize,
    /// How many other videos receive an ambiguous query's concept.
    pub plants_per_query: usize,
    /// Train and test corpora with the same seed share the feature maps but
    /// draw disjoint concepts.
    pub split: Split,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_q: 200,
            n_v: 100,
            l_q: 4,
            l_v: 16,
            d_t: 24,
            d_v: 24,
            seed: 0,
            segments_per_video: 4,
            ambiguity_rate: 0.3,
            noise_scale: 0.5,
            latent_dim: 16,
            plants_per_query: 2,
            split: Split::Train,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_q", self.n_q),
            ("n_v", self.n_v),
            ("l_q", self.l_q),
            ("l_v", self.l_v),
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("segments_per_video", self.segments_per_video),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(ArlError::config(format!("{name} must be positive")));
            }
        }
        if self.segments_per_video > self.l_v {
            return Err(ArlError::config(format!(
                "segments_per_video ({}) exceeds l_v ({})",
                self.segments_per_video, self.l_v
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(ArlError::config(format!(
                "ambiguity_rate {} outside [0, 1]",
                self.ambiguity_rate
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(ArlError::config(format!(
                "noise_scale {} must be finite and nonnegative",
                self.noise_scale
            )));
        }
        if self.n_q > u32::MAX as usize || self.n_v > u32::MAX as usize {
            return Err(ArlError::config("corpus too large for the file format"));
        }
        Ok(())
    }
}

/// Segment index of every frame: `l_v` frames split into contiguous runs,
/// earlier segments taking the remainder.
pub fn frame_segments(l_v: usize, segments: usize) -> Vec<usize> {
    let base = l_v / segments;
    let extra = l_v % segments;
    let mut out = Vec::with_capacity(l_v);
    for s in 0..segments {
        let len = base + usize::from(s < extra);
        out.extend(std::iter::repeat_n(s, len));
    }
    out
}

/// Layout of concepts over video segments, before any features are drawn.
#[derive(Debug, Clone)]
pub struct ConceptLayout {
    /// `slots[j][s]` = concept id shown in segment `s` of video `j`
    pub slots: Vec<Vec<usize>>,
    pub pairing: Vec<usize>,
    /// segment of the paired video each query describes
    pub anchor_segment: Vec<usize>,
    pub n_concepts: usize,
}

impl ConceptLayout {
    pub fn query_concept(&self, i: usize) -> usize {
        self.slots[self.pairing[i]][self.anchor_segment[i]]
    }

    /// Every unpaired (query, video) pair whose video shows the query's concept.
    pub fn shared_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.pairing.len() {
            let c = self.query_concept(i);
            for (j, slots) in self.slots.iter().enumerate() {
                if j != self.pairing[i] && slots.contains(&c) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn layout_concepts(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> ConceptLayout {
    let s_count = spec.segments_per_video;
    let mut slots: Vec<Vec<usize>> = (0..spec.n_v)
        .map(|j| (0..s_count).map(|s| j * s_count + s).collect())
        .collect();
    let n_concepts = spec.n_v * s_count;

    let pairing: Vec<usize> = (0..spec.n_q).map(|i| i % spec.n_v).collect();
    // Captions of a video take its segments in a random order.
    let orders: Vec<Vec<usize>> = (0..spec.n_v)
        .map(|_| {
            let mut o: Vec<usize> = (0..s_count).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let anchor_segment: Vec<usize> = (0..spec.n_q)
        .map(|i| orders[pairing[i]][(i / spec.n_v) % s_count])
        .collect();

    let mut anchored = vec![vec![false; s_count]; spec.n_v];
    for i in 0..spec.n_q {
        anchored[pairing[i]][anchor_segment[i]] = true;
    }
    let mut planted_slot = vec![vec![false; s_count]; spec.n_v];

    let plants = spec.plants_per_query.min(spec.n_v - 1);
    for i in 0..spec.n_q {
        if !rng.random_bool(spec.ambiguity_rate) || plants == 0 {
            continue;
        }
        let concept = slots[pairing[i]][anchor_segment[i]];
        let others = sample(rng, spec.n_v - 1, plants);
        for o in others.iter() {
            let j = if o >= pairing[i] { o + 1 } else { o };
            // Free segments first so other captions keep their concept.
            let free: Vec<usize> = (0..s_count)
                .filter(|&s| !anchored[j][s] && !planted_slot[j][s])
                .collect();
            let seg = if free.is_empty() {
                rng.random_range(0..s_count)
            } else {
                free[rng.random_range(0..free.len())]
            };
            slots[j][seg] = concept;
            planted_slot[j][seg] = true;
        }
    }

    ConceptLayout {
        slots,
        pairing,
        anchor_segment,
        n_concepts,
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy_projection(
    rng: &mut ChaCha8Rng,
    concept: &[f64],
    map: &Array2<f64>,
    noise_scale: f64,
    out: &mut [f32],
) {
    let latent = concept.len();
    let per_coord = noise_scale / (latent as f64).sqrt();
    let x: Vec<f64> = concept
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            c + per_coord * z
        })
        .collect();
    for (col, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (r, xv) in x.iter().enumerate() {
            acc += xv * map[[r, col]];
        }
        *o = acc as f32;
    }
}

/// Draws the concept layout only; exposed so tests can inspect pre-noise structure.
pub fn synthetic_layout(spec: &CorpusSpec) -> Result<ConceptLayout> {
    spec.validate()?;
    let mut rng = sample_rng(spec);
    Ok(layout_concepts(spec, &mut rng))
}

fn sample_rng(spec: &CorpusSpec) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match spec.split {
        Split::Train => 1,
        Split::Test => 2,
    });
    rng
}

/// Generates a synthetic corpus with planted ambiguity. Pure function of `spec`.
pub fn generate_synthetic(spec: &CorpusSpec) -> Result<FeatureCorpus> {
    spec.validate()?;

    // Feature maps depend on the seed only, so both splits see the same "extractor".
    let mut world = ChaCha8Rng::seed_from_u64(spec.seed);
    world.set_stream(0);
    let map_scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let text_map = gaussian_matrix(&mut world, spec.latent_dim, spec.d_t, map_scale);
    let video_map = gaussian_matrix(&mut world, spec.latent_dim, spec.d_v, map_scale);

    let mut rng = sample_rng(spec);
    let layout = layout_concepts(spec, &mut rng);
    let concepts: Vec<Vec<f64>> = (0..layout.n_concepts)
        .map(|_| unit_vector(&mut rng, spec.latent_dim))
        .collect();

    let mut text = Array3::<f32>::zeros((spec.n_q, spec.l_q, spec.d_t));
    for i in 0..spec.n_q {
        let concept = &concepts[layout.query_concept(i)];
        for l in 0..spec.l_q {
            let mut row = text.slice_mut(ndarray::s![i, l, ..]);
            noisy_projection(
                &mut rng,
                concept,
                &text_map,
                spec.noise_scale,
                row.as_slice_mut().unwrap(),
            );
        }
    }

    let segment_of = frame_segments(spec.l_v, spec.segments_per_video);
    let mut video = Array3::<f32>::zeros((spec.n_v, spec.l_v, spec.d_v));
    for j in 0..spec.n_v {
        for (k, &seg) in segment_of.iter().enumerate() {
            let concept = &concepts[layout.slots[j][seg]];
            let mut row = video.slice_mut(ndarray::s![j, k, ..]);
            noisy_projection(
                &mut rng,
                concept,
                &video_map,
                spec.noise_scale,
                row.as_slice_mut().unwrap(),
            );
        }
    }

    let planted: BTreeSet<(usize, usize)> = layout.shared_pairs().into_iter().collect();
    FeatureCorpus::new(
        text,
        video,
        layout.pairing.clone(),
        spec.split,
        Some(planted.into_iter().collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_q: 12,
            n_v: 6,
            l_q: 3,
            l_v: 8,
            d_t: 5,
            d_v: 7,
            seed: 3,
            segments_per_video: 4,
            ambiguity_rate: 0.5,
            noise_scale: 0.2,
            latent_dim: 4,
            plants_per_query: 2,
            split: Split::Train,
        }
    }

    #[test]
    fn rate_zero_plants_nothing() {
        let spec = CorpusSpec {
            ambiguity_rate: 0.0,
            ..small_spec()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.planted_ambiguity, Some(vec![]));
    }

    #[test]
    fn single_segment_full_rate_plants_every_other_video() {
        let spec = CorpusSpec {
            n_q: 3,
            n_v: 3,
            l_v: 2,
            segments_per_video: 1,
            ambiguity_rate: 1.0,
            ..small_spec()
        };
        let c = generate_synthetic(&spec).unwrap();
        let planted = c.planted_ambiguity.unwrap();
        for i in 0..3 {
            let n = planted.iter().filter(|(q, _)| *q == i).count();
            assert_eq!(n, 2, "query {i}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(&CorpusSpec {
            seed: 7,
            ..small_spec()
        })
        .unwrap();
        let b = generate_synthetic(&CorpusSpec {
            seed: 7,
            ..small_spec()
        })
        .unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn planted_pairs_share_a_concept() {
        let spec = small_spec();
        let layout = synthetic_layout(&spec).unwrap();
        let c = generate_synthetic(&spec).unwrap();
        for &(i, j) in c.planted_ambiguity.as_ref().unwrap() {
            let concept = layout.query_concept(i);
            assert!(layout.slots[c.pairing[i]].contains(&concept));
            assert!(layout.slots[j].contains(&concept));
            assert_ne!(c.pairing[i], j);
        }
    }

    #[test]
    fn test_split_shares_maps_but_not_concepts() {
        let train = generate_synthetic(&small_spec()).unwrap();
        let test = generate_synthetic(&CorpusSpec {
            split: Split::Test,
            ..small_spec()
        })
        .unwrap();
        assert_eq!(test.split, Split::Test);
        assert_ne!(train.text_features, test.text_features);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = CorpusSpec {
            segments_per_video: 9,
            ..small_spec()
        };
        assert!(matches!(generate_synthetic(&bad), Err(ArlError::Config(_))));
        let bad = CorpusSpec {
            ambiguity_rate: 1.5,
            ..small_spec()
        };
        assert!(matches!(generate_synthetic(&bad), Err(ArlError::Config(_))));
        let bad = CorpusSpec {
            n_q: 0,
            ..small_spec()
        };
        assert!(matches!(generate_synthetic(&bad), Err(ArlError::Config(_))));
    }

    #[test]
    fn frame_segments_cover_all_frames() {
        assert_eq!(frame_segments(5, 2), vec![0, 0, 0, 1, 1]);
        assert_eq!(frame_segments(4, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn round_trip_is_exact() {
        let c = generate_synthetic(&small_spec()).unwrap();
        let back = FeatureCorpus::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_query_rows_are_reported() {
        let spec = CorpusSpec {
            n_q: 2,
            n_v: 2,
            ..small_spec()
        };
        let c = generate_synthetic(&spec).unwrap();
        let bytes = c.to_bytes();
        // header is 36 bytes; keep one query row only
        let one_row = 36 + spec.l_q * spec.d_t * 4;
        let err = FeatureCorpus::from_bytes(&bytes[..one_row]).unwrap_err();
        match err {
            ArlError::Format { field, reason } => {
                assert_eq!(field, "text_features");
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_a_format_error() {
        assert!(matches!(
            FeatureCorpus::from_bytes(&[]),
            Err(ArlError::Format { .. })
        ));
    }

    #[test]
    fn bad_pairing_in_file_is_a_format_error() {
        let c = generate_synthetic(&small_spec()).unwrap();
        let mut bytes = c.to_bytes();
        let (n_q, l_q, d_t) = c.text_features.dim();
        let (n_v, l_v, d_v) = c.video_features.dim();
        let off = 36 + 4 * (n_q * l_q * d_t + n_v * l_v * d_v);
        bytes[off..off + 4].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            FeatureCorpus::from_bytes(&bytes),
            Err(ArlError::Format { .. })
        ));
    }

    #[test]
    fn planted_positive_pair_is_rejected() {
        let c = generate_synthetic(&small_spec()).unwrap();
        let res = FeatureCorpus::new(
            c.text_features.clone(),
            c.video_features.clone(),
            c.pairing.clone(),
            Split::Train,
            Some(vec![(0, c.pairing[0])]),
        );
        assert!(res.is_err());
    }
}
