//! Synthetic video datasets and the split protocols evaluated on them.
//!
//! Concepts live in a seeded "world": every vocabulary word owns a fixed
//! direction in frame space and a category named by several words sits at
//! the normalised sum of their directions. Datasets built from the same
//! world therefore share semantics, which is what lets a backbone aligned on
//! one set of names transfer to another.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::video::{read_records, write_record, Instance, Label, VideoError, VideoSample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("category {category} has {available} videos, need {needed}")]
    InsufficientVideos { category: usize, available: usize, needed: usize },
    #[error("pool has {available} categories, episode needs {needed}")]
    InsufficientCategories { available: usize, needed: usize },
    #[error("split fraction {fraction} leaves an empty side for {count} categories")]
    EmptySplitSide { fraction: f64, count: usize },
    #[error("train and val categories overlap on {0:?}")]
    OverlappingSplit(Vec<usize>),
    #[error("instance of category {category} in video `{video}` belongs to neither split side")]
    UnassignedCategory { video: String, category: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// One category per trimmed video.
    Recognition,
    /// Categories are ordered pairs of concepts; the first half of each video
    /// shows one, the second half the other.
    OrderedRecognition,
    /// Each video comes with a sentence describing its concept.
    Retrieval,
    /// Untrimmed timelines with planted instances.
    Localisation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalisationSpec {
    pub timeline_frames: usize,
    pub max_instances: usize,
    pub min_instance_frames: usize,
    pub max_instance_frames: usize,
    pub train_videos: usize,
    pub val_videos: usize,
}

impl Default for LocalisationSpec {
    fn default() -> Self {
        Self {
            timeline_frames: 128,
            max_instances: 15,
            min_instance_frames: 4,
            max_instance_frames: 8,
            train_videos: 48,
            val_videos: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    /// Number of categories `C`.
    pub categories: usize,
    /// Words composing each category name.
    pub words_per_name: usize,
    /// Size of the word pool names are composed from; `0` gives every
    /// category its own words.
    pub name_pool: usize,
    /// Frame stand-in dimension `F`.
    pub frame_dim: usize,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Per-entry Gaussian frame noise σ.
    pub noise: f64,
    /// Smallest distance between two category prototypes.
    pub margin: f64,
    /// Amplitude of the linear within-video drift.
    pub drift: f64,
    /// How far the video sense of each word departs from its plain sense
    /// (0 makes them equal). Frames show the video sense.
    pub domain_shift: f64,
    /// Extra filler words appended to retrieval sentences, at most.
    pub query_extra_words: usize,
    /// Seed of the concept world (word directions).
    pub world_seed: u64,
    pub localisation: LocalisationSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Recognition,
            categories: 8,
            words_per_name: 2,
            name_pool: 0,
            frame_dim: 32,
            train_per_category: 24,
            val_per_category: 12,
            min_frames: 24,
            max_frames: 64,
            noise: 0.5,
            margin: 1.0,
            drift: 0.2,
            domain_shift: 0.0,
            query_extra_words: 6,
            world_seed: 7,
            localisation: LocalisationSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Spec(m));
        if self.categories < 2 {
            return fail(format!("need at least 2 categories, got {}", self.categories));
        }
        if self.task == TaskKind::OrderedRecognition && self.categories % 2 != 0 {
            return fail("ordered recognition needs an even category count".into());
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.margin <= 0.0 {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if self.words_per_name == 0 || self.frame_dim == 0 {
            return fail("words_per_name and frame_dim must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail(format!("bad frame range {}..={}", self.min_frames, self.max_frames));
        }
        if self.task == TaskKind::Localisation {
            let l = &self.localisation;
            if l.min_instance_frames == 0
                || l.min_instance_frames > l.max_instance_frames
                || l.max_instance_frames > l.timeline_frames
                || l.max_instances == 0
            {
                return fail("inconsistent localisation timeline settings".into());
            }
        }
        Ok(())
    }
}

/// Fixed word directions in frame space. Every word has a plain sense and
/// a video sense; a caption mentioning [`DOMAIN_WORD`] means the video sense
/// of all its words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct World {
    pub frame_dim: usize,
    pub seed: u64,
    pub domain_shift: f64,
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Context word that selects the video sense.
pub const DOMAIN_WORD: &str = "video";

/// Words without visual content.
pub const FUNCTION_WORDS: [&str; 6] = ["a", "the", "in", "of", "on", "with"];

impl World {
    pub fn new(spec: &SyntheticSpec) -> Self {
        Self { frame_dim: spec.frame_dim, seed: spec.world_seed, domain_shift: spec.domain_shift }
    }

    /// Plain sense of a word.
    pub fn word_direction(&self, word: &str) -> Vec<f64> {
        unit_gaussian(self.frame_dim, &mut derive(self.seed, &format!("word:{word}"), 0))
    }

    /// Video sense: the plain sense pushed along a second per-word
    /// direction by `domain_shift`, renormalised.
    pub fn video_word_direction(&self, word: &str) -> Vec<f64> {
        let plain = self.word_direction(word);
        if self.domain_shift == 0.0 {
            return plain;
        }
        let other = unit_gaussian(self.frame_dim, &mut derive(self.seed, &format!("video:{word}"), 0));
        normalize(plain.iter().zip(&other).map(|(p, o)| p + self.domain_shift * o).collect())
    }

    fn sum_direction(&self, words: &[&str], video: bool) -> Vec<f64> {
        let mut acc = vec![0.0; self.frame_dim];
        for w in words {
            let d = if video { self.video_word_direction(w) } else { self.word_direction(w) };
            for (a, d) in acc.iter_mut().zip(d) {
                *a += d;
            }
        }
        normalize(acc)
    }

    /// Unit vector along the sum of the name's plain word senses.
    pub fn concept_direction(&self, name: &str) -> Vec<f64> {
        self.sum_direction(&name.split_whitespace().collect::<Vec<_>>(), false)
    }

    /// Unit vector along the sum of the name's video word senses.
    pub fn video_concept_direction(&self, name: &str) -> Vec<f64> {
        self.sum_direction(&name.split_whitespace().collect::<Vec<_>>(), true)
    }

    /// What a caption depicts. Function words and [`DOMAIN_WORD`] carry no
    /// direction of their own; the latter switches every other word to its
    /// video sense.
    pub fn caption_direction(&self, caption: &str) -> Vec<f64> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let video = words.contains(&DOMAIN_WORD);
        let content: Vec<&str> =
            words.into_iter().filter(|w| *w != DOMAIN_WORD && !FUNCTION_WORDS.contains(w)).collect();
        self.sum_direction(&content, video)
    }
}

/// A generated dataset with train/val videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub category_names: Vec<String>,
    /// Expected frame of each category, `C × F` (for ordered recognition,
    /// the video-average frame).
    pub prototypes: Tensor<f32>,
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
}

/// Smallest pairwise Euclidean distance between rows.
fn min_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Compose `count` distinct names of `words` words each from a word pool.
fn compose_names<R: Rng + ?Sized>(
    pool: &[&str],
    words: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<String>, DataError> {
    if pool.len() < words {
        return Err(DataError::Spec(format!("word pool of {} cannot form {words}-word names", pool.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while names.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(DataError::Spec(format!(
                "cannot compose {count} distinct names from {} words",
                pool.len()
            )));
        }
        let mut picked: Vec<&str> = pool.choose_multiple(rng, words).copied().collect();
        picked.sort_unstable();
        let name = picked.join(" ");
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    Ok(names)
}

/// Category names drawn from the vocabulary's concept words.
pub fn category_names<R: Rng + ?Sized>(spec: &SyntheticSpec, vocab: &Vocabulary, rng: &mut R) -> Result<Vec<String>, DataError> {
    let words = vocab.concept_words();
    let needed = if spec.name_pool == 0 { spec.categories * spec.words_per_name } else { spec.name_pool };
    if words.len() < needed {
        return Err(DataError::Spec(format!(
            "vocabulary has {} concept words, spec needs {needed}",
            words.len()
        )));
    }
    let mut shuffled = words.clone();
    shuffled.shuffle(rng);
    if spec.name_pool == 0 {
        Ok(shuffled[..needed]
            .chunks(spec.words_per_name)
            .map(|c| c.join(" "))
            .collect())
    } else {
        compose_names(&shuffled[..needed], spec.words_per_name, spec.categories, rng)
    }
}

struct FrameModel {
    /// Per-category frame centre, before drift; two halves for ordered pairs.
    first: Vec<f64>,
    second: Vec<f64>,
    drift_dir: Vec<f64>,
}

fn render_frames<R: Rng + ?Sized>(
    model: &FrameModel,
    spec: &SyntheticSpec,
    frames: usize,
    rng: &mut R,
) -> Tensor<f32> {
    let normal = Normal::new(0.0, spec.noise.max(0.0)).unwrap();
    let f = spec.frame_dim;
    let mut data = Vec::with_capacity(frames * f);
    for t in 0..frames {
        let phase = if frames > 1 { t as f64 / (frames - 1) as f64 - 0.5 } else { 0.0 };
        let centre = if t * 2 < frames { &model.first } else { &model.second };
        for j in 0..f {
            let noise = if spec.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            let v = centre[j] + spec.drift * phase * model.drift_dir[j] + noise;
            data.push(v as f32);
        }
    }
    Tensor::from_rows(frames, f, data)
}

/// Build a dataset from a spec. Identical `(spec, vocab, rng state)` gives a
/// bit-identical dataset.
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Dataset, DataError> {
    spec.validate()?;
    if spec.margin <= spec.noise {
        log::warn!(
            "margin {} does not exceed frame noise {}; the dataset may be hard to learn",
            spec.margin,
            spec.noise
        );
    }
    let world = World::new(spec);
    let names = category_names(spec, vocab, rng)?;
    let c = spec.categories;

    // Unit concept directions, then one scale so the closest pair sits at `margin`.
    let concepts: Vec<Vec<f64>> = match spec.task {
        TaskKind::OrderedRecognition => {
            // Pair 2i and 2i+1 share two concepts in opposite orders; the
            // concepts come from the first name of each pair.
            (0..c / 2)
                .flat_map(|i| {
                    let words: Vec<&str> = names[2 * i].split_whitespace().collect();
                    let a = world.video_concept_direction(words[0]);
                    let b = world.video_concept_direction(words.last().copied().unwrap_or(words[0]));
                    let b = if words.len() == 1 { world.video_concept_direction(&names[2 * i + 1]) } else { b };
                    [a, b]
                })
                .collect()
        }
        _ => names.iter().map(|n| world.video_concept_direction(n)).collect(),
    };
    let min_d = min_pairwise_distance(&concepts);
    let scale = if min_d.is_finite() && min_d > 0.0 { spec.margin / min_d } else { 1.0 };
    let scaled: Vec<Vec<f64>> = concepts.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();

    let models: Vec<FrameModel> = (0..c)
        .map(|k| {
            let drift_dir = unit_gaussian(spec.frame_dim, &mut derive(spec.world_seed, &format!("drift:{}", names[k]), 0));
            match spec.task {
                TaskKind::OrderedRecognition => {
                    let (a, b) = (&scaled[2 * (k / 2)], &scaled[2 * (k / 2) + 1]);
                    let (first, second) = if k % 2 == 0 { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                    FrameModel { first, second, drift_dir }
                }
                _ => FrameModel { first: scaled[k].clone(), second: scaled[k].clone(), drift_dir },
            }
        })
        .collect();

    let mut proto = Vec::with_capacity(c * spec.frame_dim);
    for m in &models {
        for j in 0..spec.frame_dim {
            proto.push((0.5 * (m.first[j] + m.second[j])) as f32);
        }
    }
    let prototypes = Tensor::from_rows(c, spec.frame_dim, proto);

    let filler = vocab.filler_words();
    let make_split = |split: &str, per_cat: usize, rng: &mut R| -> Vec<VideoSample> {
        let mut out = Vec::with_capacity(per_cat * c);
        for n in 0..per_cat {
            for (k, model) in models.iter().enumerate() {
                let frames = rng.random_range(spec.min_frames..=spec.max_frames);
                let frames_t = render_frames(model, spec, frames, rng);
                let label = match spec.task {
                    TaskKind::Retrieval => {
                        let extra = rng.random_range(0..=spec.query_extra_words);
                        let mut words = vec!["a", "person"];
                        words.extend(names[k].split_whitespace());
                        for _ in 0..extra {
                            if let Some(w) = filler.choose(rng) {
                                words.push(w);
                            }
                        }
                        Label::Query(words.join(" "))
                    }
                    _ => Label::Category(k),
                };
                out.push(VideoSample { id: format!("{split}-{k:03}-{n:03}"), frames: frames_t, label });
            }
        }
        out
    };

    let (train, val) = if spec.task == TaskKind::Localisation {
        let l = spec.localisation;
        let timelines = |split: &str, count: usize, rng: &mut R| -> Vec<VideoSample> {
            (0..count).map(|n| plant_timeline(&format!("{split}-{n:04}"), &models, spec, &l, rng)).collect()
        };
        let train = timelines("train", l.train_videos, rng);
        let val = timelines("val", l.val_videos, rng);
        (train, val)
    } else {
        let train = make_split("train", spec.train_per_category, rng);
        let val = make_split("val", spec.val_per_category, rng);
        (train, val)
    };

    Ok(Dataset { spec: spec.clone(), category_names: names, prototypes, train, val })
}

fn plant_timeline<R: Rng + ?Sized>(
    id: &str,
    models: &[FrameModel],
    spec: &SyntheticSpec,
    l: &LocalisationSpec,
    rng: &mut R,
) -> VideoSample {
    let total = l.timeline_frames;
    let mut count = rng.random_range(1..=l.max_instances);
    let mut lengths: Vec<usize> = (0..count)
        .map(|_| rng.random_range(l.min_instance_frames..=l.max_instance_frames))
        .collect();
    while lengths.iter().sum::<usize>() > total {
        lengths.pop();
        count -= 1;
    }
    let free = total - lengths.iter().sum::<usize>();
    // Random cut points distribute the background frames into count+1 gaps.
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let background = FrameModel {
        first: vec![0.0; spec.frame_dim],
        second: vec![0.0; spec.frame_dim],
        drift_dir: vec![0.0; spec.frame_dim],
    };
    let mut frames: Vec<f32> = Vec::with_capacity(total * spec.frame_dim);
    let mut instances = Vec::with_capacity(count);
    let mut cursor = 0usize;
    let mut prev_cut = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        let gap = cuts[i] - prev_cut;
        prev_cut = cuts[i];
        if gap > 0 {
            frames.extend(render_frames(&background, spec, gap, rng).into_data());
        }
        cursor += gap;
        let class = rng.random_range(0..models.len());
        frames.extend(render_frames(&models[class], spec, len, rng).into_data());
        instances.push(Instance { class, start: cursor as f64, end: (cursor + len) as f64 });
        cursor += len;
    }
    if cursor < total {
        frames.extend(render_frames(&background, spec, total - cursor, rng).into_data());
    }
    VideoSample {
        id: id.to_string(),
        frames: Tensor::from_rows(total, spec.frame_dim, frames),
        label: Label::Instances(instances),
    }
}

/// Indices into a pool, split into support and query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub categories: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

fn by_category(pool: &[VideoSample]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, v) in pool.iter().enumerate() {
        if let Some(c) = v.category() {
            map.entry(c).or_default().push(i);
        }
    }
    map
}

/// Sample an `n_way`-way `k_shot`-shot episode: categories uniformly without
/// replacement, `k_shot` support videos each, the rest of those categories'
/// videos as queries.
pub fn sample_few_shot_episode<R: Rng + ?Sized>(
    pool: &[VideoSample],
    n_way: usize,
    k_shot: usize,
    rng: &mut R,
) -> Result<Episode, DataError> {
    let groups = by_category(pool);
    if groups.len() < n_way || n_way == 0 {
        return Err(DataError::InsufficientCategories { available: groups.len(), needed: n_way.max(1) });
    }
    let all: Vec<usize> = groups.keys().copied().collect();
    let mut categories: Vec<usize> = all.choose_multiple(rng, n_way).copied().collect();
    categories.sort_unstable();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for &c in &categories {
        let vids = &groups[&c];
        if vids.len() <= k_shot {
            return Err(DataError::InsufficientVideos { category: c, available: vids.len(), needed: k_shot + 1 });
        }
        let mut shuffled = vids.clone();
        shuffled.shuffle(rng);
        let (s, q) = shuffled.split_at(k_shot);
        let mut s = s.to_vec();
        let mut q = q.to_vec();
        s.sort_unstable();
        q.sort_unstable();
        support.extend(s);
        query.extend(q);
    }
    Ok(Episode { categories, support, query })
}

/// `k_shot` training videos for every category; the test split is untouched.
pub fn build_c_way_support<R: Rng + ?Sized>(
    train: &[VideoSample],
    k_shot: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    let mut support = Vec::new();
    for (c, vids) in by_category(train) {
        if vids.len() < k_shot {
            return Err(DataError::InsufficientVideos { category: c, available: vids.len(), needed: k_shot });
        }
        let mut picked: Vec<usize> = vids.choose_multiple(rng, k_shot).copied().collect();
        picked.sort_unstable();
        support.extend(picked);
    }
    Ok(support)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_categories: BTreeSet<usize>,
    pub val_categories: BTreeSet<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn closed_set(categories: usize, seed: u64) -> Self {
        let all: BTreeSet<usize> = (0..categories).collect();
        Self { train_categories: all.clone(), val_categories: all, trials: 1, seed }
    }

    pub fn is_closed_set(&self) -> bool {
        self.train_categories == self.val_categories
    }

    /// Zero-shot splits must be disjoint.
    pub fn validate_zero_shot(&self) -> Result<(), DataError> {
        let overlap: Vec<usize> = self.train_categories.intersection(&self.val_categories).copied().collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(DataError::OverlappingSplit(overlap))
        }
    }
}

/// Uniform random disjoint partition; `floor(fraction · n)` categories train.
pub fn split_zero_shot<R: Rng + ?Sized>(
    categories: &[usize],
    train_fraction: f64,
    seed: u64,
    rng: &mut R,
) -> Result<SplitSpec, DataError> {
    let n = categories.len();
    let n_train = (train_fraction * n as f64 + 1e-9).floor() as usize;
    if !(train_fraction > 0.0 && train_fraction < 1.0) || n_train == 0 || n_train >= n {
        return Err(DataError::EmptySplitSide { fraction: train_fraction, count: n });
    }
    let mut shuffled = categories.to_vec();
    shuffled.shuffle(rng);
    Ok(SplitSpec {
        train_categories: shuffled[..n_train].iter().copied().collect(),
        val_categories: shuffled[n_train..].iter().copied().collect(),
        trials: 1,
        seed,
    })
}

/// Split untrimmed videos by category side. A video with instances on both
/// sides becomes two copies, each keeping only its side's instances.
pub fn divide_multilabel_videos(
    videos: &[VideoSample],
    split: &SplitSpec,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>), DataError> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for v in videos {
        let mut tr = Vec::new();
        let mut va = Vec::new();
        for inst in v.instances() {
            if split.train_categories.contains(&inst.class) {
                tr.push(inst.clone());
            } else if split.val_categories.contains(&inst.class) {
                va.push(inst.clone());
            } else {
                return Err(DataError::UnassignedCategory { video: v.id.clone(), category: inst.class });
            }
        }
        match (tr.is_empty(), va.is_empty()) {
            (false, true) => train.push(v.clone()),
            (true, false) => val.push(v.clone()),
            (false, false) => {
                train.push(VideoSample { id: format!("{}#train", v.id), frames: v.frames.clone(), label: Label::Instances(tr) });
                val.push(VideoSample { id: format!("{}#val", v.id), frames: v.frames.clone(), label: Label::Instances(va) });
            }
            (true, true) => {}
        }
    }
    Ok((train, val))
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub label: Label,
    pub frame_count: usize,
    pub gap_set: Vec<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAMES_FILE: &str = "frames.bin";
pub const CATEGORIES_FILE: &str = "categories.tsv";

impl Dataset {
    pub fn manifest(&self, gap_set: &[usize]) -> Vec<ManifestRecord> {
        let rec = |split: &str, v: &VideoSample| ManifestRecord {
            id: v.id.clone(),
            split: split.to_string(),
            label: v.label.clone(),
            frame_count: v.num_frames(),
            gap_set: gap_set.to_vec(),
        };
        self.train
            .iter()
            .map(|v| rec("train", v))
            .chain(self.val.iter().map(|v| rec("val", v)))
            .collect()
    }

    /// Write the manifest, category names and raw frames into `dir`.
    pub fn save(&self, dir: &Path, gap_set: &[usize]) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for r in self.manifest(gap_set) {
            manifest.push_str(&serde_json::to_string(&r)?);
            manifest.push('\n');
        }
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        let names: String = self.category_names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}\n")).collect();
        fs::write(dir.join(CATEGORIES_FILE), names)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(FRAMES_FILE))?);
        for v in self.train.iter().chain(&self.val) {
            write_record(&mut w, &v.id, &v.frames)?;
        }
        Ok(())
    }

    /// Load videos and names written by [`Dataset::save`]. The spec and
    /// prototypes are not persisted and are taken from the arguments.
    pub fn load(dir: &Path, spec: &SyntheticSpec, prototypes: Tensor<f32>) -> Result<Self, DataError> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let records: Vec<ManifestRecord> = manifest
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        let frames: BTreeMap<String, Tensor<f32>> =
            read_records(fs::File::open(dir.join(FRAMES_FILE))?)?.into_iter().collect();
        let names = fs::read_to_string(dir.join(CATEGORIES_FILE))?
            .lines()
            .filter_map(|l| l.split_once('\t').map(|(_, n)| n.to_string()))
            .collect();
        let mut ds = Dataset { spec: spec.clone(), category_names: names, prototypes, train: Vec::new(), val: Vec::new() };
        for r in records {
            let f = frames
                .get(&r.id)
                .ok_or_else(|| DataError::Format(format!("no frames for `{}`", r.id)))?
                .clone();
            if f.rows() != r.frame_count {
                return Err(DataError::Format(format!("`{}` frame count mismatch", r.id)));
            }
            let v = VideoSample { id: r.id, frames: f, label: r.label };
            match r.split.as_str() {
                "train" => ds.train.push(v),
                "val" => ds.val.push(v),
                other => return Err(DataError::Format(format!("unknown split `{other}`"))),
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic(256)
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec { train_per_category: 2, val_per_category: 1, ..Default::default() };
        let a = generate_synthetic_dataset(&spec, &vocab(), &mut derive(1, "data", 0)).unwrap();
        let b = generate_synthetic_dataset(&spec, &vocab(), &mut derive(1, "data", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_two_categories_are_separable() {
        let spec = SyntheticSpec {
            categories: 2,
            noise: 0.0,
            drift: 0.0,
            train_per_category: 3,
            val_per_category: 3,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&spec, &vocab(), &mut derive(2, "data", 0)).unwrap();
        for v in ds.train.iter().chain(&ds.val) {
            let c = v.category().unwrap();
            for t in 0..v.num_frames() {
                assert_eq!(v.frames.row(t), ds.prototypes.row(c));
            }
        }
        assert_ne!(ds.prototypes.row(0), ds.prototypes.row(1));
    }

    #[test]
    fn spec_rejects_single_category() {
        let spec = SyntheticSpec { categories: 1, ..Default::default() };
        assert!(generate_synthetic_dataset(&spec, &vocab(), &mut derive(0, "d", 0)).is_err());
    }

    #[test]
    fn localisation_instances_are_disjoint_and_inside() {
        let spec = SyntheticSpec { task: TaskKind::Localisation, ..Default::default() };
        let ds = generate_synthetic_dataset(&spec, &vocab(), &mut derive(3, "d", 0)).unwrap();
        for v in &ds.train {
            let inst = v.instances();
            assert!(!inst.is_empty());
            assert!(inst.windows(2).all(|w| w[0].end <= w[1].start));
            assert!(inst.iter().all(|i| i.start < i.end && i.end <= 128.0));
            assert_eq!(v.dense_labels().len(), v.num_frames());
        }
    }

    #[test]
    fn episode_insufficient_videos_names_category() {
        let spec = SyntheticSpec { categories: 3, train_per_category: 2, val_per_category: 1, ..Default::default() };
        let ds = generate_synthetic_dataset(&spec, &vocab(), &mut derive(4, "d", 0)).unwrap();
        let err = sample_few_shot_episode(&ds.train, 2, 2, &mut derive(0, "e", 0)).unwrap_err();
        assert!(matches!(err, DataError::InsufficientVideos { needed: 3, .. }));
        assert!(err.to_string().contains("category"));
    }

    #[test]
    fn split_sides_are_disjoint_and_complete() {
        let cats: Vec<usize> = (0..4).collect();
        let s = split_zero_shot(&cats, 0.5, 0, &mut derive(0, "s", 0)).unwrap();
        assert_eq!((s.train_categories.len(), s.val_categories.len()), (2, 2));
        s.validate_zero_shot().unwrap();
        let union: BTreeSet<usize> = s.train_categories.union(&s.val_categories).copied().collect();
        assert_eq!(union, cats.iter().copied().collect());
        assert!(split_zero_shot(&cats, 0.1, 0, &mut derive(0, "s", 0)).is_err());
        assert!(split_zero_shot(&cats, 1.0, 0, &mut derive(0, "s", 0)).is_err());
    }

    #[test]
    fn overlapping_split_rejected() {
        let s = SplitSpec {
            train_categories: [0, 1].into(),
            val_categories: [1, 2].into(),
            trials: 1,
            seed: 0,
        };
        assert!(matches!(s.validate_zero_shot(), Err(DataError::OverlappingSplit(v)) if v == vec![1]));
    }

    fn timeline(id: &str, classes: &[usize]) -> VideoSample {
        let instances = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Instance { class: c, start: 2.0 * i as f64, end: 2.0 * i as f64 + 1.0 })
            .collect();
        VideoSample { id: id.into(), frames: Tensor::zeros(&[8, 2]), label: Label::Instances(instances) }
    }

    #[test]
    fn multilabel_division() {
        let split = SplitSpec { train_categories: [0, 1].into(), val_categories: [2].into(), trials: 1, seed: 0 };
        let only_train = timeline("a", &[0, 1]);
        let mixed = timeline("b", &[0, 2, 1]);
        let (tr, va) = divide_multilabel_videos(&[only_train.clone(), mixed], &split).unwrap();
        assert_eq!(tr[0], only_train);
        assert_eq!(tr[1].instances().len(), 2);
        assert_eq!(va[0].instances().len(), 1);
        assert_eq!(va[0].instances()[0].class, 2);
        let total: usize = tr.iter().chain(&va).map(|v| v.instances().len()).sum();
        assert_eq!(total, 5);
        let bad = timeline("c", &[9]);
        assert!(matches!(
            divide_multilabel_videos(&[bad], &split),
            Err(DataError::UnassignedCategory { category: 9, .. })
        ));
    }

    #[test]
    fn save_and_load_roundtrip() {
        let spec = SyntheticSpec { train_per_category: 1, val_per_category: 1, categories: 3, ..Default::default() };
        let ds = generate_synthetic_dataset(&spec, &vocab(), &mut derive(5, "d", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &[1, 2]).unwrap();
        let back = Dataset::load(dir.path(), &spec, ds.prototypes.clone()).unwrap();
        assert_eq!(back, ds);
        let first = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let rec: ManifestRecord = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(rec.gap_set, vec![1, 2]);
    }
}
