//! Training loops and evaluation protocols for recognition, retrieval and
//! localisation.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{finite_diff_check, AutogradError, GradCheckReport, Graph, ParamStore, Var};
use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{
    build_c_way_support, divide_multilabel_videos, generate_synthetic_dataset, sample_few_shot_episode, split_zero_shot,
    DataError, Dataset, SplitSpec, TaskKind, World,
};
use crate::metrics::{
    average_recall_at_an, detection_map, proposal_classification_accuracy, retrieval_ranks, soft_nms, top_k_accuracy,
    Detection, GroundTruthInstance, MetricError, RetrievalReport, ScoredProposal, SoftNmsDecay, VideoProposals,
};
use crate::model::{build_model, Model, ModelConfig, ModelError};
use crate::objectives::{
    l2_normalize, l2_normalize_tensor, nce_loss, similarity_matrix, train_step, AdamW, LossConfig, LossRecord,
    ObjectiveError,
};
use crate::report::MetricRecord;
use crate::rng::derive;
use crate::tensor::{Scalar, Tensor};
use crate::text::Vocabulary;
use crate::video::{covered_rows, five_crop_predict, sample_frames, FeatureCache, FrameFeatures, Proposal, VideoError, VideoSample};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Protocol(String),
}

impl From<ObjectiveError> for ExperimentError {
    fn from(e: ObjectiveError) -> Self {
        ExperimentError::Model(e.into())
    }
}

impl From<VideoError> for ExperimentError {
    fn from(e: VideoError) -> Self {
        ExperimentError::Model(e.into())
    }
}

impl From<AutogradError> for ExperimentError {
    fn from(e: AutogradError) -> Self {
        ExperimentError::Model(e.into())
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Recognition | TaskKind::OrderedRecognition => "recognition",
        TaskKind::Retrieval => "retrieval",
        TaskKind::Localisation => "localisation",
    }
}

/// Everything one run needs: data, model, parameters and cached frame
/// features under the frozen image encoder.
#[derive(Debug, Clone)]
pub struct Workspace<T: Scalar = f32> {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub model: Model,
    pub store: ParamStore<T>,
    pub cache: FeatureCache,
}

impl<T: Scalar> Workspace<T> {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.data.synthetic;
        let vocab = Vocabulary::synthetic(config.model.vocab_size);
        let dataset = generate_synthetic_dataset(spec, &vocab, &mut derive(config.seed, "data", 0))?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let spec = &config.data.synthetic;
        let world = World::new(spec);
        let (model, store) = build_model::<T>(
            config.model,
            spec.frame_dim,
            &config.data.gap_set(),
            task_name(spec.task),
            Some(&world),
            config.seed,
        )?;
        let videos: Vec<VideoSample> = dataset.train.iter().chain(&dataset.val).cloned().collect();
        let cache = FeatureCache::build(&model.image, &store.cast::<f32>(), &videos);
        Ok(Self { config: config.clone(), dataset, model, store, cache })
    }

    /// A workspace over the same data and backbone with a different model
    /// configuration (ablations and baselines).
    pub fn variant(&self, model: ModelConfig) -> Result<Self> {
        let mut config = self.config.clone();
        config.model = model;
        let spec = &config.data.synthetic;
        let world = World::new(spec);
        let (model, store) = build_model::<T>(
            config.model,
            spec.frame_dim,
            &config.data.gap_set(),
            task_name(spec.task),
            Some(&world),
            config.seed,
        )?;
        Ok(Self { config, dataset: self.dataset.clone(), model, store, cache: self.cache.clone() })
    }

    pub fn optimizer(&self) -> AdamW<T> {
        AdamW::new(self.config.train.optimizer())
    }

    /// Fresh trainable adapters for a new trial; the backbone is shared.
    pub fn reset_adapters(&mut self, seed: u64) {
        let names = self.model.adapter_names(&self.store);
        let mut fresh = ParamStore::<T>::new();
        self.model.init_adapters(&mut fresh, seed);
        for n in names {
            let v = fresh.tensor(&n).clone();
            self.store.get_mut(&n).expect("adapter exists").value = v;
        }
    }

    pub fn category_names(&self, categories: &[usize]) -> Vec<String> {
        categories.iter().map(|&c| self.dataset.category_names[c].clone()).collect()
    }

    pub fn all_categories(&self) -> Vec<usize> {
        (0..self.dataset.category_names.len()).collect()
    }
}

fn embed_clip<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    ff: &FrameFeatures<T>,
) -> Result<Var> {
    let v = model.video_embedding(g, store, ff)?;
    Ok(l2_normalize(g, v)?)
}

fn sample_clip<T: Scalar, R: Rng + ?Sized>(
    model: &Model,
    cache: &FeatureCache,
    video: &VideoSample,
    rng: &mut R,
) -> Result<FrameFeatures<T>> {
    let s = sample_frames(video.num_frames(), model.config.clip_len, &model.gaps, rng)?;
    Ok(model.clip_features(cache, &video.id, &s)?)
}

fn run_step<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    g: &Graph<T>,
    loss: Var,
) -> Result<LossRecord> {
    let value = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?;
    train_step(store, opt, value, &grads)?;
    Ok(LossRecord { step: opt.step, loss: value, lr: opt.config.learning_rate })
}

/// Prompt (and temporal) learning with the NCE loss over category names.
/// `classes` maps classifier rows to category ids. Each step draws from
/// `derive(seed, tag, step)`, so a resumed run replays an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_recognition<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    cache: &FeatureCache,
    videos: &[&VideoSample],
    classes: &[usize],
    names: &[String],
    loss_cfg: &LossConfig,
    steps: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<LossRecord>> {
    let row_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if videos.is_empty() {
        return Err(ExperimentError::Protocol("no training videos".into()));
    }
    let batch = opt.config.batch_size.min(videos.len());
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let rng = &mut derive(seed, tag, opt.step);
        let picked: Vec<&&VideoSample> = videos.choose_multiple(rng, batch).collect();
        let mut g = Graph::<T>::new();
        let mut rows = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for v in picked {
            let c = v.category().ok_or_else(|| ExperimentError::Protocol(format!("`{}` has no category", v.id)))?;
            let t = *row_of
                .get(&c)
                .ok_or_else(|| ExperimentError::Protocol(format!("category {c} is not a training class")))?;
            let ff = sample_clip::<T, _>(model, cache, v, rng)?;
            rows.push(embed_clip(model, store, &mut g, &ff)?);
            targets.push(t);
        }
        let vids = g.concat_rows(&rows);
        let cls = model.classifiers(&mut g, store, names)?;
        let cls = l2_normalize(&mut g, cls)?;
        let sims = similarity_matrix(&mut g, vids, cls);
        let loss = nce_loss(&mut g, sims, &targets, loss_cfg)?;
        records.push(run_step(store, opt, &g, loss)?);
    }
    Ok(records)
}

/// Per-video cosine logits against generated classifiers, averaged over
/// `crops` sampled clips.
pub fn recognition_scores<T: Scalar, R: Rng + ?Sized>(
    model: &Model,
    store: &ParamStore<T>,
    cache: &FeatureCache,
    videos: &[&VideoSample],
    names: &[String],
    crops: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let cls = model.embed_texts(store, names)?;
    let cls_t = cls.transpose();
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        let scores = five_crop_predict(v.num_frames(), model.config.clip_len, &model.gaps, crops, rng, |s| {
            let ff: FrameFeatures<T> = model
                .clip_features(cache, &v.id, s)
                .map_err(|_| VideoError::Cache(format!("no features for `{}`", v.id)))?;
            let mut g = Graph::new();
            let e = model
                .video_embedding(&mut g, store, &ff)
                .map_err(|e| VideoError::Cache(e.to_string()))?;
            let e = l2_normalize_tensor(g.value(e)).map_err(|e| VideoError::Cache(e.to_string()))?;
            Ok(e.matmul(&cls_t).to_f64_vec())
        })?;
        out.push(scores);
    }
    Ok(out)
}

/// TOP-k accuracies for the configured k values that fit the class count.
pub fn accuracy_records(
    scores: &[Vec<f64>],
    labels: &[usize],
    top_k: &[usize],
    split: &str,
    trial: usize,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let classes = scores.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for &k in top_k.iter().filter(|&&k| k <= classes) {
        let acc = top_k_accuracy(scores, labels, k)?;
        out.push(MetricRecord::new(format!("top{k}"), split, trial, seed, acc));
    }
    Ok(out)
}

fn labels_for(videos: &[&VideoSample], classes: &[usize]) -> Result<Vec<usize>> {
    let row_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    videos
        .iter()
        .map(|v| {
            v.category()
                .and_then(|c| row_of.get(&c).copied())
                .ok_or_else(|| ExperimentError::Protocol(format!("`{}` has no evaluation class", v.id)))
        })
        .collect()
}

/// Scores and labels of `videos` against `classes`.
pub fn evaluate_recognition<T: Scalar>(
    ws: &Workspace<T>,
    videos: &[&VideoSample],
    classes: &[usize],
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let names = ws.category_names(classes);
    let scores = recognition_scores(&ws.model, &ws.store, &ws.cache, videos, &names, ws.config.eval.crops, rng)?;
    Ok((scores, labels_for(videos, classes)?))
}

/// Outcome of a protocol run: metric records plus the training loss curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolResult {
    pub metrics: Vec<MetricRecord>,
    pub losses: Vec<LossRecord>,
}

impl ProtocolResult {
    pub fn value(&self, metric: &str, split: &str) -> Option<f64> {
        let vals: Vec<f64> =
            self.metrics.iter().filter(|m| m.metric == metric && m.split == split).map(|m| m.value).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Train on the train split of every category (unless `steps` is 0).
pub fn train_closed_set<T: Scalar>(ws: &mut Workspace<T>, opt: &mut AdamW<T>, steps: usize) -> Result<Vec<LossRecord>> {
    let classes = ws.all_categories();
    let names = ws.category_names(&classes);
    let videos: Vec<&VideoSample> = ws.dataset.train.iter().collect();
    let loss = ws.config.train.loss();
    let seed = ws.config.seed;
    train_recognition(&ws.model, &mut ws.store, opt, &ws.cache, &videos, &classes, &names, &loss, steps, seed, "train.recognition")
}

/// Closed-set TOP-k on the held-out split with the current parameters.
pub fn eval_closed_set<T: Scalar>(ws: &Workspace<T>) -> Result<Vec<MetricRecord>> {
    let classes = ws.all_categories();
    let videos: Vec<&VideoSample> = ws.dataset.val.iter().collect();
    let mut rng = derive(ws.config.seed, "eval.closed-set", 0);
    let (scores, labels) = evaluate_recognition(ws, &videos, &classes, &mut rng)?;
    accuracy_records(&scores, &labels, &ws.config.eval.top_k, "val", 0, ws.config.seed)
}

/// N-way K-shot episodes drawn from all videos; adapters are retrained from
/// scratch for every trial.
pub fn few_shot_protocol<T: Scalar>(ws: &Workspace<T>, ways: usize, shots: usize, trials: usize) -> Result<ProtocolResult> {
    let pool: Vec<VideoSample> = ws.dataset.train.iter().chain(&ws.dataset.val).cloned().collect();
    let seed = ws.config.seed;
    let steps = ws.config.eval.few_shot_steps;
    let mut out = ProtocolResult::default();
    for trial in 0..trials {
        let mut w = ws.clone();
        w.reset_adapters(derive(seed, "few-shot.init", trial as u64).random());
        let ep = sample_few_shot_episode(&pool, ways, shots, &mut derive(seed, "few-shot.episode", trial as u64))?;
        let support: Vec<&VideoSample> = ep.support.iter().map(|&i| &pool[i]).collect();
        let query: Vec<&VideoSample> = ep.query.iter().map(|&i| &pool[i]).collect();
        let names = w.category_names(&ep.categories);
        let mut opt = w.optimizer();
        let loss = w.config.train.loss();
        let tag = format!("few-shot.train.{trial}");
        let losses =
            train_recognition(&w.model, &mut w.store, &mut opt, &w.cache, &support, &ep.categories, &names, &loss, steps, seed, &tag)?;
        let (scores, labels) = evaluate_recognition(&w, &query, &ep.categories, &mut derive(seed, "few-shot.eval", trial as u64))?;
        out.metrics.extend(accuracy_records(&scores, &labels, &w.config.eval.top_k, "query", trial, seed)?);
        if trial == 0 {
            out.losses = losses;
        }
    }
    Ok(out)
}

/// K shots of every category from the train split, evaluated on the full
/// held-out split, over several sampling rounds.
pub fn all_way_few_shot_protocol<T: Scalar>(ws: &Workspace<T>, shots: usize, rounds: usize) -> Result<ProtocolResult> {
    let seed = ws.config.seed;
    let classes = ws.all_categories();
    let names = ws.category_names(&classes);
    let val: Vec<&VideoSample> = ws.dataset.val.iter().collect();
    let mut out = ProtocolResult::default();
    for round in 0..rounds {
        let mut w = ws.clone();
        w.reset_adapters(derive(seed, "c-way.init", round as u64).random());
        let support = build_c_way_support(&w.dataset.train, shots, &mut derive(seed, "c-way.support", round as u64))?;
        let support: Vec<&VideoSample> = support.iter().map(|&i| &ws.dataset.train[i]).collect();
        let mut opt = w.optimizer();
        let loss = w.config.train.loss();
        let steps = w.config.eval.few_shot_steps;
        let tag = format!("c-way.train.{round}");
        let losses = train_recognition(&w.model, &mut w.store, &mut opt, &w.cache, &support, &classes, &names, &loss, steps, seed, &tag)?;
        let (scores, labels) = evaluate_recognition(&w, &val, &classes, &mut derive(seed, "c-way.eval", round as u64))?;
        out.metrics.extend(accuracy_records(&scores, &labels, &w.config.eval.top_k, "val", round, seed)?);
        if round == 0 {
            out.losses = losses;
        }
    }
    Ok(out)
}

/// Random disjoint category split at the configured fraction.
pub fn zero_shot_split<T: Scalar>(ws: &Workspace<T>, trial: usize) -> Result<SplitSpec> {
    let seed = ws.config.seed;
    let mut s = split_zero_shot(
        &ws.all_categories(),
        ws.config.eval.zero_shot_train_fraction,
        seed,
        &mut derive(seed, "zero-shot.split", trial as u64),
    )?;
    s.trials = 1;
    Ok(s)
}

/// Train on the split's train categories, then classify held-out videos of
/// the disjoint val categories from their names alone.
pub fn zero_shot_protocol<T: Scalar>(ws: &Workspace<T>, split: &SplitSpec, steps: usize, trial: usize) -> Result<ProtocolResult> {
    split.validate_zero_shot()?;
    let seed = ws.config.seed;
    let train_classes: Vec<usize> = split.train_categories.iter().copied().collect();
    let val_classes: Vec<usize> = split.val_categories.iter().copied().collect();
    let n = ws.dataset.category_names.len();
    if let Some(&c) = train_classes.iter().chain(&val_classes).find(|&&c| c >= n) {
        return Err(ExperimentError::Protocol(format!("split names category {c}, dataset has {n}")));
    }
    let mut w = ws.clone();
    let train: Vec<&VideoSample> =
        ws.dataset.train.iter().filter(|v| v.category().is_some_and(|c| split.train_categories.contains(&c))).collect();
    let val: Vec<&VideoSample> =
        ws.dataset.val.iter().filter(|v| v.category().is_some_and(|c| split.val_categories.contains(&c))).collect();
    let names = w.category_names(&train_classes);
    let mut opt = w.optimizer();
    let loss = w.config.train.loss();
    let tag = format!("zero-shot.train.{trial}");
    let losses = train_recognition(&w.model, &mut w.store, &mut opt, &w.cache, &train, &train_classes, &names, &loss, steps, seed, &tag)?;
    let (scores, labels) = evaluate_recognition(&w, &val, &val_classes, &mut derive(seed, "zero-shot.eval", trial as u64))?;
    Ok(ProtocolResult { metrics: accuracy_records(&scores, &labels, &w.config.eval.top_k, "zero-shot", trial, seed)?, losses })
}

/// Contrastive video–query training within each batch.
pub fn train_retrieval<T: Scalar>(ws: &mut Workspace<T>, opt: &mut AdamW<T>, steps: usize) -> Result<Vec<LossRecord>> {
    let videos: Vec<&VideoSample> = ws.dataset.train.iter().collect();
    let batch = opt.config.batch_size.min(videos.len());
    let loss_cfg = ws.config.train.loss();
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rng = derive(ws.config.seed, "train.retrieval", opt.step);
        let picked: Vec<&&VideoSample> = videos.choose_multiple(&mut rng, batch).collect();
        let mut g = Graph::<T>::new();
        let mut rows = Vec::with_capacity(batch);
        let mut queries = Vec::with_capacity(batch);
        for v in picked {
            let ff = sample_clip::<T, _>(&ws.model, &ws.cache, v, &mut rng)?;
            rows.push(embed_clip(&ws.model, &ws.store, &mut g, &ff)?);
            queries.push(query_of(v)?);
        }
        let vids = g.concat_rows(&rows);
        let text = ws.model.text.generate_classifiers(&mut g, &ws.store, &unique_texts(&queries), &ws.model.bank).map_err(ModelError::from)?;
        let text = l2_normalize(&mut g, text)?;
        let sims = similarity_matrix(&mut g, vids, text);
        let targets = target_rows(&queries);
        let loss = nce_loss(&mut g, sims, &targets, &loss_cfg)?;
        records.push(run_step(&mut ws.store, opt, &g, loss)?);
    }
    Ok(records)
}

fn query_of(v: &VideoSample) -> Result<String> {
    match &v.label {
        crate::video::Label::Query(q) => Ok(q.clone()),
        _ => Err(ExperimentError::Protocol(format!("`{}` has no query sentence", v.id))),
    }
}

/// Distinct texts in first-seen order (duplicates would form a singular
/// classifier set).
fn unique_texts(texts: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in texts {
        if !out.contains(t) {
            out.push(t.clone());
        }
    }
    out
}

fn target_rows(texts: &[String]) -> Vec<usize> {
    let uniq = unique_texts(texts);
    texts.iter().map(|t| uniq.iter().position(|u| u == t).unwrap()).collect()
}

/// Query × video similarities on the held-out split and the rank report.
pub fn eval_retrieval<T: Scalar>(ws: &Workspace<T>) -> Result<(RetrievalReport, Vec<MetricRecord>)> {
    let videos: Vec<&VideoSample> = ws.dataset.val.iter().collect();
    let queries: Vec<String> = videos.iter().map(|v| query_of(v)).collect::<Result<_>>()?;
    let q = ws.model.embed_texts(&ws.store, &queries)?;
    let mut rng = derive(ws.config.seed, "eval.retrieval", 0);
    let mut vid_rows = Vec::with_capacity(videos.len() * ws.model.config.width);
    for v in &videos {
        let emb = five_crop_predict(v.num_frames(), ws.model.config.clip_len, &ws.model.gaps, ws.config.eval.crops, &mut rng, |s| {
            let ff: FrameFeatures<T> =
                ws.model.clip_features(&ws.cache, &v.id, s).map_err(|e| VideoError::Cache(e.to_string()))?;
            let mut g = Graph::new();
            let e = ws.model.video_embedding(&mut g, &ws.store, &ff).map_err(|e| VideoError::Cache(e.to_string()))?;
            let e = l2_normalize_tensor(g.value(e)).map_err(|e| VideoError::Cache(e.to_string()))?;
            Ok(e.to_f64_vec())
        })?;
        vid_rows.extend(emb);
    }
    let vids = Tensor::<f64>::from_rows(videos.len(), ws.model.config.width, vid_rows);
    let vids = l2_normalize_tensor(&vids)?;
    let sims = q.cast::<f64>().matmul(&vids.transpose());
    let matrix: Vec<Vec<f64>> = (0..sims.rows()).map(|i| sims.row(i).to_vec()).collect();
    let report = retrieval_ranks(&matrix)?;
    let seed = ws.config.seed;
    let metrics = vec![
        MetricRecord::new("r@1", "val", 0, seed, report.recall_at_1),
        MetricRecord::new("r@5", "val", 0, seed, report.recall_at_5),
        MetricRecord::new("r@10", "val", 0, seed, report.recall_at_10),
        MetricRecord::new("mdr", "val", 0, seed, report.median_rank as f64),
    ];
    Ok((report, metrics))
}

/// Whole-timeline features with positions `0..T` at gap 1.
fn timeline_features<T: Scalar>(model: &Model, cache: &FeatureCache, v: &VideoSample) -> Result<FrameFeatures<T>> {
    let gap = *model.gaps.iter().min().expect("gap set is non-empty");
    let sample = crate::video::FrameSample { indices: (0..v.num_frames()).collect(), gap };
    Ok(model.clip_features(cache, &v.id, &sample)?)
}

fn frame_times(n: usize) -> Vec<f64> {
    (0..n).map(|t| t as f64).collect()
}

/// Localisation training: pooled features of ground-truth instances against
/// classifiers of the training classes.
pub fn train_localisation<T: Scalar>(
    ws: &mut Workspace<T>,
    opt: &mut AdamW<T>,
    videos: &[VideoSample],
    classes: &[usize],
    steps: usize,
) -> Result<Vec<LossRecord>> {
    let row_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let names = ws.category_names(classes);
    let loss_cfg = ws.config.train.loss();
    let usable: Vec<&VideoSample> = videos.iter().filter(|v| !v.instances().is_empty()).collect();
    if usable.is_empty() {
        return Err(ExperimentError::Protocol("no training instances".into()));
    }
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rng = derive(ws.config.seed, "train.localisation", opt.step);
        let mut g = Graph::<T>::new();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        while rows.len() < opt.config.batch_size.min(usable.iter().map(|v| v.instances().len()).sum()) {
            let v = usable.choose(&mut rng).unwrap();
            let ff = timeline_features::<T>(&ws.model, &ws.cache, v)?;
            let dense = ws.model.dense_features(&mut g, &ws.store, &ff)?;
            let times = frame_times(v.num_frames());
            for inst in v.instances() {
                let t = *row_of
                    .get(&inst.class)
                    .ok_or_else(|| ExperimentError::Protocol(format!("class {} not in training set", inst.class)))?;
                let p = Proposal::new(inst.start, inst.end, 1.0);
                let pooled = crate::video::mean_pool_proposal(&mut g, dense, &p, &times)?;
                rows.push(l2_normalize(&mut g, pooled)?);
                targets.push(t);
            }
        }
        let feats = g.concat_rows(&rows);
        let cls = ws.model.classifiers(&mut g, &ws.store, &names)?;
        let cls = l2_normalize(&mut g, cls)?;
        let sims = similarity_matrix(&mut g, feats, cls);
        let loss = nce_loss(&mut g, sims, &targets, &loss_cfg)?;
        records.push(run_step(&mut ws.store, opt, &g, loss)?);
    }
    Ok(records)
}

/// Where localisation proposals come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposalSource {
    /// Exactly the ground-truth intervals, score 1.
    Planted,
    /// Ground truth with boundaries perturbed by `N(0, (noise · length)²)`,
    /// scored by their IoU with the source instance, plus random background
    /// proposals with low scores.
    JitteredGt { noise: f64 },
}

pub fn generate_proposals<R: Rng + ?Sized>(
    video: &VideoSample,
    source: ProposalSource,
    false_proposals: usize,
    rng: &mut R,
) -> Vec<Proposal> {
    let total = video.num_frames() as f64;
    let mut out = Vec::new();
    match source {
        ProposalSource::Planted => {
            out.extend(video.instances().iter().map(|i| Proposal::new(i.start, i.end, 1.0)));
        }
        ProposalSource::JitteredGt { noise } => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            for inst in video.instances() {
                let len = inst.end - inst.start;
                let s = (inst.start + noise * len * normal.sample(rng)).round().clamp(0.0, total - 1.0);
                let e = (inst.end + noise * len * normal.sample(rng)).round().clamp(s + 1.0, total);
                let mut p = Proposal::new(s, e, 0.0);
                p.score = crate::metrics::interval_iou(&p, &Proposal::new(inst.start, inst.end, 1.0));
                out.push(p);
            }
            for _ in 0..false_proposals {
                let len = rng.random_range(2.0..(total / 4.0).max(3.0)).round();
                let s = rng.random_range(0.0..(total - len).max(1.0)).round();
                out.push(Proposal::new(s, (s + len).min(total), rng.random_range(0.0..0.3)));
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
    out
}

/// Second-stage localisation: classify proposals, Soft-NMS, then mAP over
/// the IoU set, AR@AN of the proposals and proposal classification accuracy.
pub fn eval_localisation<T: Scalar>(
    ws: &Workspace<T>,
    videos: &[VideoSample],
    classes: &[usize],
    source: ProposalSource,
    split: &str,
    trial: usize,
) -> Result<Vec<MetricRecord>> {
    let seed = ws.config.seed;
    let eval = &ws.config.eval;
    let names = ws.category_names(classes);
    let cls_t = ws.model.embed_texts(&ws.store, &names)?.cast::<f64>().transpose();
    let tau = ws.config.train.temperature;
    let mut rng = derive(seed, "eval.localisation", trial as u64);
    let mut detections = Vec::new();
    let mut scored = Vec::new();
    let mut all_props = Vec::new();
    let mut gts = Vec::new();
    for v in videos {
        for inst in v.instances() {
            if let Some(row) = classes.iter().position(|&c| c == inst.class) {
                gts.push(GroundTruthInstance { video_id: v.id.clone(), class: row, start: inst.start, end: inst.end });
            }
        }
        let proposals = generate_proposals(v, source, eval.false_proposals, &mut rng);
        let ff = timeline_features::<T>(&ws.model, &ws.cache, v)?;
        let mut g = Graph::new();
        let dense = ws.model.dense_features(&mut g, &ws.store, &ff)?;
        let times = frame_times(v.num_frames());
        for p in &proposals {
            let rows = match covered_rows(p, &times) {
                Ok(r) => r,
                Err(VideoError::NoCoveredFrame { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let pooled = g.value(dense).select_rows(&rows).mean_rows().cast::<f64>();
            let pooled = l2_normalize_tensor(&pooled)?;
            let logits = pooled.matmul(&cls_t).to_f64_vec();
            let probs = softmax(&logits, tau);
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            for &c in order.iter().take(eval.detections_per_proposal) {
                detections.push(Detection { video_id: v.id.clone(), proposal: *p, class: c, confidence: probs[c] * p.score });
            }
            scored.push(ScoredProposal { video_id: v.id.clone(), proposal: *p, class_scores: logits });
        }
        all_props.push(VideoProposals { video_id: v.id.clone(), proposals });
    }
    let kept = soft_nms(&detections, eval.iou_set.soft_nms_threshold(), SoftNmsDecay::Linear);
    let thresholds = eval.iou_set.thresholds();
    let map = detection_map(&kept, &gts, &thresholds)?;
    let mut out = Vec::new();
    for (t, m) in thresholds.iter().zip(&map.map) {
        out.push(MetricRecord::new(format!("map@{t:.2}"), split, trial, seed, *m));
    }
    out.push(MetricRecord::new("map_avg", split, trial, seed, map.average));
    for &an in &eval.proposal_numbers {
        let ar = average_recall_at_an(&all_props, &gts, an, &eval.recall_grid)?;
        out.push(MetricRecord::new(format!("ar@{an}"), split, trial, seed, ar));
    }
    if let Some(acc) = proposal_classification_accuracy(&scored, &gts) {
        out.push(MetricRecord::new("proposal_top1", split, trial, seed, acc));
    }
    Ok(out)
}

fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Closed-set localisation: train on train timelines, evaluate on val.
pub fn localisation_closed_set<T: Scalar>(ws: &mut Workspace<T>, source: ProposalSource) -> Result<ProtocolResult> {
    let classes = ws.all_categories();
    let train = ws.dataset.train.clone();
    let mut opt = ws.optimizer();
    let steps = ws.config.train.steps;
    let losses = train_localisation(ws, &mut opt, &train, &classes, steps)?;
    let val = ws.dataset.val.clone();
    let metrics = eval_localisation(ws, &val, &classes, source, "val", 0)?;
    Ok(ProtocolResult { metrics, losses })
}

/// Zero-shot localisation over random category splits; videos mixing both
/// sides are divided into two.
pub fn localisation_zero_shot<T: Scalar>(ws: &Workspace<T>, source: ProposalSource, trials: usize) -> Result<ProtocolResult> {
    let seed = ws.config.seed;
    let mut out = ProtocolResult::default();
    let all: Vec<VideoSample> = ws.dataset.train.iter().chain(&ws.dataset.val).cloned().collect();
    for trial in 0..trials {
        let split = split_zero_shot(
            &ws.all_categories(),
            ws.config.eval.localisation_train_fraction,
            seed,
            &mut derive(seed, "localisation.split", trial as u64),
        )?;
        let (train, val) = divide_multilabel_videos(&all, &split)?;
        let mut w = ws.clone();
        w.reset_adapters(derive(seed, "localisation.init", trial as u64).random());
        let train_classes: Vec<usize> = split.train_categories.iter().copied().collect();
        let val_classes: Vec<usize> = split.val_categories.iter().copied().collect();
        let mut opt = w.optimizer();
        let steps = w.config.train.steps;
        let losses = train_localisation(&mut w, &mut opt, &train, &train_classes, steps)?;
        out.metrics.extend(eval_localisation(&w, &val, &val_classes, source, "zero-shot", trial)?);
        if trial == 0 {
            out.losses = losses;
        }
    }
    Ok(out)
}

/// Tiny-model gradient check of the recognition loss in 64-bit: every
/// trainable tensor is probed, `samples` entries in total at least.
pub fn grad_check(config: &ExperimentConfig, samples: usize, eps: f64) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.data.synthetic.categories = 4;
    cfg.data.synthetic.train_per_category = 1;
    cfg.data.synthetic.val_per_category = 1;
    cfg.data.synthetic.task = TaskKind::Recognition;
    let ws = Workspace::<f64>::prepare(&cfg)?;
    let classes = ws.all_categories();
    let names = ws.category_names(&classes);
    let mut rng = derive(cfg.seed, "grad-check.clips", 0);
    let clips: Vec<(FrameFeatures<f64>, usize)> = ws
        .dataset
        .train
        .iter()
        .map(|v| Ok((sample_clip::<f64, _>(&ws.model, &ws.cache, v, &mut rng)?, v.category().unwrap())))
        .collect::<Result<_>>()?;
    let loss_cfg = cfg.train.loss();
    let model = &ws.model;
    let eval = |store: &ParamStore<f64>, g: &mut Graph<f64>| -> Result<Var, AutogradError> {
        let err = |e: ExperimentError| AutogradError::Evaluation(e.to_string());
        let mut rows = Vec::new();
        for (ff, _) in &clips {
            rows.push(embed_clip(model, store, g, ff).map_err(err)?);
        }
        let vids = g.concat_rows(&rows);
        let cls = model.classifiers(g, store, &names).map_err(|e| err(e.into()))?;
        let cls = l2_normalize(g, cls).map_err(|e| err(e.into()))?;
        let sims = similarity_matrix(g, vids, cls);
        let targets: Vec<usize> = clips.iter().map(|(_, c)| *c).collect();
        nce_loss(g, sims, &targets, &loss_cfg).map_err(|e| err(e.into()))
    };
    let trainable: Vec<String> = model.adapter_names(&ws.store);
    if trainable.is_empty() {
        return Err(ExperimentError::Protocol("model has no trainable tensors to check".into()));
    }
    let per_tensor = samples.div_ceil(trainable.len()).max(1);
    let mut report = GradCheckReport { max_relative_error: 0.0, entries_checked: 0, worst: None };
    for (i, name) in trainable.iter().enumerate() {
        let mut probe = ws.store.clone();
        for other in &trainable {
            probe.set_trainable(other, other == name);
        }
        let r = finite_diff_check(eval, &probe, eps, per_tensor, &mut derive(cfg.seed, "grad-check.sample", i as u64))?;
        report.entries_checked += r.entries_checked;
        if r.max_relative_error > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = r.max_relative_error;
            report.worst = r.worst;
        }
    }
    Ok(report)
}

/// The configuration used for gradient checks: D=16, text depth 2, one
/// temporal layer, 64-word vocabulary, batch 4.
pub fn tiny_grad_check_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, ..Default::default() };
    c.model.width = 16;
    c.model.heads = 2;
    c.model.text_depth = 2;
    c.model.temporal_depth = 1;
    c.model.vocab_size = 64;
    c.model.prompt_k = 2;
    c.model.clip_len = 4;
    c.model.max_frames = 64;
    c.data.synthetic.frame_dim = 8;
    c.data.synthetic.min_frames = 8;
    c.data.synthetic.max_frames = 12;
    c.data.synthetic.words_per_name = 1;
    c.data.gaps = Some(vec![1, 2]);
    c.train.batch_size = 4;
    c
}

pub fn frozen_names<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store.iter().filter(|p| !p.trainable).map(|p| p.name.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = tiny_grad_check_config(1);
        c.data.synthetic.train_per_category = 3;
        c.data.synthetic.val_per_category = 2;
        c.eval.top_k = vec![1];
        c.eval.crops = 2;
        c
    }

    #[test]
    fn proposals_planted_match_ground_truth() {
        let ws = Workspace::<f32>::prepare(&{
            let mut c = tiny();
            c.data.synthetic.task = TaskKind::Localisation;
            c.data.synthetic.localisation.timeline_frames = 32;
            c.data.synthetic.localisation.max_instances = 3;
            c.data.synthetic.localisation.train_videos = 2;
            c.data.synthetic.localisation.val_videos = 2;
            c
        })
        .unwrap();
        let v = &ws.dataset.val[0];
        let p = generate_proposals(v, ProposalSource::Planted, 3, &mut derive(0, "p", 0));
        assert_eq!(p.len(), v.instances().len());
        let j = generate_proposals(v, ProposalSource::JitteredGt { noise: 0.1 }, 3, &mut derive(0, "p", 0));
        assert_eq!(j.len(), v.instances().len() + 3);
        assert!(j.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(j.iter().all(|p| p.start < p.end && p.end <= 32.0));
    }

    #[test]
    fn training_changes_only_adapters() {
        let mut ws = Workspace::<f32>::prepare(&tiny()).unwrap();
        let before = ws.store.clone();
        let mut opt = ws.optimizer();
        let losses = train_closed_set(&mut ws, &mut opt, 3).unwrap();
        assert_eq!(losses.len(), 3);
        for p in ws.store.iter() {
            let old = before.tensor(&p.name);
            if p.trainable {
                assert_ne!(&p.value, old, "{} should move", p.name);
            } else {
                assert_eq!(&p.value, old, "{} must stay frozen", p.name);
            }
        }
    }

    #[test]
    fn grad_check_on_tiny_model() {
        let r = grad_check(&tiny_grad_check_config(0), 40, 1e-4).unwrap();
        assert!(r.entries_checked >= 40);
        assert!(r.max_relative_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn overlapping_zero_shot_split_rejected() {
        let ws = Workspace::<f32>::prepare(&tiny()).unwrap();
        let split = SplitSpec { train_categories: [0, 1].into(), val_categories: [1, 2].into(), trials: 1, seed: 0 };
        assert!(zero_shot_protocol(&ws, &split, 1, 0).is_err());
    }

    #[test]
    fn target_rows_dedupe() {
        let t = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        assert_eq!(target_rows(&t), vec![0, 1, 0]);
    }
}
