//! The assembled video model: frozen text and image towers, a shared prompt
//! bank and an optional temporal Transformer.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, ParamStore, Var};
use crate::data::{World, DOMAIN_WORD, FUNCTION_WORDS};
use crate::nn::{NnError, TransformerConfig};
use crate::objectives::{l2_normalize, nce_loss, AdamW, LossConfig, ObjectiveError, TrainConfig};
use crate::rng::derive;
use crate::tensor::{Scalar, Tensor};
use crate::text::{PromptBank, TextEncoder, TextError, Vocabulary, DEFAULT_TOKEN_BUDGET};
use crate::video::{FeatureCache, FrameFeatures, FrameSample, ImageEncoder, TemporalEncoder, VideoError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("no cached features for video `{0}`")]
    MissingFeatures(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Toy-scale alignment of the text tower with the image encoder, run once
/// before any prompt learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Words per pretraining caption.
    pub words: usize,
    /// Gaussian noise σ added to pretraining images.
    pub noise: f64,
    /// Up to this many function words are mixed into each caption at random
    /// positions.
    pub context_words: usize,
    /// Probability that a caption mentions the domain word and so depicts
    /// the video sense of its words.
    pub video_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 0, learning_rate: 3e-3, batch_size: 32, words: 2, noise: 0.3, context_words: 0, video_rate: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_depth: usize,
    /// Temporal Transformer depth; `0` bypasses the temporal encoder.
    pub temporal_depth: usize,
    /// Prompt vectors on each side of the text, `[k + X + k]`.
    pub prompt_k: usize,
    pub token_budget: usize,
    pub vocab_size: usize,
    pub clip_len: usize,
    pub max_frames: usize,
    /// Std of every trainable tensor at initialisation.
    pub init_std: f64,
    /// Seed of the frozen backbone, independent of the experiment seed.
    pub backbone_seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            mlp_ratio: 2,
            text_depth: 2,
            temporal_depth: 2,
            prompt_k: 16,
            token_budget: DEFAULT_TOKEN_BUDGET,
            vocab_size: 256,
            clip_len: 16,
            max_frames: 512,
            init_std: 0.01,
            backbone_seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let need = 2 * self.prompt_k + 3;
        if self.token_budget < need {
            return Err(ModelError::Config(format!(
                "token_budget {} is below 2·prompt_k+3 = {need}",
                self.token_budget
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.text_depth == 0 {
            return Err(ModelError::Config("text_depth must be at least 1".into()));
        }
        if self.clip_len == 0 || self.clip_len > self.max_frames {
            return Err(ModelError::Config(format!(
                "clip_len {} must lie in 1..={}",
                self.clip_len, self.max_frames
            )));
        }
        if self.vocab_size < 4 + 24 {
            return Err(ModelError::Config(format!("vocab_size {} is too small", self.vocab_size)));
        }
        if self.mlp_ratio == 0 || !(self.init_std > 0.0) {
            return Err(ModelError::Config("mlp_ratio and init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn transformer(&self, depth: usize, max_seq_len: usize) -> TransformerConfig {
        TransformerConfig { depth, width: self.width, heads: self.heads, mlp_ratio: self.mlp_ratio, max_seq_len }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub temporal: Option<TemporalEncoder>,
    pub bank: PromptBank,
    pub gaps: Vec<usize>,
}

impl Model {
    /// `task` names the prompt bank, one bank per task head.
    pub fn new(config: ModelConfig, frame_dim: usize, gaps: &[usize], task: &str) -> Result<Self, ModelError> {
        config.validate()?;
        if gaps.is_empty() {
            return Err(VideoError::EmptyGapSet.into());
        }
        let text = TextEncoder::new(
            Vocabulary::synthetic(config.vocab_size),
            config.transformer(config.text_depth, config.token_budget),
            config.token_budget,
        )?;
        let temporal = if config.temporal_depth > 0 {
            let t = config.transformer(config.temporal_depth, config.max_frames);
            Some(TemporalEncoder::new(t, config.max_frames, gaps)?)
        } else {
            None
        };
        Ok(Self {
            config,
            text,
            image: ImageEncoder { input_dim: frame_dim, width: config.width },
            temporal,
            bank: PromptBank::new(task, config.prompt_k, config.width),
            gaps: gaps.to_vec(),
        })
    }

    /// Frozen text and image towers, seeded by `backbone_seed` only.
    pub fn init_backbone<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let seed = self.config.backbone_seed;
        self.text.init(store, &mut derive(seed, "backbone.text", 0));
        self.image.init(store, &mut derive(seed, "backbone.image", 0));
    }

    /// Trainable prompts and temporal encoder drawn from `N(0, init_std²)`.
    pub fn init_adapters<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let std = self.config.init_std;
        self.bank.init(store, std, &mut derive(seed, "init.prompts", 0));
        if let Some(t) = &self.temporal {
            t.init(store, std, &mut derive(seed, "init.temporal", 0));
        }
    }

    /// Trainable parameter names (prompts, temporal encoder, position tables).
    pub fn adapter_names<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<String> {
        store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }

    /// Clip features at the sampled indices, positions relative to the clip start.
    pub fn clip_features<T: Scalar>(
        &self,
        cache: &FeatureCache,
        id: &str,
        sample: &FrameSample,
    ) -> Result<FrameFeatures<T>, ModelError> {
        cache.clip(id, sample).ok_or_else(|| ModelError::MissingFeatures(id.to_string()))
    }

    /// Dense `T × D` video features: the temporal encoder's output, or the
    /// frame features themselves when it is bypassed.
    pub fn dense_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ff: &FrameFeatures<T>,
    ) -> Result<Var, ModelError> {
        match &self.temporal {
            Some(t) => Ok(t.encode_video(g, store, ff)?),
            None => Ok(g.constant(ff.features.clone())),
        }
    }

    /// Mean-pooled `1 × D` video embedding.
    pub fn video_embedding<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ff: &FrameFeatures<T>,
    ) -> Result<Var, ModelError> {
        let dense = self.dense_features(g, store, ff)?;
        Ok(g.mean_rows(dense))
    }

    /// `C × D` classifiers generated from category names.
    pub fn classifiers<T: Scalar, S: AsRef<str>>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        names: &[S],
    ) -> Result<Var, ModelError> {
        Ok(self.text.generate_classifiers(g, store, names, &self.bank)?)
    }

    /// Normalised text embeddings without a graph.
    pub fn embed_texts<T: Scalar, S: AsRef<str>>(
        &self,
        store: &ParamStore<T>,
        texts: &[S],
    ) -> Result<Tensor<T>, ModelError> {
        let raw = self.text.embed_all(store, texts, &self.bank)?;
        Ok(crate::objectives::l2_normalize_tensor(&raw)?)
    }
}

/// Build a model and its parameters: backbone, optional pretraining, then
/// freshly initialised adapters.
pub fn build_model<T: Scalar>(
    config: ModelConfig,
    frame_dim: usize,
    gaps: &[usize],
    task: &str,
    world: Option<&World>,
    seed: u64,
) -> Result<(Model, ParamStore<T>), ModelError> {
    let model = Model::new(config, frame_dim, gaps, task)?;
    let mut store = ParamStore::<T>::new();
    model.init_backbone(&mut store);
    if config.pretrain.steps > 0 {
        let world = world.ok_or_else(|| ModelError::Config("pretraining needs a concept world".into()))?;
        if world.frame_dim != frame_dim {
            return Err(ModelError::Config("world and frame dimensions differ".into()));
        }
        let mut f32_store = store.cast::<f32>();
        pretrain_backbone(&model, &mut f32_store, world, &config.pretrain, &mut derive(config.backbone_seed, "pretrain", 0))?;
        store = f32_store.cast::<T>();
    }
    model.init_adapters(&mut store, seed);
    Ok((model, store))
}

/// Align the text tower with the frozen image encoder on random word
/// captions with symmetric NCE, then freeze it again. Only text-tower
/// parameters move; the image encoder stays at its seeded values.
pub fn pretrain_backbone<R: Rng + ?Sized>(
    model: &Model,
    store: &mut ParamStore<f32>,
    world: &World,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    let words = model.text.vocab.concept_words().into_iter().map(str::to_string).collect::<Vec<_>>();
    if words.len() < config.words.max(1) || config.batch_size < 2 {
        return Err(ModelError::Config("pretraining needs a larger vocabulary or batch".into()));
    }
    if !(0.0..=1.0).contains(&config.video_rate) {
        return Err(ModelError::Config(format!("video_rate {} outside [0, 1]", config.video_rate)));
    }
    let fillers: Vec<&str> = model.text.vocab.filler_words().into_iter().filter(|w| FUNCTION_WORDS.contains(w)).collect();
    let video_word = model.text.vocab.words().iter().any(|w| w == DOMAIN_WORD);
    let text_names = model.text.param_names(store);
    for n in &text_names {
        store.set_trainable(n, true);
    }
    let empty = PromptBank::new("pretrain", 0, model.config.width);
    let loss_cfg = LossConfig { symmetric: true, ..LossConfig::default() };
    let mut opt = AdamW::<f32>::new(TrainConfig {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        weight_decay: 0.0,
        steps: config.steps,
        ..TrainConfig::default()
    });
    let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| ModelError::Config(e.to_string()))?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut captions: Vec<String> = Vec::with_capacity(config.batch_size);
        while captions.len() < config.batch_size {
            let mut pick: Vec<&str> = words.choose_multiple(rng, config.words).map(String::as_str).collect();
            let mut extra = false;
            if config.context_words > 0 && !fillers.is_empty() {
                let n = rng.random_range(0..=config.context_words);
                pick.extend((0..n).map(|_| *fillers.choose(rng).unwrap()));
                extra = true;
            }
            if video_word && config.video_rate > 0.0 && rng.random_bool(config.video_rate) {
                pick.push(DOMAIN_WORD);
                extra = true;
            }
            if extra {
                pick.shuffle(rng);
            }
            let caption = pick.join(" ");
            if !captions.contains(&caption) {
                captions.push(caption);
            }
        }
        let f = world.frame_dim;
        let mut frames = Vec::with_capacity(captions.len() * f);
        for c in &captions {
            for v in world.caption_direction(c) {
                frames.push((v + noise.sample(rng)) as f32);
            }
        }
        let images = model.image.encode_frames(store, &Tensor::from_rows(captions.len(), f, frames));

        let mut g = Graph::<f32>::new();
        let img = g.constant(images);
        let img = l2_normalize(&mut g, img)?;
        let txt = model.text.generate_classifiers(&mut g, store, &captions, &empty)?;
        let txt = l2_normalize(&mut g, txt)?;
        let sims = crate::objectives::similarity_matrix(&mut g, img, txt);
        let targets: Vec<usize> = (0..captions.len()).collect();
        let loss = nce_loss(&mut g, sims, &targets, &loss_cfg)?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        crate::objectives::train_step(store, &mut opt, value, &grads)
            .map_err(|e| match e {
                ObjectiveError::NonFiniteLoss { loss, .. } => ObjectiveError::NonFiniteLoss { step: step as u64, loss },
                other => other,
            })?;
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("pretrain step {step} loss {value:.4}");
        }
    }
    for n in &text_names {
        store.set_trainable(n, false);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_budget_enforced() {
        let c = ModelConfig { prompt_k: 40, ..Default::default() };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("token_budget"), "{err}");
    }

    #[test]
    fn backbone_frozen_adapters_trainable() {
        let (m, store) = build_model::<f32>(ModelConfig::default(), 8, &[1, 2], "recognition", None, 0).unwrap();
        for p in store.iter() {
            let adapter = p.name.starts_with("prompt.") || p.name.starts_with("temporal");
            assert_eq!(p.trainable, adapter, "{}", p.name);
        }
        assert!(m.temporal.is_some());
    }

    #[test]
    fn zero_depth_bypasses_temporal_encoder() {
        let cfg = ModelConfig { temporal_depth: 0, prompt_k: 0, ..Default::default() };
        let (m, store) = build_model::<f32>(cfg, 8, &[1], "recognition", None, 0).unwrap();
        assert!(m.temporal.is_none());
        assert_eq!(store.trainable_count(), 0);
        let ff = FrameFeatures {
            features: Tensor::from_f64_rows(2, 32, &[0.5; 64]),
            frame_indices: vec![0, 1],
            gap: 1,
        };
        let mut g = Graph::new();
        let v = m.video_embedding(&mut g, &store, &ff).unwrap();
        assert_eq!(g.value(v).data(), &[0.5; 32]);
    }

    #[test]
    fn backbone_independent_of_experiment_seed() {
        let (_, a) = build_model::<f32>(ModelConfig::default(), 8, &[1], "r", None, 1).unwrap();
        let (_, b) = build_model::<f32>(ModelConfig::default(), 8, &[1], "r", None, 2).unwrap();
        assert_eq!(a.tensor("text.token_embedding"), b.tensor("text.token_embedding"));
        assert_ne!(a.tensor("prompt.r.prefix"), b.tensor("prompt.r.prefix"));
    }
}
