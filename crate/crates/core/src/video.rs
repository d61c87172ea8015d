//! Frame sampling, the frozen per-frame encoder, the trainable temporal
//! encoder and feature pooling.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{gelu_tensor, Graph, ParamStore, Var};
use crate::nn::{layer_norm_tensor, NnError, TemporalPositionTable, TransformerConfig, TransformerEncoder};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("gap set is empty")]
    EmptyGapSet,
    #[error("clip length must be at least 1")]
    EmptyClip,
    #[error("proposal [{start}, {end}) covers no frame")]
    NoCoveredFrame { start: f64, end: f64 },
    #[error("invalid proposal: start {start} is not before end {end}")]
    InvalidProposal { start: f64, end: f64 },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A labelled action occurrence inside an untrimmed timeline, in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Category(usize),
    Query(String),
    Instances(Vec<Instance>),
}

/// A video as a `T_total × F` matrix of frame stand-ins.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Tensor<f32>,
    pub label: Label,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn category(&self) -> Option<usize> {
        match self.label {
            Label::Category(c) => Some(c),
            _ => None,
        }
    }

    pub fn instances(&self) -> &[Instance] {
        match &self.label {
            Label::Instances(v) => v,
            _ => &[],
        }
    }

    /// Per-frame class from planted instances; `None` is background.
    pub fn dense_labels(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_frames()];
        for inst in self.instances() {
            for (t, slot) in out.iter_mut().enumerate() {
                let time = t as f64;
                if time >= inst.start && time < inst.end {
                    *slot = Some(inst.class);
                }
            }
        }
        out
    }
}

/// Sampled frame positions of one clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSample {
    /// Absolute frame indices into the video.
    pub indices: Vec<usize>,
    pub gap: usize,
}

impl FrameSample {
    /// Indices relative to the first sampled frame, used for positional
    /// lookup.
    pub fn relative_indices(&self) -> Vec<usize> {
        let first = self.indices.first().copied().unwrap_or(0);
        self.indices.iter().map(|&i| i - first).collect()
    }
}

/// Draw `clip_len` frames with a uniformly chosen feasible gap and start.
///
/// When no gap fits, frames `0..T_total` are taken at the smallest
/// configured gap's spacing of one and the last frame is repeated to fill
/// the clip.
pub fn sample_frames<R: Rng + ?Sized>(
    total: usize,
    clip_len: usize,
    gaps: &[usize],
    rng: &mut R,
) -> Result<FrameSample, VideoError> {
    if gaps.is_empty() {
        return Err(VideoError::EmptyGapSet);
    }
    if clip_len == 0 {
        return Err(VideoError::EmptyClip);
    }
    let feasible: Vec<usize> = gaps
        .iter()
        .copied()
        .filter(|&g| g >= 1 && (clip_len - 1) * g < total)
        .collect();
    if feasible.is_empty() {
        let gap = if gaps.contains(&1) { 1 } else { *gaps.iter().min().unwrap() };
        let indices = (0..clip_len).map(|t| t.min(total - 1)).collect();
        return Ok(FrameSample { indices, gap });
    }
    let gap = feasible[rng.random_range(0..feasible.len())];
    let span = (clip_len - 1) * gap + 1;
    let start = rng.random_range(0..=total - span);
    let indices = (0..clip_len).map(|t| start + t * gap).collect();
    Ok(FrameSample { indices, gap })
}

/// Dense clip features handed to the temporal encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<T: Scalar = f32> {
    pub features: Tensor<T>,
    pub frame_indices: Vec<usize>,
    pub gap: usize,
}

pub const IMAGE_PROJ_W: &str = "image.proj.w";
pub const IMAGE_PROJ_B: &str = "image.proj.b";
pub const IMAGE_LN_GAMMA: &str = "image.ln.gamma";
pub const IMAGE_LN_BETA: &str = "image.ln.beta";

/// Frozen per-frame encoder: linear map, GELU, layer norm.
#[derive(Debug, Clone, Copy)]
pub struct ImageEncoder {
    pub input_dim: usize,
    pub width: usize,
}

impl ImageEncoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let std = 1.0 / (self.input_dim as f64).sqrt();
        store.insert(IMAGE_PROJ_W, Tensor::randn(&[self.input_dim, self.width], std, rng), false);
        store.insert(IMAGE_PROJ_B, Tensor::randn(&[self.width], 0.1, rng), false);
        store.insert(IMAGE_LN_GAMMA, Tensor::filled(&[self.width], T::one()), false);
        store.insert(IMAGE_LN_BETA, Tensor::zeros(&[self.width]), false);
    }

    pub fn param_names() -> [&'static str; 4] {
        [IMAGE_PROJ_W, IMAGE_PROJ_B, IMAGE_LN_GAMMA, IMAGE_LN_BETA]
    }

    /// Encode every row of `frames`. Rows are independent, so encoding a
    /// subset equals selecting the same rows from the full encoding.
    pub fn encode_frames<T: Scalar>(&self, store: &ParamStore<T>, frames: &Tensor<T>) -> Tensor<T> {
        let w = store.tensor(IMAGE_PROJ_W);
        let b = store.tensor(IMAGE_PROJ_B);
        let mut h = frames.matmul(w);
        let c = h.cols();
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v = *v + b.data()[i % c];
        }
        let act = gelu_tensor(&h);
        layer_norm_tensor(&act, store.tensor(IMAGE_LN_GAMMA), store.tensor(IMAGE_LN_BETA))
    }
}

/// Per-video frame features under the frozen image encoder.
///
/// Binary layout per record: `u32` id length, UTF-8 id, `u32` T, `u32` D,
/// then `T·D` little-endian `f32` values in row-major order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    entries: HashMap<String, Tensor<f32>>,
    order: Vec<String>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Encode every video once.
    pub fn build(encoder: &ImageEncoder, store: &ParamStore<f32>, videos: &[VideoSample]) -> Self {
        let mut cache = Self::new();
        for v in videos {
            cache.insert(v.id.clone(), encoder.encode_frames(store, &v.frames));
        }
        cache
    }

    pub fn insert(&mut self, id: String, features: Tensor<f32>) {
        if self.entries.insert(id.clone(), features).is_none() {
            self.order.push(id);
        }
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<f32>> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Features of the sampled frames of one clip.
    pub fn clip<T: Scalar>(&self, id: &str, sample: &FrameSample) -> Option<FrameFeatures<T>> {
        let all = self.get(id)?;
        Some(FrameFeatures {
            features: all.select_rows(&sample.indices).cast(),
            frame_indices: sample.relative_indices(),
            gap: sample.gap,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), VideoError> {
        for id in &self.order {
            write_record(&mut w, id, &self.entries[id])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, VideoError> {
        let mut cache = Self::new();
        for (id, t) in read_records(r)? {
            cache.insert(id, t);
        }
        Ok(cache)
    }
}

/// Write one `(id, T × D matrix)` record of the feature-cache format.
pub fn write_record<W: Write>(w: &mut W, id: &str, t: &Tensor<f32>) -> Result<(), VideoError> {
    let (rows, cols) = t.dims2();
    let bytes = id.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read every record of a feature-cache stream.
pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, VideoError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let take = |n: usize, pos: &mut usize| -> Result<&[u8], VideoError> {
        if *pos + n > bytes.len() {
            return Err(VideoError::Cache(format!("truncated record at byte {}", *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = u32_at(take(4, &mut pos)?);
        let id = String::from_utf8(take(len, &mut pos)?.to_vec())
            .map_err(|_| VideoError::Cache("video id is not UTF-8".into()))?;
        let rows = u32_at(take(4, &mut pos)?);
        let cols = u32_at(take(4, &mut pos)?);
        if rows == 0 || cols == 0 {
            return Err(VideoError::Cache(format!("record `{id}` has an empty shape")));
        }
        let raw = take(rows * cols * 4, &mut pos)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((id, Tensor::from_rows(rows, cols, data)));
    }
    Ok(out)
}

/// The trainable temporal Transformer with its positional tables.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub transformer: TransformerEncoder,
    pub positions: TemporalPositionTable,
}

impl TemporalEncoder {
    pub fn new(config: TransformerConfig, max_frames: usize, gaps: &[usize]) -> Result<Self, NnError> {
        Ok(Self {
            positions: TemporalPositionTable::new("temporal.pos", max_frames, config.width, gaps),
            transformer: TransformerEncoder::new("temporal", config)?,
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, std: f64, rng: &mut R) {
        self.transformer.init(store, std, true, rng);
        self.positions.init(store, std, true, rng);
    }

    /// `Transformer(features + positional encoding)`, `T × D` out.
    pub fn encode_video<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ff: &FrameFeatures<T>,
    ) -> Result<Var, VideoError> {
        let x = g.constant(ff.features.clone());
        let pos = self.positions.encode(g, store, &ff.frame_indices, ff.gap)?;
        let h = g.add(x, pos);
        Ok(self.transformer.forward(g, store, h)?)
    }
}

/// Interval in frame (or second) units with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Proposal {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        if self.start < self.end {
            Ok(())
        } else {
            Err(VideoError::InvalidProposal { start: self.start, end: self.end })
        }
    }

    pub fn covers(&self, time: f64) -> bool {
        time >= self.start && time < self.end
    }
}

/// Mean over all rows.
pub fn mean_pool_snippet<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    g.mean_rows(v)
}

/// Rows whose frame time lies in `[start, end)`.
pub fn covered_rows(p: &Proposal, frame_times: &[f64]) -> Result<Vec<usize>, VideoError> {
    p.validate()?;
    let rows: Vec<usize> = frame_times
        .iter()
        .enumerate()
        .filter(|(_, &t)| p.covers(t))
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(VideoError::NoCoveredFrame { start: p.start, end: p.end });
    }
    Ok(rows)
}

/// Mean over rows whose frame time lies inside the proposal (half-open).
pub fn mean_pool_proposal<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    p: &Proposal,
    frame_times: &[f64],
) -> Result<Var, VideoError> {
    assert_eq!(g.value(v).rows(), frame_times.len(), "one frame time per row");
    let rows = covered_rows(p, frame_times)?;
    let picked = g.gather_rows(v, &rows);
    Ok(g.mean_rows(picked))
}

/// Average `crops` predictions, each on an independently sampled clip.
pub fn five_crop_predict<R, F>(
    total_frames: usize,
    clip_len: usize,
    gaps: &[usize],
    crops: usize,
    rng: &mut R,
    mut predict_once: F,
) -> Result<Vec<f64>, VideoError>
where
    R: Rng + ?Sized,
    F: FnMut(&FrameSample) -> Result<Vec<f64>, VideoError>,
{
    let mut acc: Option<Vec<f64>> = None;
    for _ in 0..crops.max(1) {
        let s = sample_frames(total_frames, clip_len, gaps, rng)?;
        let p = predict_once(&s)?;
        match &mut acc {
            Some(a) => a.iter_mut().zip(&p).for_each(|(x, y)| *x += y),
            None => acc = Some(p),
        }
    }
    let n = crops.max(1) as f64;
    Ok(acc.unwrap().into_iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    #[test]
    fn forced_sampling_of_exact_length_video() {
        let s = sample_frames(16, 16, &[1], &mut derive(0, "s", 0)).unwrap();
        assert_eq!(s.indices, (0..16).collect::<Vec<_>>());
        assert_eq!(s.gap, 1);
    }

    #[test]
    fn single_frame_video_repeats_index_zero() {
        let s = sample_frames(1, 16, &[1, 2, 3, 4, 5, 6, 10, 15], &mut derive(0, "s", 0)).unwrap();
        assert_eq!(s.indices, vec![0; 16]);
    }

    #[test]
    fn sampling_is_reproducible_and_feasible() {
        let gaps = [1, 2, 3, 4, 5, 6, 10, 15];
        for t in 0..20 {
            let a = sample_frames(100, 16, &gaps, &mut derive(3, "s", t)).unwrap();
            let b = sample_frames(100, 16, &gaps, &mut derive(3, "s", t)).unwrap();
            assert_eq!(a, b);
            assert!(a.gap <= 6, "gap {} cannot fit 16 frames in 100", a.gap);
            assert!(*a.indices.last().unwrap() < 100);
            assert!(a.indices.windows(2).all(|w| w[1] - w[0] == a.gap));
        }
    }

    #[test]
    fn empty_gap_set_rejected() {
        assert!(matches!(sample_frames(10, 4, &[], &mut derive(0, "s", 0)), Err(VideoError::EmptyGapSet)));
    }

    #[test]
    fn proposal_with_no_frames_is_an_error() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[4, 2]));
        let err = mean_pool_proposal(&mut g, v, &Proposal::new(4.0, 6.0, 1.0), &[0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(err, Err(VideoError::NoCoveredFrame { .. })));
    }

    #[test]
    fn half_open_boundaries() {
        let p = Proposal::new(1.0, 3.0, 0.5);
        assert_eq!(covered_rows(&p, &[0.0, 1.0, 2.0, 3.0]).unwrap(), vec![1, 2]);
    }

    #[test]
    fn cache_stream_roundtrip() {
        let mut c = FeatureCache::new();
        c.insert("vid-a".into(), Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]));
        c.insert("b".into(), Tensor::from_rows(1, 1, vec![-0.25]));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], &5u32.to_le_bytes());
        assert_eq!(&buf[4..9], b"vid-a");
        assert_eq!(FeatureCache::read_from(&buf[..]).unwrap(), c);
        assert!(FeatureCache::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
