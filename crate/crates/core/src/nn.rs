//! Transformer blocks shared by the text encoder and the temporal encoder.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamStore, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid transformer config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention over an empty sequence")]
    EmptySequence,
    #[error("frame gap {0} has no positional entry")]
    UnknownGap(usize),
    #[error("frame index {index} is outside the position table of {max} rows")]
    FrameIndexOutOfRange { index: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.depth == 0 {
            return Err(NnError::Config("depth must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(NnError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(NnError::Config("mlp_ratio must be at least 1".into()));
        }
        if self.max_seq_len == 0 {
            return Err(NnError::Config("max_seq_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Row-wise layer norm: zero mean, unit (population) variance, then affine.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Var {
    let mu = g.row_mean(x);
    let centered = g.sub_col(x, mu);
    let var = g.row_variance(x);
    let var_eps = g.add_scalar(var, T::from_f64(LAYER_NORM_EPS));
    let std = g.sqrt(var_eps);
    let inv = g.recip(std);
    let normed = g.mul_col(centered, inv);
    let scaled = g.mul_row(normed, gamma);
    g.add_row(scaled, beta)
}

/// Layer norm on a plain tensor, same arithmetic as [`layer_norm`].
pub fn layer_norm_tensor<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gamma.clone());
    let bv = g.constant(beta.clone());
    let y = layer_norm(&mut g, xv, gv, bv);
    g.value(y).clone()
}

/// `x · W + b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

fn init_weight<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[rows, cols], std, rng)
}

/// Parameter names for one pre-norm block.
#[derive(Debug, Clone)]
struct BlockNames {
    ln1_gamma: String,
    ln1_beta: String,
    wq: String,
    bq: String,
    wk: String,
    bk: String,
    wv: String,
    bv: String,
    wo: String,
    bo: String,
    ln2_gamma: String,
    ln2_beta: String,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

impl BlockNames {
    fn new(prefix: &str, layer: usize) -> Self {
        let p = |s: &str| format!("{prefix}.layer{layer}.{s}");
        Self {
            ln1_gamma: p("ln1.gamma"),
            ln1_beta: p("ln1.beta"),
            wq: p("attn.wq"),
            bq: p("attn.bq"),
            wk: p("attn.wk"),
            bk: p("attn.bk"),
            wv: p("attn.wv"),
            bv: p("attn.bv"),
            wo: p("attn.wo"),
            bo: p("attn.bo"),
            ln2_gamma: p("ln2.gamma"),
            ln2_beta: p("ln2.beta"),
            w1: p("mlp.w1"),
            b1: p("mlp.b1"),
            w2: p("mlp.w2"),
            b2: p("mlp.b2"),
        }
    }
}

/// Weights of one multi-head self-attention layer, bound to graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Full (non-causal) scaled dot-product attention, heads concatenated then
/// projected.
pub fn multi_head_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var, NnError> {
    let (n, d) = g.value(x).dims2();
    if n == 0 {
        return Err(NnError::EmptySequence);
    }
    let dh = d / heads;
    let q = linear(g, x, w.wq, w.bq);
    let k = linear(g, x, w.wk, w.bk);
    let v = linear(g, x, w.wv, w.bv);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(linear(g, cat, w.wo, w.bo))
}

/// A stack of pre-norm Transformer blocks whose weights live in a
/// [`ParamStore`] under a common prefix.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub config: TransformerConfig,
    prefix: String,
    blocks: Vec<BlockNames>,
}

impl TransformerEncoder {
    pub fn new(prefix: &str, config: TransformerConfig) -> Result<Self, NnError> {
        config.validate()?;
        let blocks = (0..config.depth).map(|l| BlockNames::new(prefix, l)).collect();
        Ok(Self { config, prefix: prefix.to_string(), blocks })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Register all weights. Projection matrices are drawn from `N(0, std²)`;
    /// biases start at zero and layer-norm gains at one.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) {
        let d = self.config.width;
        let hidden = d * self.config.mlp_ratio;
        for b in &self.blocks {
            store.insert(&b.ln1_gamma, Tensor::filled(&[d], T::one()), trainable);
            store.insert(&b.ln1_beta, Tensor::zeros(&[d]), trainable);
            for (w, bias) in [(&b.wq, &b.bq), (&b.wk, &b.bk), (&b.wv, &b.bv), (&b.wo, &b.bo)] {
                store.insert(w, init_weight(d, d, std, rng), trainable);
                store.insert(bias, Tensor::zeros(&[d]), trainable);
            }
            store.insert(&b.ln2_gamma, Tensor::filled(&[d], T::one()), trainable);
            store.insert(&b.ln2_beta, Tensor::zeros(&[d]), trainable);
            store.insert(&b.w1, init_weight(d, hidden, std, rng), trainable);
            store.insert(&b.b1, Tensor::zeros(&[hidden]), trainable);
            store.insert(&b.w2, init_weight(hidden, d, std, rng), trainable);
            store.insert(&b.b2, Tensor::zeros(&[d]), trainable);
        }
    }

    /// Names of the attention and MLP output projections, per layer.
    pub fn output_projection_names(&self) -> Vec<(String, String, String, String)> {
        self.blocks
            .iter()
            .map(|b| (b.wo.clone(), b.bo.clone(), b.w2.clone(), b.b2.clone()))
            .collect()
    }

    /// `depth` repetitions of `x += MHSA(LN(x)); x += MLP(LN(x))`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, NnError> {
        let n = g.value(x).rows();
        if n == 0 {
            return Err(NnError::EmptySequence);
        }
        if n > self.config.max_seq_len {
            return Err(NnError::SequenceTooLong { len: n, max: self.config.max_seq_len });
        }
        let mut h = x;
        for b in &self.blocks {
            let p = |g: &mut Graph<T>, name: &str| g.param_from(store, name);
            let (g1, b1) = (p(g, &b.ln1_gamma), p(g, &b.ln1_beta));
            let normed = layer_norm(g, h, g1, b1);
            let attn = AttentionVars {
                wq: p(g, &b.wq),
                bq: p(g, &b.bq),
                wk: p(g, &b.wk),
                bk: p(g, &b.bk),
                wv: p(g, &b.wv),
                bv: p(g, &b.bv),
                wo: p(g, &b.wo),
                bo: p(g, &b.bo),
            };
            let a = multi_head_self_attention(g, normed, &attn, self.config.heads)?;
            h = g.add(h, a);

            let (g2, b2) = (p(g, &b.ln2_gamma), p(g, &b.ln2_beta));
            let normed = layer_norm(g, h, g2, b2);
            let (w1, bias1, w2, bias2) = (p(g, &b.w1), p(g, &b.b1), p(g, &b.w2), p(g, &b.b2));
            let hidden = linear(g, normed, w1, bias1);
            let act = g.gelu(hidden);
            let out = linear(g, act, w2, bias2);
            h = g.add(h, out);
        }
        Ok(h)
    }
}

/// Learnable frame-index and sampling-gap embeddings.
#[derive(Debug, Clone)]
pub struct TemporalPositionTable {
    pub max_frames: usize,
    pub width: usize,
    index_name: String,
    gap_name: String,
    gap_rows: BTreeMap<usize, usize>,
}

impl TemporalPositionTable {
    pub fn new(prefix: &str, max_frames: usize, width: usize, gaps: &[usize]) -> Self {
        let mut sorted = gaps.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let gap_rows = sorted.iter().enumerate().map(|(r, &gap)| (gap, r)).collect();
        Self {
            max_frames,
            width,
            index_name: format!("{prefix}.index_table"),
            gap_name: format!("{prefix}.gap_table"),
            gap_rows,
        }
    }

    pub fn gaps(&self) -> Vec<usize> {
        self.gap_rows.keys().copied().collect()
    }

    pub fn index_param(&self) -> &str {
        &self.index_name
    }

    pub fn gap_param(&self) -> &str {
        &self.gap_name
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) {
        store.insert(
            &self.index_name,
            Tensor::randn(&[self.max_frames, self.width], std, rng),
            trainable,
        );
        store.insert(
            &self.gap_name,
            Tensor::randn(&[self.gap_rows.len().max(1), self.width], std, rng),
            trainable,
        );
    }

    /// Row `t` is `index_table[frame_indices[t]] + gap_table[gap]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frame_indices: &[usize],
        gap: usize,
    ) -> Result<Var, NnError> {
        let &row = self.gap_rows.get(&gap).ok_or(NnError::UnknownGap(gap))?;
        if let Some(&bad) = frame_indices.iter().find(|&&i| i >= self.max_frames) {
            return Err(NnError::FrameIndexOutOfRange { index: bad, max: self.max_frames });
        }
        if frame_indices.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let idx = g.param_from(store, &self.index_name);
        let gaps = g.param_from(store, &self.gap_name);
        let a = g.gather_rows(idx, frame_indices);
        let b = g.gather_rows(gaps, &vec![row; frame_indices.len()]);
        Ok(g.add(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    fn cfg(depth: usize, width: usize, heads: usize) -> TransformerConfig {
        TransformerConfig { depth, width, heads, mlp_ratio: 2, max_seq_len: 8 }
    }

    fn ln_rows(data: &[f64], cols: usize) -> Tensor<f64> {
        let x = Tensor::from_f64_rows(data.len() / cols, cols, data);
        layer_norm_tensor(&x, &Tensor::filled(&[cols], 1.0), &Tensor::zeros(&[cols]))
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        assert!(ln_rows(&[5.0, 5.0, 5.0], 3).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_unit_row_is_unchanged_up_to_eps() {
        let y = ln_rows(&[1.0, -1.0], 2);
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert!((y.data()[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_scalar_arithmetic() {
        let y = ln_rows(&[1.0, 2.0, 3.0], 3);
        // mean 2, population variance 2/3
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        for (got, x) in y.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - (x - 2.0) / s).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 8, 2).validate().is_err());
        assert!(cfg(1, 9, 2).validate().is_err());
        assert!(cfg(1, 8, 2).validate().is_ok());
    }

    #[test]
    fn sequence_length_enforced() {
        let enc = TransformerEncoder::new("t", cfg(1, 4, 1)).unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 0.1, true, &mut derive(0, "t", 0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[9, 4]));
        assert_eq!(
            enc.forward(&mut g, &store, x).unwrap_err(),
            NnError::SequenceTooLong { len: 9, max: 8 }
        );
    }

    #[test]
    fn unknown_gap_is_named() {
        let table = TemporalPositionTable::new("pos", 4, 2, &[1, 2]);
        let mut store = ParamStore::<f64>::new();
        table.init(&mut store, 0.01, true, &mut derive(0, "p", 0));
        let mut g = Graph::new();
        let err = table.encode(&mut g, &store, &[0, 1], 7).unwrap_err();
        assert_eq!(err, NnError::UnknownGap(7));
        assert!(err.to_string().contains('7'));
    }
}
