//! Independent reference implementations used by the integration tests.
//! Everything here works on plain `Vec<f64>` rows and shares no code with
//! the library beyond reading parameter values.

#![allow(dead_code)]

use std::collections::BTreeMap;

use vidprompt::metrics::{Detection, GroundTruthInstance, VideoProposals};
use vidprompt::{ParamStore, Scalar, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| (0..c).map(|j| t.get(i, j).as_f64()).collect()).collect()
}

pub fn param_vec(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.tensor(name).data().to_vec()
}

pub fn param_mat(store: &ParamStore<f64>, name: &str) -> Mat {
    to_mat(store.tensor(name))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w).into_iter().map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / sd * gamma[i] + beta[i]).collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter().map(|r| layer_norm_row(r, gamma, beta)).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Multi-head self-attention computed head by head with explicit loops.
pub fn attention(x: &Mat, store: &ParamStore<f64>, layer: &str, heads: usize) -> Mat {
    let p = |s: &str| format!("{layer}.attn.{s}");
    let q = affine(x, &param_mat(store, &p("wq")), &param_vec(store, &p("bq")));
    let k = affine(x, &param_mat(store, &p("wk")), &param_vec(store, &p("bk")));
    let v = affine(x, &param_mat(store, &p("wv")), &param_vec(store, &p("bv")));
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in 0..dh {
                cat[i][h * dh + c] = (0..n).map(|j| a[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    affine(&cat, &param_mat(store, &p("wo")), &param_vec(store, &p("bo")))
}

/// Pre-norm Transformer stack read from `{prefix}.layer{l}.*`.
pub fn transformer(store: &ParamStore<f64>, prefix: &str, depth: usize, heads: usize, x: &Mat) -> Mat {
    let mut h = x.clone();
    for l in 0..depth {
        let layer = format!("{prefix}.layer{l}");
        let v = |s: &str| param_vec(store, &format!("{layer}.{s}"));
        let m = |s: &str| param_mat(store, &format!("{layer}.{s}"));
        let n1 = layer_norm(&h, &v("ln1.gamma"), &v("ln1.beta"));
        h = add(&h, &attention(&n1, store, &layer, heads));
        let n2 = layer_norm(&h, &v("ln2.gamma"), &v("ln2.beta"));
        let hidden: Mat = affine(&n2, &m("mlp.w1"), &v("mlp.b1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        h = add(&h, &affine(&hidden, &m("mlp.w2"), &v("mlp.b2")));
    }
    h
}

/// Text tower on `[start, prefix, content, suffix, end]`; returns the final
/// normalised end-position row.
pub fn text_encode(
    store: &ParamStore<f64>,
    depth: usize,
    heads: usize,
    content: &[usize],
    prompts: Option<(&str, &str)>,
    budget: usize,
) -> Vec<f64> {
    let table = param_mat(store, "text.token_embedding");
    let mut rows = vec![table[0].clone()];
    let k = prompts.map_or(0, |(p, _)| store.tensor(p).rows());
    if let Some((p, _)) = prompts {
        rows.extend(param_mat(store, p));
    }
    let keep = budget - 2 * k - 2;
    rows.extend(content.iter().take(keep).map(|&id| table[id].clone()));
    if let Some((_, s)) = prompts {
        rows.extend(param_mat(store, s));
    }
    rows.push(table[1].clone());
    let pos = param_mat(store, "text.positional");
    let x: Mat = rows.iter().enumerate().map(|(i, r)| r.iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let h = transformer(store, "text", depth, heads, &x);
    layer_norm_row(h.last().unwrap(), &param_vec(store, "text.ln_final.gamma"), &param_vec(store, "text.ln_final.beta"))
}

pub fn l2_normalize(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / n).collect()
}

/// Mean over rows of `−log softmax(S/τ)[target]`.
pub fn nce(sims: &Mat, targets: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (row, &t) in sims.iter().zip(targets) {
        let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[t];
    }
    total / sims.len() as f64
}

/// Hand-stepped AdamW on one scalar parameter.
pub fn adamw_scalar(theta0: f64, grads: &[f64], lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta = theta * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        out.push(theta);
    }
    out
}

// ---- metric oracles ----

/// Sort every row fully and look up the label's position.
pub fn top_k_oracle(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &label) in scores.iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order.iter().position(|&c| c == label).unwrap() < k {
            hits += 1;
        }
    }
    hits as f64 / scores.len() as f64
}

/// Ranks from a full sort with the true item placed after its ties;
/// recall at 1/5/10 and the lower median.
pub fn retrieval_oracle(sims: &[Vec<f64>]) -> (Vec<usize>, [f64; 3], usize) {
    let n = sims.len();
    let mut ranks = Vec::with_capacity(n);
    for (i, row) in sims.iter().enumerate() {
        let mut items: Vec<(f64, bool)> = row.iter().enumerate().map(|(j, &s)| (s, j == i)).collect();
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        ranks.push(items.iter().position(|x| x.1).unwrap() + 1);
    }
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let r = [recall(1), recall(5), recall(10)];
    let mut sorted = ranks.clone();
    sorted.sort();
    let median = sorted[(n - 1) / 2];
    (ranks, r, median)
}

pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

/// Linear Soft-NMS per (video, class): repeatedly take the highest score
/// (ties: earlier start, then input order), decay overlaps, drop scores
/// under 1e-3.
pub fn soft_nms_oracle(dets: &[Detection], thr: f64) -> Vec<(String, usize, f64, f64, f64)> {
    let mut groups: BTreeMap<(String, usize), Vec<(usize, f64, f64, f64)>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups
            .entry((d.video_id.clone(), d.class))
            .or_default()
            .push((i, d.proposal.start, d.proposal.end, d.confidence));
    }
    let mut out = Vec::new();
    for ((video, class), mut items) in groups {
        while !items.is_empty() {
            let mut best = 0;
            for j in 1..items.len() {
                let (a, b) = (items[j], items[best]);
                let better = a.3 > b.3 || (a.3 == b.3 && (a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)));
                if better {
                    best = j;
                }
            }
            let chosen = items.remove(best);
            for it in items.iter_mut() {
                let o = iou((chosen.1, chosen.2), (it.1, it.2));
                if o > thr {
                    it.3 *= 1.0 - o;
                }
            }
            items.retain(|it| it.3 >= 1e-3);
            out.push((video.clone(), class, chosen.1, chosen.2, chosen.3));
        }
    }
    out
}

/// AP as the mean, over ground-truth instances found, of the best precision
/// at that recall or beyond (missed instances contribute zero).
pub fn ap_oracle(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::new();
    let mut hits = 0;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    let mut total = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            total += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / num_gt as f64
}

/// Per class and threshold: detections ranked by confidence (stable), each
/// taking the unmatched same-video instance of highest IoU if that IoU
/// reaches the threshold. Returns mAP per threshold and their mean.
pub fn map_oracle(dets: &[Detection], gts: &[GroundTruthInstance], thresholds: &[f64]) -> (Vec<f64>, f64) {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    let mut maps = Vec::new();
    for &thr in thresholds {
        let mut aps = Vec::new();
        for &c in &classes {
            let cg: Vec<&GroundTruthInstance> = gts.iter().filter(|g| g.class == c).collect();
            let mut ranked: Vec<(usize, &Detection)> = dets.iter().filter(|d| d.class == c).enumerate().collect();
            ranked.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap().then(a.0.cmp(&b.0)));
            let mut used = vec![false; cg.len()];
            let mut tp = Vec::new();
            for (_, d) in ranked {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in cg.iter().enumerate() {
                    if used[j] || g.video_id != d.video_id {
                        continue;
                    }
                    let o = iou((d.proposal.start, d.proposal.end), (g.start, g.end));
                    if best.map_or(true, |(_, bo)| o > bo) {
                        best = Some((j, o));
                    }
                }
                let hit = matches!(best, Some((_, o)) if o >= thr);
                if hit {
                    used[best.unwrap().0] = true;
                }
                tp.push(hit);
            }
            aps.push(ap_oracle(&tp, cg.len()));
        }
        maps.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let avg = maps.iter().sum::<f64>() / maps.len() as f64;
    (maps, avg)
}

/// Recall of the first `an` proposals per video with one-to-one greedy
/// matching, averaged over the IoU grid.
pub fn ar_oracle(props: &[VideoProposals], gts: &[GroundTruthInstance], an: usize, grid: &[f64]) -> f64 {
    let mut sum = 0.0;
    for &thr in grid {
        let mut found = 0;
        for vp in props {
            let vg: Vec<(f64, f64)> = gts.iter().filter(|g| g.video_id == vp.video_id).map(|g| (g.start, g.end)).collect();
            let mut used = vec![false; vg.len()];
            for p in vp.proposals.iter().take(an) {
                let cand = (0..vg.len())
                    .filter(|&j| !used[j])
                    .map(|j| (j, iou((p.start, p.end), vg[j])))
                    .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    });
                if let Some((j, o)) = cand {
                    if o >= thr {
                        used[j] = true;
                        found += 1;
                    }
                }
            }
        }
        sum += found as f64 / gts.len() as f64;
    }
    sum / grid.len() as f64
}

// ---- random instances ----

pub mod gen {
    use rand::Rng;
    use vidprompt::metrics::{Detection, GroundTruthInstance, VideoProposals};
    use vidprompt::video::Proposal;

    /// Values on a coarse grid so ties are common.
    pub fn score<R: Rng>(rng: &mut R) -> f64 {
        rng.random_range(0..8) as f64 / 8.0
    }

    pub fn scores<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..cols).map(|_| score(rng)).collect()).collect()
    }

    pub fn interval<R: Rng>(rng: &mut R) -> (f64, f64) {
        let s = rng.random_range(0..20) as f64;
        (s, s + rng.random_range(1..8) as f64)
    }

    pub fn video<R: Rng>(rng: &mut R, videos: usize) -> String {
        format!("v{}", rng.random_range(0..videos))
    }

    pub fn detections<R: Rng>(rng: &mut R, n: usize, videos: usize, classes: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                let (s, e) = interval(rng);
                Detection {
                    video_id: video(rng, videos),
                    proposal: Proposal::new(s, e, 1.0),
                    class: rng.random_range(0..classes),
                    confidence: (rng.random_range(1..=16) as f64) / 16.0,
                }
            })
            .collect()
    }

    pub fn ground_truth<R: Rng>(rng: &mut R, n: usize, videos: usize, classes: usize) -> Vec<GroundTruthInstance> {
        (0..n)
            .map(|_| {
                let (start, end) = interval(rng);
                GroundTruthInstance { video_id: video(rng, videos), class: rng.random_range(0..classes), start, end }
            })
            .collect()
    }

    pub fn proposals<R: Rng>(rng: &mut R, videos: usize, per_video: usize) -> Vec<VideoProposals> {
        (0..videos)
            .map(|v| {
                let mut ps: Vec<Proposal> = (0..rng.random_range(0..=per_video))
                    .map(|_| {
                        let (s, e) = interval(rng);
                        Proposal::new(s, e, score(rng))
                    })
                    .collect();
                ps.sort_by(|a, b| b.score.total_cmp(&a.score));
                VideoProposals { video_id: format!("v{v}"), proposals: ps }
            })
            .collect()
    }
}
