//! Training objectives.
//!
//! Overt speech has frame-synchronous MFCC and phoneme targets, so it is
//! trained on `α·audio + CE + CTC`. Whispered and imagined speech have no
//! time-aligned target; their predictions are matched to the reference overt
//! MFCC by a phoneme-weighted DTW, giving `α·DTW + CTC`.
//!
//! Every function here takes one trial; batch averaging happens in the
//! trainer.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::phoneme::collapse;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to `P̂` before taking `-ln` in the DTW cost.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BlankPolicy {
    /// The silence class doubles as the CTC blank; labels drop silence.
    #[default]
    ReuseSil,
    /// A dedicated blank is appended after the phoneme classes.
    ExtraBlank,
}

impl BlankPolicy {
    /// Number of head outputs for `n_classes` phonemes.
    pub fn head_width(self, n_classes: usize) -> usize {
        match self {
            BlankPolicy::ReuseSil => n_classes,
            BlankPolicy::ExtraBlank => n_classes + 1,
        }
    }

    pub fn blank_index(self, n_classes: usize, sil: usize) -> usize {
        match self {
            BlankPolicy::ReuseSil => sil,
            BlankPolicy::ExtraBlank => n_classes,
        }
    }

    /// CTC label sequence for a per-frame phoneme track.
    pub fn labels(self, frame_labels: &[usize], sil: usize) -> Vec<usize> {
        let seq = collapse(frame_labels);
        match self {
            BlankPolicy::ReuseSil => seq.into_iter().filter(|&p| p != sil).collect(),
            BlankPolicy::ExtraBlank => seq,
        }
    }
}

impl fmt::Display for BlankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlankPolicy::ReuseSil => "reuse_sil",
            BlankPolicy::ExtraBlank => "extra_blank",
        })
    }
}

impl FromStr for BlankPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reuse_sil" => Ok(BlankPolicy::ReuseSil),
            "extra_blank" => Ok(BlankPolicy::ExtraBlank),
            other => Err(Error::invalid(format!("unknown CTC blank policy `{other}`"))),
        }
    }
}

/// Scaling of the CTC term inside the composite objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CtcReduction {
    /// `−log P(labels)` as is.
    Sum,
    /// `−log P(labels) / |labels|`.
    #[default]
    PerLabel,
}

impl fmt::Display for CtcReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CtcReduction::Sum => "sum",
            CtcReduction::PerLabel => "per_label",
        })
    }
}

impl FromStr for CtcReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CtcReduction::Sum),
            "per_label" => Ok(CtcReduction::PerLabel),
            other => Err(Error::invalid(format!("unknown CTC reduction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// The trainer replaces this with the model head's policy.
    pub blank_policy: BlankPolicy,
    pub ctc_reduction: CtcReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            blank_policy: BlankPolicy::ReuseSil,
            ctc_reduction: CtcReduction::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "loss weights must be positive (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Factor applied to the raw CTC value for a label sequence of length `n`.
    pub fn ctc_weight(&self, n: usize) -> f64 {
        match self.ctc_reduction {
            CtcReduction::Sum => 1.0,
            CtcReduction::PerLabel => 1.0 / n.max(1) as f64,
        }
    }
}

fn expect_2d<T: Scalar>(tape: &Tape<T>, v: Var, op: &'static str, cols: Option<usize>) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 || cols.is_some_and(|c| s[1] != c) {
        return Err(Error::shape(op, s, &[cols.unwrap_or(0)]));
    }
    Ok((s[0], s[1]))
}

/// Mean over frames of the per-frame Euclidean distance.
pub fn audio_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != target.shape() || target.ndim() != 2 {
        return Err(Error::shape("audio_loss", tape.shape(pred), target.shape()));
    }
    let y = tape.constant(target.clone());
    let d = tape.sub(pred, y)?;
    let norms = tape.row_norm(d)?;
    Ok(tape.mean(norms))
}

/// Mean over frames of `-log q[target]`.
pub fn phoneme_ce<T: Scalar>(tape: &mut Tape<T>, logprobs: Var, targets: &[usize]) -> Result<Var> {
    let (t, k) = expect_2d(tape, logprobs, "phoneme_ce", None)?;
    if targets.len() != t {
        return Err(Error::shape("phoneme_ce", &[t, k], &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("phoneme target {bad} outside {k} classes")));
    }
    let picked = tape.gather(logprobs, targets.iter().enumerate().map(|(i, &c)| i * k + c).collect())?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frame count for a CTC label sequence (one blank between repeats).
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-ln P(labels | logprobs)` and its gradient with respect to `logprobs`,
/// by the log-space forward-backward recursion. `logprobs` is `(T, K)`.
pub fn ctc_forward_backward(logprobs: &[f64], t_len: usize, k: usize, labels: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    if logprobs.len() != t_len * k || blank >= k {
        return Err(Error::shape("ctc", &[t_len, k], &[logprobs.len(), blank]));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= k || c == blank) {
        return Err(Error::invalid(format!("CTC label {bad} is the blank or out of range")));
    }
    let need = ctc_min_frames(labels);
    if t_len < need || t_len == 0 {
        return Err(Error::CtcInfeasible {
            labels: labels.len(),
            repeats: need - labels.len(),
            frames: t_len,
        });
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| logprobs[t * k + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, s);
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, s);
        }
    }
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("CTC total probability".into()));
    }
    // d(-ln P)/d logp[t,c] = -(posterior occupancy of class c at t).
    let mut grad = vec![0.0; t_len * k];
    for t in 0..t_len {
        let mut occ = vec![ninf; k];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, s);
            occ[ext[s]] = log_add(occ[ext[s]], v);
        }
        for (c, o) in occ.into_iter().enumerate() {
            if o > ninf {
                grad[t * k + c] = -(o - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `labels` under `(T, K)` log-probabilities.
pub fn ctc_loss<T: Scalar>(tape: &mut Tape<T>, logprobs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let (t, k) = expect_2d(tape, logprobs, "ctc_loss", None)?;
    let lp: Vec<f64> = tape.value(logprobs).data().iter().map(|v| v.to_f64_lossy()).collect();
    let (loss, grad) = ctc_forward_backward(&lp, t, k, labels, blank)?;
    tape.scalar_fn(logprobs, T::of(loss), grad.into_iter().map(T::of).collect())
}

/// Optimal monotone alignment through a cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    /// Sum of costs along the path.
    pub cost: f64,
    /// Cells from `(0, 0)` to `(rows-1, cols-1)`.
    pub path: Vec<(usize, usize)>,
}

/// Classic DTW over a row-major `rows × cols` cost matrix with steps
/// `(1,0)`, `(0,1)`, `(1,1)`. Ties prefer the diagonal.
pub fn dtw(cost: &[f64], rows: usize, cols: usize) -> Result<DtwPath> {
    if rows == 0 || cols == 0 || cost.len() != rows * cols {
        return Err(Error::shape("dtw", &[rows, cols], &[cost.len()]));
    }
    let mut acc = vec![f64::INFINITY; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * cols + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * cols + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * cols + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * cols + j] = best + cost[i * cols + j];
        }
    }
    let (mut i, mut j) = (rows - 1, cols - 1);
    let mut path = vec![(i, j)];
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * cols + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * cols + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * cols + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwPath {
        cost: acc[rows * cols - 1],
        path,
    })
}

/// Pairwise Euclidean distances between the rows of two `(·, D)` matrices.
pub fn euclidean_distances(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let (n, m) = (a.len() / dim, b.len() / dim);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = &a[i * dim..(i + 1) * dim];
        for j in 0..m {
            let bj = &b[j * dim..(j + 1) * dim];
            out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtwAlignment {
    /// `T_pred × T_gt` MFCC distances.
    pub dist: Vec<f64>,
    /// `dist + β·(−ln P̂)`.
    pub cost: Vec<f64>,
    pub path: DtwPath,
    /// GT frame matched to each prediction frame.
    pub align: Vec<usize>,
    pub t_pred: usize,
    pub t_gt: usize,
}

impl DtwAlignment {
    /// Computes costs and the optimal path from plain values.
    pub fn compute(
        pred_mfcc: &[f64],
        pred_logprobs: &[f64],
        n_classes: usize,
        gt_mfcc: &[f64],
        gt_labels: &[usize],
        dim: usize,
        beta: f64,
    ) -> Result<Self> {
        let t_pred = pred_mfcc.len() / dim;
        let t_gt = gt_mfcc.len() / dim;
        if t_pred == 0 || t_gt == 0 || gt_labels.len() != t_gt || pred_logprobs.len() != t_pred * n_classes {
            return Err(Error::shape("dtw_loss", &[t_pred, t_gt], &[gt_labels.len(), pred_logprobs.len()]));
        }
        let dist = euclidean_distances(pred_mfcc, gt_mfcc, dim);
        let floor = LOG_PROB_FLOOR.ln();
        let cost: Vec<f64> = dist
            .iter()
            .enumerate()
            .map(|(idx, &d)| {
                let (i, j) = (idx / t_gt, idx % t_gt);
                d + beta * -pred_logprobs[i * n_classes + gt_labels[j]].max(floor)
            })
            .collect();
        let path = dtw(&cost, t_pred, t_gt)?;
        let mut align = vec![usize::MAX; t_pred];
        for &(i, j) in &path.path {
            align[i] = align[i].min(j);
        }
        Ok(Self {
            dist,
            cost,
            path,
            align,
            t_pred,
            t_gt,
        })
    }

    /// `Σ_i C(i, align(i)) / T_pred` at the stored costs.
    pub fn loss(&self) -> f64 {
        self.align
            .iter()
            .enumerate()
            .map(|(i, &j)| self.cost[i * self.t_gt + j])
            .sum::<f64>()
            / self.t_pred as f64
    }
}

/// Phoneme-weighted DTW loss. The alignment is recomputed from current
/// values and then held fixed; gradients flow through the selected cells.
pub fn dtw_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred_mfcc: Var,
    pred_logprobs: Var,
    gt_mfcc: &Tensor<T>,
    gt_labels: &[usize],
    beta: f64,
) -> Result<(Var, DtwAlignment)> {
    let (t_pred, dim) = expect_2d(tape, pred_mfcc, "dtw_loss", None)?;
    let (t_lp, k) = expect_2d(tape, pred_logprobs, "dtw_loss", None)?;
    if t_lp != t_pred || gt_mfcc.ndim() != 2 || gt_mfcc.shape()[1] != dim {
        return Err(Error::shape("dtw_loss", tape.shape(pred_mfcc), gt_mfcc.shape()));
    }
    if let Some(&bad) = gt_labels.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("phoneme target {bad} outside {k} classes")));
    }
    let f = |v: &Tensor<T>| v.data().iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
    let alignment = DtwAlignment::compute(
        &f(tape.value(pred_mfcc)),
        &f(tape.value(pred_logprobs)),
        k,
        &f(gt_mfcc),
        gt_labels,
        dim,
        beta,
    )?;
    let mut matched = Vec::with_capacity(t_pred * dim);
    for &j in &alignment.align {
        matched.extend_from_slice(gt_mfcc.row(j));
    }
    let matched = tape.constant(Tensor::new(vec![t_pred, dim], matched)?);
    let diff = tape.sub(pred_mfcc, matched)?;
    let dists = tape.row_norm(diff)?;
    let mut total = tape.sum(dists);
    if beta != 0.0 {
        let idx = alignment
            .align
            .iter()
            .enumerate()
            .map(|(i, &j)| i * k + gt_labels[j])
            .collect();
        let lp = tape.gather(pred_logprobs, idx)?;
        let lp = tape.clamp_min(lp, T::of(LOG_PROB_FLOOR.ln()));
        let s = tape.sum(lp);
        let s = tape.scale(s, T::of(-beta));
        total = tape.add(total, s)?;
    }
    Ok((tape.scale(total, T::of(1.0 / t_pred as f64)), alignment))
}

/// Per-trial model outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TrialOutput {
    /// `(T, 80)`.
    pub mfcc: Var,
    /// `(T, K)` log-probabilities.
    pub logprobs: Var,
}

/// Reference targets for one trial.
#[derive(Clone, Debug)]
pub struct TrialTarget<T> {
    /// `(T_gt, 80)`.
    pub mfcc: Tensor<T>,
    pub frame_labels: Vec<usize>,
}

/// Loss value on the tape plus its components for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub total: Var,
    pub audio: f64,
    pub phoneme: f64,
    pub ctc: f64,
    pub dtw: f64,
}

fn value<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64_lossy()
}

/// `Σ w_i · v_i` on the tape.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = if w == 1.0 { v } else { tape.scale(v, T::of(w)) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("empty loss"))
}

/// Overt objective: `α·L_audio + L_phoneme + L_CTC`.
pub fn overt_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: TrialOutput,
    target: &TrialTarget<T>,
    cfg: &LossConfig,
    sil: usize,
) -> Result<LossValue> {
    let (_, k) = expect_2d(tape, out.logprobs, "overt_loss", None)?;
    let audio = audio_loss(tape, out.mfcc, &target.mfcc)?;
    let ce = phoneme_ce(tape, out.logprobs, &target.frame_labels)?;
    let labels = cfg.blank_policy.labels(&target.frame_labels, sil);
    let blank = cfg.blank_policy.blank_index(k - usize::from(cfg.blank_policy == BlankPolicy::ExtraBlank), sil);
    let ctc = ctc_loss(tape, out.logprobs, &labels, blank)?;
    let w = cfg.ctc_weight(labels.len());
    let total = weighted_sum(tape, &[(cfg.alpha, audio), (1.0, ce), (w, ctc)])?;
    Ok(LossValue {
        total,
        audio: value(tape, audio),
        phoneme: value(tape, ce),
        ctc: value(tape, ctc),
        dtw: 0.0,
    })
}

/// Whispered/imagined objective: `α·L_DTW + L_CTC`.
pub fn silent_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: TrialOutput,
    target: &TrialTarget<T>,
    cfg: &LossConfig,
    sil: usize,
) -> Result<LossValue> {
    let (_, k) = expect_2d(tape, out.logprobs, "silent_loss", None)?;
    let (dtw_v, _) = dtw_loss(tape, out.mfcc, out.logprobs, &target.mfcc, &target.frame_labels, cfg.beta)?;
    let labels = cfg.blank_policy.labels(&target.frame_labels, sil);
    let blank = cfg.blank_policy.blank_index(k - usize::from(cfg.blank_policy == BlankPolicy::ExtraBlank), sil);
    let ctc = ctc_loss(tape, out.logprobs, &labels, blank)?;
    let w = cfg.ctc_weight(labels.len());
    let total = weighted_sum(tape, &[(cfg.alpha, dtw_v), (w, ctc)])?;
    Ok(LossValue {
        total,
        audio: 0.0,
        phoneme: 0.0,
        ctc: value(tape, ctc),
        dtw: value(tape, dtw_v),
    })
}
