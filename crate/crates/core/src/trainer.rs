//! Batching, optimization and the training loop.
//!
//! Trials of different lengths are concatenated along time, zero-padded to a
//! multiple of `l` and folded into `⌈N_S / l⌉` rows. After the forward pass
//! the folding is undone at the model's 1/8 time resolution so each trial's
//! outputs can be scored against its own targets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{overt_loss, silent_loss, LossConfig, LossValue, TrialOutput, TrialTarget};
use crate::model::{bind, forward, ModelConfig, ParamStore};
use crate::scalar::Scalar;
use crate::signalproc::Epoch;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_SEQ_LEN: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialSpan {
    pub trial: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub l: usize,
    pub n_s: usize,
    pub c: usize,
    pub b: usize,
    pub pad_len: usize,
    pub trial_spans: Vec<TrialSpan>,
}

impl BatchLayout {
    /// Frame span of each trial at `1/factor` resolution.
    pub fn frame_spans(&self, factor: usize) -> Vec<(usize, usize)> {
        self.trial_spans
            .iter()
            .map(|s| (s.start / factor, s.end / factor))
            .collect()
    }
}

/// Concatenates trials along time and folds them into `(B, C, l)`.
///
/// Trials should already be a multiple of 8 samples long; [`unbatch`]
/// rejects layouts whose spans do not fall on frame boundaries.
pub fn make_batch<T: Scalar>(trials: &[&Epoch<T>], l: usize) -> Result<(Tensor<T>, BatchLayout)> {
    if trials.is_empty() {
        return Err(Error::invalid("make_batch needs at least one trial"));
    }
    if l == 0 || l % 8 != 0 {
        return Err(Error::invalid(format!("sequence length {l} is not a positive multiple of 8")));
    }
    let c = trials[0].n_channels();
    let mut spans = Vec::with_capacity(trials.len());
    let mut n_s = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.n_channels() != c {
            return Err(Error::invalid(format!(
                "trial {} has {} channels, expected {c}",
                t.sentence_id,
                t.n_channels()
            )));
        }
        let len = t.n_frames();
        spans.push(TrialSpan {
            trial: i,
            start: n_s,
            end: n_s + len,
        });
        n_s += len;
    }
    if n_s == 0 {
        return Err(Error::invalid("all trials are empty"));
    }
    let b = n_s.div_ceil(l);
    let pad_len = b * l - n_s;
    let mut data = vec![T::zero(); b * c * l];
    for (t, span) in trials.iter().zip(&spans) {
        let src = t.samples();
        for f in 0..span.end - span.start {
            let pos = span.start + f;
            let (row, col) = (pos / l, pos % l);
            for ch in 0..c {
                data[row * c * l + ch * l + col] = src[f * c + ch];
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, l], data)?,
        BatchLayout {
            l,
            n_s,
            c,
            b,
            pad_len,
            trial_spans: spans,
        },
    ))
}

fn check_unbatch_shape(shape: &[usize], layout: &BatchLayout) -> Result<usize> {
    if shape.len() != 3 || shape[0] != layout.b || shape[1] * 8 != layout.l {
        return Err(Error::shape("unbatch", shape, &[layout.b, layout.l / 8, 0]));
    }
    if let Some(s) = layout.trial_spans.iter().find(|s| s.start % 8 != 0 || s.end % 8 != 0) {
        return Err(Error::invalid(format!(
            "trial {} spans samples [{}, {}), not whole 8-sample frames",
            s.trial, s.start, s.end
        )));
    }
    Ok(shape[2])
}

/// Splits `(B, l/8, D)` outputs back into per-trial `(n_i/8, D)` tensors.
pub fn unbatch<T: Scalar>(outputs: &Tensor<T>, layout: &BatchLayout) -> Result<Vec<Tensor<T>>> {
    let d = check_unbatch_shape(outputs.shape(), layout)?;
    layout
        .frame_spans(8)
        .into_iter()
        .map(|(s, e)| Tensor::new(vec![e - s, d], outputs.data()[s * d..e * d].to_vec()))
        .collect()
}

/// Tape version of [`unbatch`].
pub fn unbatch_vars<T: Scalar>(tape: &mut Tape<T>, outputs: Var, layout: &BatchLayout) -> Result<Vec<Var>> {
    let d = check_unbatch_shape(tape.shape(outputs), layout)?;
    let flat = tape.reshape(outputs, &[layout.b * layout.l / 8, d])?;
    layout
        .frame_spans(8)
        .into_iter()
        .map(|(s, e)| tape.slice(flat, 0, s, e))
        .collect()
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at element {i}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.to_f64_lossy();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let decayed = w.to_f64_lossy() * (1.0 - lr * self.weight_decay);
                *w = T::of(decayed - lr * update);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr` at epoch 0 to `lr_min` at `t_max`.
pub fn cosine_lr(epoch: usize, lr: f64, lr_min: f64, t_max: usize) -> f64 {
    let e = epoch.min(t_max) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * e / t_max as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Mode {
    #[default]
    Overt,
    Whispered,
    Imagined,
}

impl Mode {
    /// Overt speech has synchronized audio; the others use the DTW path.
    pub fn is_silent(self) -> bool {
        self != Mode::Overt
    }

    pub fn loss_name(self) -> &'static str {
        if self.is_silent() {
            "silent: alpha*L_dtw + L_ctc"
        } else {
            "overt: alpha*L_audio + L_phoneme + L_ctc"
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Overt => "overt",
            Mode::Whispered => "whispered",
            Mode::Imagined => "imagined",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overt" => Ok(Mode::Overt),
            "whispered" => Ok(Mode::Whispered),
            "imagined" => Ok(Mode::Imagined),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Modality {
    Eeg,
    #[default]
    EegEmg,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Eeg => "eeg",
            Modality::EegEmg => "eeg+emg",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eeg" => Ok(Modality::Eeg),
            "eeg+emg" => Ok(Modality::EegEmg),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub t_max: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub mode: Mode,
    pub modality: Modality,
    pub seq_len: usize,
    /// Target rows per batch; trials are grouped until `N_S ≈ rows·l`.
    pub batch_rows: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 1e-5,
            t_max: 200,
            weight_decay: 1e-5,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
            mode: Mode::Overt,
            modality: Modality::EegEmg,
            seq_len: DEFAULT_SEQ_LEN,
            batch_rows: 4,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", "must be in (0, 1)");
        }
        if !(self.lr_min < self.lr && self.lr_min >= 0.0) {
            return bad("lr_min", "must be non-negative and below lr");
        }
        if self.t_max == 0 {
            return bad("t_max", "must be positive");
        }
        if self.seq_len == 0 || self.seq_len % 8 != 0 {
            return bad("seq_len", "must be a positive multiple of 8");
        }
        if self.batch_rows == 0 {
            return bad("batch_rows", "must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        self.loss.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr", self.lr);
        kv.set("lr_min", self.lr_min);
        kv.set("t_max", self.t_max);
        kv.set("weight_decay", self.weight_decay);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", self.patience);
        kv.set("val_fraction", self.val_fraction);
        kv.set("seed", self.seed);
        kv.set("mode", self.mode);
        kv.set("modality", self.modality);
        kv.set("seq_len", self.seq_len);
        kv.set("batch_rows", self.batch_rows);
        kv.set("alpha", self.loss.alpha);
        kv.set("beta", self.loss.beta);
        kv.set("ctc_reduction", self.loss.ctc_reduction);
        kv
    }

    pub fn update_from(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("lr", &mut self.lr)?;
        kv.take_into("lr_min", &mut self.lr_min)?;
        kv.take_into("t_max", &mut self.t_max)?;
        kv.take_into("weight_decay", &mut self.weight_decay)?;
        kv.take_into("max_epochs", &mut self.max_epochs)?;
        kv.take_into("patience", &mut self.patience)?;
        kv.take_into("val_fraction", &mut self.val_fraction)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("mode", &mut self.mode)?;
        kv.take_into("modality", &mut self.modality)?;
        kv.take_into("seq_len", &mut self.seq_len)?;
        kv.take_into("batch_rows", &mut self.batch_rows)?;
        kv.take_into("alpha", &mut self.loss.alpha)?;
        kv.take_into("beta", &mut self.loss.beta)?;
        kv.take_into("ctc_reduction", &mut self.loss.ctc_reduction)?;
        self.validate()
    }
}

/// One training example: input signal and reference targets.
#[derive(Clone, Debug)]
pub struct Trial<T> {
    pub signal: Epoch<T>,
    pub target: TrialTarget<T>,
}

impl<T: Scalar> Trial<T> {
    /// Truncates the signal to a multiple of 8 samples and, in overt mode,
    /// trims signal and target to a common frame count.
    pub fn prepared(&self, mode: Mode) -> Result<Self> {
        let mut signal = self.signal.truncate_to_multiple(8);
        let mut target = self.target.clone();
        let gt_frames = target.frame_labels.len();
        if target.mfcc.ndim() != 2 || target.mfcc.shape()[0] != gt_frames {
            return Err(Error::shape("trial target", target.mfcc.shape(), &[gt_frames]));
        }
        if !mode.is_silent() {
            let frames = (signal.n_frames() / 8).min(gt_frames);
            if signal.n_frames() / 8 > frames {
                let c = signal.n_channels();
                signal = Epoch::new(
                    signal.samples()[..frames * 8 * c].to_vec(),
                    signal.channel_roles.clone(),
                    signal.sentence_id.clone(),
                    signal.sample_rate_hz,
                    signal.baseline_window_ms,
                )?;
            }
            if gt_frames > frames {
                let d = target.mfcc.shape()[1];
                target.mfcc = Tensor::new(vec![frames, d], target.mfcc.data()[..frames * d].to_vec())?;
                target.frame_labels.truncate(frames);
            }
        }
        if signal.n_frames() < 8 {
            return Err(Error::invalid(format!("trial {} is shorter than one frame", signal.sentence_id)));
        }
        Ok(Self { signal, target })
    }
}

/// Per-trial predictions as plain tensors.
#[derive(Clone, Debug)]
pub struct TrialPrediction<T> {
    pub mfcc: Tensor<T>,
    pub logprobs: Tensor<T>,
}

/// Groups trial indices so that each group's total length is about
/// `rows · l` samples.
pub fn group_batches<T: Scalar>(trials: &[Trial<T>], order: &[usize], rows: usize, l: usize) -> Vec<Vec<usize>> {
    let budget = rows * l;
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let mut len = 0;
    for &i in order {
        let n = trials[i].signal.n_frames();
        if !cur.is_empty() && len + n > budget {
            out.push(std::mem::take(&mut cur));
            len = 0;
        }
        cur.push(i);
        len += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

struct BatchPass {
    loss: Var,
    mean_parts: LossValue,
}

fn run_batch<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamStore<T>,
    trials: &[&Trial<T>],
    train: bool,
    seed: u64,
    sil: usize,
) -> Result<(BatchPass, BTreeMap<String, Var>)> {
    let pv = bind(tape, params);
    let signals: Vec<&Epoch<T>> = trials.iter().map(|t| &t.signal).collect();
    let (x, layout) = make_batch(&signals, cfg.seq_len)?;
    let x = tape.constant(x);
    let out = forward(model, tape, &pv, x, train, seed)?;
    let mfcc = unbatch_vars(tape, out.mfcc, &layout)?;
    let lps = unbatch_vars(tape, out.logprobs, &layout)?;
    let mut totals = Vec::with_capacity(trials.len());
    let mut parts = LossValue {
        total: out.mfcc,
        audio: 0.0,
        phoneme: 0.0,
        ctc: 0.0,
        dtw: 0.0,
    };
    // The head layout decides the blank.
    let loss_cfg = LossConfig {
        blank_policy: model.blank_policy,
        ..cfg.loss
    };
    for ((t, &m), &lp) in trials.iter().zip(&mfcc).zip(&lps) {
        let o = TrialOutput { mfcc: m, logprobs: lp };
        let v = if cfg.mode.is_silent() {
            silent_loss(tape, o, &t.target, &loss_cfg, sil)?
        } else {
            overt_loss(tape, o, &t.target, &loss_cfg, sil)?
        };
        totals.push(v.total);
        parts.audio += v.audio;
        parts.phoneme += v.phoneme;
        parts.ctc += v.ctc;
        parts.dtw += v.dtw;
    }
    let n = trials.len() as f64;
    let flat = totals
        .iter()
        .map(|&v| tape.reshape(v, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let concat = tape.concat(&flat, 0)?;
    let loss = tape.mean(concat);
    parts.total = loss;
    parts.audio /= n;
    parts.phoneme /= n;
    parts.ctc /= n;
    parts.dtw /= n;
    Ok((
        BatchPass {
            loss,
            mean_parts: parts,
        },
        pv,
    ))
}

/// Runs the model in evaluation mode and returns per-trial predictions.
pub fn predict<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamStore<T>,
    trials: &[Trial<T>],
) -> Result<Vec<TrialPrediction<T>>> {
    let order: Vec<usize> = (0..trials.len()).collect();
    let mut out = Vec::with_capacity(trials.len());
    for group in group_batches(trials, &order, cfg.batch_rows, cfg.seq_len) {
        let mut tape = Tape::new();
        let pv = bind(&mut tape, params);
        let signals: Vec<&Epoch<T>> = group.iter().map(|&i| &trials[i].signal).collect();
        let (x, layout) = make_batch(&signals, cfg.seq_len)?;
        let x = tape.constant(x);
        let o = forward(model, &mut tape, &pv, x, false, 0)?;
        let mfcc = unbatch(tape.value(o.mfcc), &layout)?;
        let lps = unbatch(tape.value(o.logprobs), &layout)?;
        out.extend(mfcc.into_iter().zip(lps).map(|(mfcc, logprobs)| TrialPrediction { mfcc, logprobs }));
    }
    Ok(out)
}

/// Mean loss over `trials` in evaluation mode.
pub fn evaluate_loss<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamStore<T>,
    trials: &[Trial<T>],
    sil: usize,
) -> Result<LossSummary> {
    let order: Vec<usize> = (0..trials.len()).collect();
    let mut sum = LossSummary::default();
    for group in group_batches(trials, &order, cfg.batch_rows, cfg.seq_len) {
        let refs: Vec<&Trial<T>> = group.iter().map(|&i| &trials[i]).collect();
        let mut tape = Tape::new();
        let (pass, _) = run_batch(&mut tape, model, cfg, params, &refs, false, 0, sil)?;
        sum.accumulate(&tape, &pass, refs.len());
    }
    Ok(sum.finish(trials.len()))
}

/// Loss and its components averaged over trials.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub total: f64,
    pub audio: f64,
    pub phoneme: f64,
    pub ctc: f64,
    pub dtw: f64,
}

impl LossSummary {
    fn accumulate<T: Scalar>(&mut self, tape: &Tape<T>, pass: &BatchPass, n: usize) {
        let w = n as f64;
        self.total += tape.value(pass.loss).item().to_f64_lossy() * w;
        self.audio += pass.mean_parts.audio * w;
        self.phoneme += pass.mean_parts.phoneme * w;
        self.ctc += pass.mean_parts.ctc * w;
        self.dtw += pass.mean_parts.dtw * w;
    }

    fn finish(self, n: usize) -> Self {
        let d = n.max(1) as f64;
        Self {
            total: self.total / d,
            audio: self.audio / d,
            phoneme: self.phoneme / d,
            ctc: self.ctc / d,
            dtw: self.dtw / d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Returns whether `value` is a new best, and whether to stop.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, StopDecision) {
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        let stop = if self.patience > 0 && self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, stop)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossSummary,
    pub val: LossSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FitStatus {
    MaxEpochs,
    EarlyStopped,
    /// Non-finite loss or gradient; the best checkpoint so far is returned.
    Aborted(String),
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub best_params: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub log: Vec<LogRow>,
    pub status: FitStatus,
    pub loss_name: &'static str,
}

/// Columns `epoch,split,loss,lr`; wall time stays in memory only.
pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut s = String::from("epoch,split,loss,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.lr));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Splits trial indices into (train, validation) by a seeded shuffle.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 trials to hold out validation, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    Ok((train, val))
}

/// Trains from `init` with early stopping on held-out trials.
///
/// `on_epoch` sees the parameters after each epoch.
pub fn fit<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    init: ParamStore<T>,
    trials: &[Trial<T>],
    sil: usize,
    mut on_epoch: impl FnMut(&EpochStats, &ParamStore<T>),
) -> Result<FitResult<T>> {
    cfg.validate()?;
    model.validate()?;
    if trials.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let prepared = trials
        .iter()
        .map(|t| t.prepared(cfg.mode))
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, val_idx) = validation_split(prepared.len(), cfg.val_fraction, cfg.seed)?;
    let val: Vec<Trial<T>> = val_idx.iter().map(|&i| prepared[i].clone()).collect();

    let start = Instant::now();
    let mut params = init;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let mut epochs = Vec::new();
    let mut log = Vec::new();
    let mut status = FitStatus::MaxEpochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr = cosine_lr(epoch - 1, cfg.lr, cfg.lr_min, cfg.t_max);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut train_sum = LossSummary::default();
        for (bi, group) in group_batches(&prepared, &order, cfg.batch_rows, cfg.seq_len).into_iter().enumerate() {
            let refs: Vec<&Trial<T>> = group.iter().map(|&i| &prepared[i]).collect();
            let mut tape = Tape::new();
            let dropout_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((epoch * 10_007 + bi) as u64);
            let (pass, pv) = run_batch(&mut tape, model, cfg, &params, &refs, true, dropout_seed, sil)?;
            let loss_value = tape.value(pass.loss).item().to_f64_lossy();
            if !loss_value.is_finite() {
                status = FitStatus::Aborted(format!("non-finite training loss at epoch {epoch}"));
                break 'epochs;
            }
            train_sum.accumulate(&tape, &pass, refs.len());
            let grads = tape.backward(pass.loss)?;
            let grads: BTreeMap<String, Tensor<T>> = pv.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect();
            if let Err(e) = opt.step(&mut params, &grads, lr) {
                status = FitStatus::Aborted(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
        }
        let train_loss = train_sum.finish(train_idx.len());
        log.push(LogRow {
            epoch,
            split: "train",
            loss: train_loss.total,
            lr,
            wall_ms: start.elapsed().as_millis(),
        });
        let val_loss = evaluate_loss(model, cfg, &params, &val, sil)?;
        log.push(LogRow {
            epoch,
            split: "val",
            loss: val_loss.total,
            lr,
            wall_ms: start.elapsed().as_millis(),
        });
        if !val_loss.total.is_finite() {
            status = FitStatus::Aborted(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        let stats = EpochStats {
            epoch,
            lr,
            train: train_loss,
            val: val_loss,
        };
        on_epoch(&stats, &params);
        epochs.push(stats);
        let (improved, decision) = stopper.update(epoch, val_loss.total);
        if improved {
            best_params = params.clone();
        }
        if decision == StopDecision::Stop {
            status = FitStatus::EarlyStopped;
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().unwrap_or((0, f64::INFINITY));
    Ok(FitResult {
        best_params,
        best_epoch,
        best_val_loss,
        epochs,
        log,
        status,
        loss_name: cfg.mode.loss_name(),
    })
}
