//! Evaluation metrics and report files.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::LoadedTrial;
use crate::error::{Error, Result};
use crate::losses::{dtw, euclidean_distances, DtwPath};
use crate::model::{ModelConfig, ParamStore};
use crate::phoneme::{collapse, PhonemeGroup, PhonemeInventory};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{predict, TrainConfig, TrialPrediction};

/// `10 / ln 10`, the dB factor of mel-cepstral distortion.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Percentage of frames where the labels agree.
pub fn phoneme_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape("phoneme_accuracy", &[pred.len()], &[gt.len()]));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Per-frame argmax over the first `n_classes` columns of `(T, K)` scores.
pub fn argmax_frames<T: Scalar>(scores: &Tensor<T>, n_classes: usize) -> Vec<usize> {
    let k = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            (0..n_classes.min(k))
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect()
}

fn to_f64<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    x.data().iter().map(|v| v.to_f64_lossy()).collect()
}

fn frames_and_dim<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        [t, d] if *t > 0 && *d > 0 => Ok((*t, *d)),
        s => Err(Error::shape("frame matrix (T, D)", s, &[])),
    }
}

/// β = 0 DTW path between two MFCC sequences.
pub fn mfcc_dtw<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<DtwPath> {
    let (tp, d) = frames_and_dim(pred)?;
    let (tg, dg) = frames_and_dim(gt)?;
    if d != dg {
        return Err(Error::shape("mfcc_dtw", pred.shape(), gt.shape()));
    }
    dtw(&euclidean_distances(&to_f64(pred), &to_f64(gt), d), tp, tg)
}

/// GT frame assigned to each predicted frame along the β = 0 path.
pub fn dtw_frame_map<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<usize>> {
    let path = mfcc_dtw(pred, gt)?;
    let mut map = vec![usize::MAX; pred.shape()[0]];
    for &(i, j) in &path.path {
        map[i] = map[i].min(j);
    }
    Ok(map)
}

/// RMSE over all coefficients of all aligned frame pairs.
pub fn rmse_after_dtw<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let path = mfcc_dtw(pred, gt)?;
    let d = pred.shape()[1];
    let (p, g) = (to_f64(pred), to_f64(gt));
    let sq: f64 = path
        .path
        .iter()
        .map(|&(i, j)| (0..d).map(|k| (p[i * d + k] - g[j * d + k]).powi(2)).sum::<f64>())
        .sum();
    Ok((sq / (path.path.len() * d) as f64).sqrt())
}

/// Mel-cepstral distortion of one frame pair, excluding coefficient 0.
pub fn mcd_frame(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).skip(1).map(|(x, y)| (x - y) * (x - y)).sum();
    MCD_SCALE * (2.0 * s).sqrt()
}

/// Mean MCD over the β = 0 DTW path.
pub fn mcd<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let path = mfcc_dtw(pred, gt)?;
    let d = pred.shape()[1];
    let (p, g) = (to_f64(pred), to_f64(gt));
    let total: f64 = path
        .path
        .iter()
        .map(|&(i, j)| mcd_frame(&p[i * d..(i + 1) * d], &g[j * d..(j + 1) * d]))
        .sum();
    Ok(total / path.path.len() as f64)
}

/// Unweighted mean of per-class F1, skipping classes absent from both.
pub fn macro_f1(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape("macro_f1", &[pred.len()], &[gt.len()]));
    }
    let (mut tp, mut fp, mut fnn) = (vec![0usize; n_classes], vec![0usize; n_classes], vec![0usize; n_classes]);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::invalid(format!("label outside {n_classes} classes")));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let scores: Vec<f64> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fnn[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fnn[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Unit-cost edit distance.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(pred, gt) / len(gt)`.
pub fn error_rate<S: PartialEq>(pred: &[S], gt: &[S]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::invalid("error rate of an empty reference"));
    }
    Ok(levenshtein(pred, gt) as f64 / gt.len() as f64)
}

/// Lowercase, drop punctuation, collapse whitespace runs.
pub fn normalize_text(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Character error rate after [`normalize_text`].
pub fn character_error_rate(pred: &str, gt: &str) -> Result<f64> {
    let p: Vec<char> = normalize_text(pred).chars().collect();
    let g: Vec<char> = normalize_text(gt).chars().collect();
    error_rate(&p, &g)
}

/// Phoneme error rate on collapsed frame tracks with silence removed.
pub fn phoneme_error_rate(pred_frames: &[usize], gt_frames: &[usize], sil: usize) -> Result<f64> {
    let strip = |f: &[usize]| collapse(f).into_iter().filter(|&p| p != sil).collect::<Vec<_>>();
    error_rate(&strip(pred_frames), &strip(gt_frames))
}

/// GT-by-prediction frame counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_frames(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<Self> {
        let mut m = Self::new(n_classes);
        m.add(pred, gt)?;
        Ok(m)
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion_matrix", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= self.n_classes || g >= self.n_classes {
                return Err(Error::invalid(format!("label outside {} classes", self.n_classes)));
            }
            self.counts[g * self.n_classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.n_classes..(gt + 1) * self.n_classes].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.n_classes).map(|c| self.get(c, c)).sum();
        100.0 * trace as f64 / self.total().max(1) as f64
    }

    /// Share of frames whose prediction falls in the GT phoneme's group.
    pub fn within_group_fraction(&self, inventory: &PhonemeInventory) -> f64 {
        let mut within = 0;
        for g in 0..self.n_classes {
            for p in 0..self.n_classes {
                if inventory.group_of(g) == inventory.group_of(p) {
                    within += self.get(g, p);
                }
            }
        }
        within as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self, inventory: &PhonemeInventory) -> String {
        let mut s = String::from("gt\\pred");
        for c in 0..self.n_classes {
            s.push(',');
            s.push_str(inventory.symbol(c));
        }
        s.push('\n');
        for g in 0..self.n_classes {
            s.push_str(inventory.symbol(g));
            for p in 0..self.n_classes {
                let _ = write!(s, ",{}", self.get(g, p));
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalized heat map with group blocks outlined, rows and columns
    /// ordered group by group.
    pub fn to_svg(&self, inventory: &PhonemeInventory) -> String {
        let order: Vec<usize> = PhonemeGroup::ALL
            .iter()
            .flat_map(|&g| inventory.members(g))
            .filter(|&c| c < self.n_classes)
            .collect();
        let cell = 14.0;
        let margin = 40.0;
        let size = margin + cell * order.len() as f64 + 10.0;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"monospace\" font-size=\"8\">\n"
        );
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        for (r, &g) in order.iter().enumerate() {
            let row = self.row_sum(g).max(1) as f64;
            let y = margin + r as f64 * cell;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                margin - 3.0,
                y + cell * 0.7,
                inventory.symbol(g)
            );
            for (c, &p) in order.iter().enumerate() {
                let v = self.get(g, p) as f64 / row;
                let shade = (255.0 * (1.0 - v)).round() as u8;
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>",
                    margin + c as f64 * cell
                );
            }
        }
        for (c, &p) in order.iter().enumerate() {
            let x = margin + c as f64 * cell + cell * 0.7;
            let _ = writeln!(
                s,
                "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-90 {x} {})\">{}</text>",
                margin - 3.0,
                margin - 3.0,
                inventory.symbol(p)
            );
        }
        let mut start = 0;
        for g in PhonemeGroup::ALL {
            let n = inventory.members(g).iter().filter(|&&c| c < self.n_classes).count();
            if n == 0 {
                continue;
            }
            let o = margin + start as f64 * cell;
            let w = n as f64 * cell;
            let _ = writeln!(
                s,
                "<rect x=\"{o}\" y=\"{o}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"red\" stroke-width=\"1.5\"><title>{g}</title></rect>"
            );
            start += n;
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Mean feature vector per class; `None` for classes without frames.
pub fn phoneme_mean_features(features: &[f64], dim: usize, labels: &[usize], n_classes: usize) -> Result<Vec<Option<Vec<f64>>>> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(Error::shape("phoneme_mean_features", &[features.len()], &[labels.len(), dim]));
    }
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in features.chunks(dim).zip(labels) {
        if l >= n_classes {
            return Err(Error::invalid(format!("label {l} outside {n_classes} classes")));
        }
        counts[l] += 1;
        sums[l].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

pub fn mean_features_csv(means: &[Option<Vec<f64>>], inventory: &PhonemeInventory) -> String {
    let dim = means.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let mut s = String::from("phoneme,present");
    for d in 0..dim {
        let _ = write!(s, ",f{d}");
    }
    s.push('\n');
    for (c, m) in means.iter().enumerate() {
        s.push_str(inventory.symbol(c));
        match m {
            Some(v) => {
                s.push_str(",1");
                for x in v {
                    let _ = write!(s, ",{x}");
                }
            }
            None => {
                s.push_str(",0");
                for _ in 0..dim {
                    s.push(',');
                }
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceMetrics {
    pub sentence_id: String,
    pub phoneme_accuracy: f64,
    pub rmse: f64,
    pub mcd: f64,
    pub f1: f64,
    /// Phoneme error rate on collapsed sequences.
    pub error_rate: f64,
}

/// Scores one trial. When lengths differ (silent modes) predicted frames
/// are mapped to GT frames along the β = 0 MFCC DTW path.
pub fn score_sentence<T: Scalar>(
    sentence_id: &str,
    pred_mfcc: &Tensor<T>,
    pred_labels: &[usize],
    gt_mfcc: &Tensor<T>,
    gt_labels: &[usize],
    inventory: &PhonemeInventory,
    confusion: &mut ConfusionMatrix,
) -> Result<SentenceMetrics> {
    let mapped: Vec<usize> = if pred_labels.len() == gt_labels.len() {
        gt_labels.to_vec()
    } else {
        dtw_frame_map(pred_mfcc, gt_mfcc)?.into_iter().map(|j| gt_labels[j]).collect()
    };
    confusion.add(pred_labels, &mapped)?;
    Ok(SentenceMetrics {
        sentence_id: sentence_id.to_string(),
        phoneme_accuracy: phoneme_accuracy(pred_labels, &mapped)?,
        rmse: rmse_after_dtw(pred_mfcc, gt_mfcc)?,
        mcd: mcd(pred_mfcc, gt_mfcc)?,
        f1: macro_f1(pred_labels, &mapped, inventory.len())?,
        error_rate: phoneme_error_rate(pred_labels, gt_labels, inventory.sil()).unwrap_or(0.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_sentence: Vec<SentenceMetrics>,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn aggregate(&self) -> SentenceMetrics {
        let n = self.per_sentence.len().max(1) as f64;
        let mean = |f: fn(&SentenceMetrics) -> f64| self.per_sentence.iter().map(f).sum::<f64>() / n;
        SentenceMetrics {
            sentence_id: "mean".into(),
            phoneme_accuracy: mean(|m| m.phoneme_accuracy),
            rmse: mean(|m| m.rmse),
            mcd: mean(|m| m.mcd),
            f1: mean(|m| m.f1),
            error_rate: mean(|m| m.error_rate),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sentence_id,phoneme_accuracy,rmse,mcd,f1,error_rate\n");
        for m in self.per_sentence.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.sentence_id, m.phoneme_accuracy, m.rmse, m.mcd, m.f1, m.error_rate
            );
        }
        s
    }

    /// Writes `<base>.csv`, `<base>_confusion.csv` and `<base>_confusion.svg`.
    pub fn write(&self, dir: &Path, base: &str, inventory: &PhonemeInventory) -> Result<()> {
        let put = |name: String, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put(format!("{base}.csv"), self.to_csv())?;
        put(format!("{base}_confusion.csv"), self.confusion.to_csv(inventory))?;
        put(format!("{base}_confusion.svg"), self.confusion.to_svg(inventory))
    }
}

/// Scores predictions against their trials; labels are argmax over the
/// first `inventory.len()` head columns.
pub fn report_from_predictions<T: Scalar>(
    trials: &[LoadedTrial<T>],
    preds: &[TrialPrediction<T>],
    inventory: &PhonemeInventory,
) -> Result<MetricReport> {
    if trials.len() != preds.len() {
        return Err(Error::shape("report_from_predictions", &[trials.len()], &[preds.len()]));
    }
    let mut confusion = ConfusionMatrix::new(inventory.len());
    let per_sentence = trials
        .iter()
        .zip(preds)
        .map(|(t, p)| {
            let labels = argmax_frames(&p.logprobs, inventory.len());
            score_sentence(
                &t.sentence_id,
                &p.mfcc,
                &labels,
                &t.trial.target.mfcc,
                &t.trial.target.frame_labels,
                inventory,
                &mut confusion,
            )
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport { per_sentence, confusion })
}

/// Runs the model on `trials` (prepared for `cfg.mode`) and scores it.
pub fn evaluate_trials<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamStore<T>,
    trials: &[LoadedTrial<T>],
    inventory: &PhonemeInventory,
) -> Result<MetricReport> {
    let prepared: Vec<LoadedTrial<T>> = trials
        .iter()
        .map(|t| {
            Ok(LoadedTrial {
                trial: t.trial.prepared(cfg.mode)?,
                ..t.clone()
            })
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<_> = prepared.iter().map(|t| t.trial.clone()).collect();
    let preds = predict(model, cfg, params, &inputs)?;
    report_from_predictions(&prepared, &preds, inventory)
}
