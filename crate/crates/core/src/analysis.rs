//! Sentence-property correlations, paired significance tests and the
//! frequency-band ablation harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{load_trials, split_by_sentence, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_trials, SentenceMetrics};
use crate::model::{init_parameters, ModelConfig};
use crate::phoneme::PhonemeInventory;
use crate::scalar::Scalar;
use crate::signalproc::{Band, PreprocessConfig};
use crate::trainer::{fit, Modality, Mode, TrainConfig, Trial};

/// Largest sample size that gets an exact Wilcoxon p-value.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Per-phoneme relative frequencies over a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct WScores {
    pub with_sil: Vec<f64>,
    /// Silence excluded from counts and total; its entry is 0.
    pub without_sil: Vec<f64>,
}

pub fn w_scores(corpus: &[Vec<usize>], n_classes: usize, sil: usize) -> Result<WScores> {
    let mut counts = vec![0usize; n_classes];
    for &p in corpus.iter().flatten() {
        *counts
            .get_mut(p)
            .ok_or_else(|| Error::invalid(format!("phoneme {p} outside {n_classes} classes")))? += 1;
    }
    let total: usize = counts.iter().sum();
    let total_ns = total - counts[sil];
    if total_ns == 0 {
        return Err(Error::invalid("W scores need at least one non-silence token"));
    }
    let with_sil = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let without_sil = counts
        .iter()
        .enumerate()
        .map(|(p, &c)| if p == sil { 0.0 } else { c as f64 / total_ns as f64 })
        .collect();
    Ok(WScores { with_sil, without_sil })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceProperties {
    pub sentence_id: String,
    /// Token count including silences.
    pub phoneme_seq_len: usize,
    pub w_score_with_sil: f64,
    pub w_score_without_sil: f64,
}

/// Sentence W score is the mean corpus frequency of its tokens.
pub fn sentence_properties(sentence_id: &str, tokens: &[usize], w: &WScores, sil: usize) -> Result<SentenceProperties> {
    let speech: Vec<usize> = tokens.iter().copied().filter(|&p| p != sil).collect();
    if speech.is_empty() {
        return Err(Error::invalid(format!("{sentence_id}: no non-silence tokens")));
    }
    let mean = |table: &[f64], toks: &[usize]| toks.iter().map(|&p| table[p]).sum::<f64>() / toks.len() as f64;
    Ok(SentenceProperties {
        sentence_id: sentence_id.to_string(),
        phoneme_seq_len: tokens.len(),
        w_score_with_sil: mean(&w.with_sil, tokens),
        w_score_without_sil: mean(&w.without_sil, &speech),
    })
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(format!("pearson needs two equal samples of n >= 2, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks of `|d|`, ties sharing the mean rank.
fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..diffs.len()).collect();
    idx.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && diffs[idx[j + 1]].abs() == diffs[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test on `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon_signed_rank", &[a.len()], &[b.len()]));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::invalid("all paired differences are zero"));
    }
    if diffs.len() < 5 {
        return Err(Error::invalid(format!("{} nonzero differences; need at least 5", diffs.len())));
    }
    let n = diffs.len();
    let ranks = signed_ranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);
    let (p, exact) = if n <= WILCOXON_EXACT_MAX_N {
        // Ranks are multiples of 1/2; count sign patterns by doubled rank sum.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let limit = (2.0 * statistic).round() as usize;
        let tail: f64 = counts[..=limit].iter().sum();
        ((2.0 * tail / 2f64.powi(n as i32)).min(1.0), true)
    } else {
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        for g in sorted.chunk_by(|x, y| x == y) {
            let t = g.len() as f64;
            tie_term += t * t * t - t;
        }
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (statistic - mean + 0.5).min(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        ((2.0 * normal.cdf(z)).min(1.0), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value: p,
        exact,
    })
}

/// Accuracy against sentence length and both W-score variants.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyReport {
    pub rows: Vec<(SentenceProperties, f64)>,
    pub pcc_length: f64,
    pub pcc_w_with_sil: f64,
    pub pcc_w_without_sil: f64,
}

pub fn property_correlation_report(props: &[SentenceProperties], accuracies: &[f64]) -> Result<PropertyReport> {
    if props.len() != accuracies.len() {
        return Err(Error::shape("property_correlation_report", &[props.len()], &[accuracies.len()]));
    }
    let col = |f: fn(&SentenceProperties) -> f64| props.iter().map(f).collect::<Vec<_>>();
    Ok(PropertyReport {
        pcc_length: pearson(&col(|p| p.phoneme_seq_len as f64), accuracies)?,
        pcc_w_with_sil: pearson(&col(|p| p.w_score_with_sil), accuracies)?,
        pcc_w_without_sil: pearson(&col(|p| p.w_score_without_sil), accuracies)?,
        rows: props.iter().cloned().zip(accuracies.iter().copied()).collect(),
    })
}

impl PropertyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sentence_id,phoneme_seq_len,w_score_with_sil,w_score_without_sil,phoneme_accuracy\n");
        for (p, acc) in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.sentence_id, p.phoneme_seq_len, p.w_score_with_sil, p.w_score_without_sil, acc
            );
        }
        let _ = writeln!(
            s,
            "# pcc_length {} pcc_w_with_sil {} pcc_w_without_sil {}",
            self.pcc_length, self.pcc_w_with_sil, self.pcc_w_without_sil
        );
        s
    }

    /// Three scatter panels with PCC in each title.
    pub fn to_svg(&self) -> String {
        let panels: [(&str, f64, fn(&SentenceProperties) -> f64); 3] = [
            ("sequence length", self.pcc_length, |p| p.phoneme_seq_len as f64),
            ("W score (with sil)", self.pcc_w_with_sil, |p| p.w_score_with_sil),
            ("W score (without sil)", self.pcc_w_without_sil, |p| p.w_score_without_sil),
        ];
        let (w, h, pad) = (260.0, 220.0, 40.0);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"10\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            3.0 * w
        );
        let ys: Vec<f64> = self.rows.iter().map(|r| r.1).collect();
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi } else { lo + 1.0 })
        };
        let (ylo, yhi) = span(&ys);
        for (k, (label, pcc, get)) in panels.iter().enumerate() {
            let ox = k as f64 * w;
            let xs: Vec<f64> = self.rows.iter().map(|r| get(&r.0)).collect();
            let (xlo, xhi) = span(&xs);
            let (pw, ph) = (w - 2.0 * pad, h - 2.0 * pad);
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{pad}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>",
                ox + pad
            );
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">PCC = {pcc:.3}</text>", ox + pad, pad - 8.0);
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>",
                ox + w / 2.0,
                h - 10.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" transform=\"rotate(-90 {} {})\" text-anchor=\"middle\">phoneme accuracy (%)</text>",
                ox + 12.0,
                h / 2.0,
                ox + 12.0,
                h / 2.0
            );
            for (x, y) in xs.iter().zip(&ys) {
                let cx = ox + pad + (x - xlo) / (xhi - xlo) * pw;
                let cy = pad + ph - (y - ylo) / (yhi - ylo) * ph;
                let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"steelblue\"/>");
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// One row of the band-ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BandResult {
    /// `None` is the broadband reference.
    pub band: Option<Band>,
    pub mode: Mode,
    pub best_epoch: usize,
    pub metrics: SentenceMetrics,
}

/// Inputs shared by every band-ablation run.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub data_dir: &'a Path,
    pub manifest: &'a Manifest,
    pub test_ids: &'a BTreeSet<String>,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub preprocess: &'a PreprocessConfig,
    pub inventory: &'a PhonemeInventory,
}

fn run_band<T: Scalar>(setup: &AblationSetup<'_>, band: Option<Band>, mode: Mode) -> Result<BandResult> {
    let pre = PreprocessConfig {
        band,
        eeg_only: setup.train.modality == Modality::Eeg,
        ..setup.preprocess.clone()
    };
    let trials = load_trials::<T>(setup.data_dir, setup.manifest, mode, &pre, setup.inventory)?;
    let (train, test) = split_by_sentence(trials, setup.test_ids);
    let mut model = setup.model.clone();
    model.in_channels = train
        .first()
        .ok_or_else(|| Error::invalid(format!("no {mode} training trials")))?
        .trial
        .signal
        .n_channels();
    let cfg = TrainConfig {
        mode,
        ..setup.train.clone()
    };
    let inputs: Vec<Trial<T>> = train.iter().map(|t| t.trial.clone()).collect();
    let init = init_parameters::<T>(&model, cfg.seed)?;
    let result = fit(&model, &cfg, init, &inputs, setup.inventory.sil(), |_, _| {})?;
    let report = evaluate_trials(&model, &cfg, &result.best_params, &test, setup.inventory)?;
    Ok(BandResult {
        band,
        mode,
        best_epoch: result.best_epoch,
        metrics: report.aggregate(),
    })
}

/// Trains and evaluates one model per (band, mode), in parallel.
pub fn band_ablation<T: Scalar>(setup: &AblationSetup<'_>, bands: &[Option<Band>], modes: &[Mode]) -> Result<Vec<BandResult>> {
    let jobs: Vec<(Option<Band>, Mode)> = modes
        .iter()
        .flat_map(|&m| bands.iter().map(move |&b| (b, m)))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(b, m)| scope.spawn(move || run_band::<T>(setup, b, m)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::invalid("band ablation worker panicked"))?)
            .collect()
    })
}

pub fn band_table_csv(rows: &[BandResult]) -> String {
    let mut s = String::from("band,mode,best_epoch,phoneme_accuracy,rmse,mcd,f1,error_rate\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.band.map_or("full", Band::name),
            r.mode,
            r.best_epoch,
            m.phoneme_accuracy,
            m.rmse,
            m.mcd,
            m.f1,
            m.error_rate
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn w_score_examples() {
        let w = w_scores(&[vec![0, 1, 2, 0]], 3, 0).unwrap();
        assert_eq!(w.with_sil, vec![0.5, 0.25, 0.25]);
        assert_eq!(w.without_sil, vec![0.0, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus: Vec<Vec<usize>> = (0..400).map(|_| (0..50).map(|_| rng.random_range(0..10)).collect()).collect();
        let w = w_scores(&corpus, 10, 0).unwrap();
        assert!(w.with_sil.iter().all(|&f| (f - 0.1).abs() < 0.01));
        assert!((w.with_sil.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w.without_sil.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = sentence_properties("s", &[0, 1, 2, 0], &w_scores(&[vec![0, 1, 2, 0]], 3, 0).unwrap(), 0).unwrap();
        assert_eq!(p.phoneme_seq_len, 4);
        assert_eq!(p.w_score_with_sil, 0.375);
        assert_eq!(p.w_score_without_sil, 0.5);
    }

    #[test]
    fn pearson_examples() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&xs, &[3.0; 10]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
        // Covariance over product of population standard deviations.
        let n = 30.0;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n - ma * mb;
        let sa = (a.iter().map(|x| x * x).sum::<f64>() / n - ma * ma).sqrt();
        let sb = (b.iter().map(|x| x * x).sum::<f64>() / n - mb * mb).sqrt();
        let r = pearson(&a, &b).unwrap();
        assert!((r - cov / (sa * sb)).abs() < 1e-12);
        let scaled: Vec<f64> = b.iter().map(|y| 3.0 * y - 7.0).collect();
        assert!((pearson(&a, &scaled).unwrap() - r).abs() < 1e-12);
        assert!((pearson(&a, &b.iter().map(|y| -y).collect::<Vec<_>>()).unwrap() + r).abs() < 1e-12);
    }

    /// Two-sided p by listing all sign assignments.
    fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        let r = signed_ranks(&d);
        let n = d.len();
        let total: f64 = r.iter().sum();
        let observed: f64 = d.iter().zip(&r).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let dev = (observed - total / 2.0).abs();
        let mut extreme = 0u64;
        for mask in 0..(1u64 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if (w - total / 2.0).abs() >= dev - 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [5, 8, 10, 12] {
            for trial in 0..20 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
                let b: Vec<f64> = (0..n)
                    .map(|i| if trial % 2 == 0 { rng.random_range(0..6) as f64 } else { a[i] - rng.random_range(-1.0..3.0) })
                    .collect();
                let Ok(w) = wilcoxon_signed_rank(&a, &b) else { continue };
                assert!(w.exact);
                assert!((w.p_value - brute_force_p(&a, &b)).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn wilcoxon_examples() {
        let a: Vec<f64> = (0..15).map(|i| 50.0 + i as f64).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x - 1.0 - 0.1 * i as f64).collect();
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w.w_minus, 0.0);
        assert!((w.p_value - 2.0 / 32768.0).abs() < 1e-15);
        assert!(w.p_value < 1e-4);

        let d: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let w = wilcoxon_signed_rank(&d, &[0.0; 10]).unwrap();
        assert!(w.p_value > 0.5);
        assert!(wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6]).is_err());
    }

    #[test]
    fn wilcoxon_normal_approximation_is_close_to_exact_at_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - rng.random_range(-0.5..1.0)).collect();
        let approx = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!approx.exact);
        let exact = wilcoxon_signed_rank(&a[..25], &b[..25]).unwrap();
        assert!(exact.exact);
        assert!((0.0..=1.0).contains(&approx.p_value));
        let all_up: Vec<f64> = a.iter().map(|x| x - 1.0).collect();
        assert!(wilcoxon_signed_rank(&a, &all_up).unwrap().p_value < 1e-5);
    }

    #[test]
    fn property_report_examples() {
        let props: Vec<SentenceProperties> = (0..6)
            .map(|i| SentenceProperties {
                sentence_id: format!("s{i}"),
                phoneme_seq_len: 4 + i,
                w_score_with_sil: 0.03 + 0.001 * (i * i) as f64,
                w_score_without_sil: 0.04 - 0.002 * i as f64,
            })
            .collect();
        let acc: Vec<f64> = (0..6).map(|i| 60.0 - 5.0 * i as f64).collect();
        let r = property_correlation_report(&props, &acc).unwrap();
        assert!((r.pcc_length + 1.0).abs() < 1e-12);
        assert!(r.to_csv().contains("pcc_length -1"));
        assert!(r.to_svg().contains("PCC = -1.000"));
        assert!(property_correlation_report(&props, &[50.0; 6]).is_err());
    }

    #[test]
    fn band_ablation_grid_is_finite_and_reproducible() {
        let inv = PhonemeInventory::arpabet();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_sentences: 4,
            n_test: 1,
            phonemes_per_sentence: (2, 3),
            n_eeg: 6,
            n_emg: 2,
            gap_ms: 400,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg, &inv).unwrap();
        let manifest = ds.write(dir.path(), &inv).unwrap();
        let model = ModelConfig {
            in_channels: 6,
            conv_channels: 8,
            groups: 4,
            gru_hidden: 4,
            gru_layers: 1,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            max_epochs: 1,
            modality: Modality::Eeg,
            seq_len: 256,
            ..TrainConfig::default()
        };
        let pre = PreprocessConfig::default();
        let setup = AblationSetup {
            data_dir: dir.path(),
            manifest: &manifest,
            test_ids: &ds.test_ids,
            model: &model,
            train: &train,
            preprocess: &pre,
            inventory: &inv,
        };
        let bands: Vec<Option<Band>> = Band::ALL.into_iter().map(Some).collect();
        let rows = band_ablation::<f32>(&setup, &bands, &[Mode::Overt]).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let m = &r.metrics;
            assert!([m.phoneme_accuracy, m.rmse, m.mcd, m.f1, m.error_rate].iter().all(|v| v.is_finite()));
        }
        let again = band_ablation::<f32>(&setup, &bands, &[Mode::Overt]).unwrap();
        assert_eq!(band_table_csv(&rows), band_table_csv(&again));
    }
}
