use biospeech::analysis::{sentence_properties, w_scores, wilcoxon_signed_rank};
use biospeech::kv::KvMap;
use biospeech::losses::{ctc_forward_backward, ctc_min_frames, dtw, DtwAlignment};
use biospeech::metrics::{levenshtein, macro_f1, mcd, phoneme_accuracy, rmse_after_dtw, ConfusionMatrix};
use biospeech::model::{bind, forward, init_parameters, ModelConfig};
use biospeech::signalproc::{ChannelRole, Epoch, FilterSpec, RawRecording, TrialMarker};
use biospeech::trainer::{make_batch, TrainConfig};
use biospeech::{Tape, Tensor};
use proptest::prelude::*;

fn roles(n_eeg: usize, n_emg: usize) -> Vec<ChannelRole> {
    let mut r = vec![ChannelRole::Eeg; n_eeg];
    r.extend(vec![ChannelRole::Emg; n_emg]);
    r
}

fn marker(onset: usize, offset: usize, i: usize) -> TrialMarker {
    TrialMarker {
        onset,
        offset,
        sentence_id: format!("s{i}"),
    }
}

fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    logits
        .chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(move |v| v - z)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recordings_accept_exactly_the_markers_that_fit(
        n_frames in 1usize..200,
        channels in 1usize..5,
        spans in prop::collection::vec((0usize..250, 0usize..250), 0..5),
    ) {
        let markers: Vec<TrialMarker> = spans.iter().enumerate().map(|(i, &(a, b))| marker(a, b, i)).collect();
        let fits = spans.iter().all(|&(a, b)| a < b && b <= n_frames);
        let rec = RawRecording::new(vec![0.0f64; n_frames * channels], 1000, vec![ChannelRole::Eeg; channels], markers);
        prop_assert_eq!(rec.is_ok(), fits);
    }

    #[test]
    fn epochs_span_their_marker_and_car_zeroes_each_group(
        n_eeg in 2usize..6,
        n_emg in 2usize..4,
        cuts in prop::collection::vec((1usize..40, 1usize..60), 1..4),
        seed in any::<u64>(),
    ) {
        let c = n_eeg + n_emg;
        let mut markers = Vec::new();
        let mut t = 0;
        for (i, &(gap, len)) in cuts.iter().enumerate() {
            t += gap + 10;
            markers.push(marker(t, t + len, i));
            t += len;
        }
        let n = t + 5;
        let mut state = seed | 1;
        let samples: Vec<f64> = (0..n * c)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 2001) as f64 / 100.0 - 10.0
            })
            .collect();
        let rec = RawRecording::new(samples, 1000, roles(n_eeg, n_emg), markers.clone()).unwrap();
        let car = rec.common_average_reference(true).unwrap();
        for f in 0..n {
            let row = &car.samples()[f * c..(f + 1) * c];
            let eeg: f64 = row[..n_eeg].iter().sum::<f64>() / n_eeg as f64;
            let emg: f64 = row[n_eeg..].iter().sum::<f64>() / n_emg as f64;
            prop_assert!(eeg.abs() < 1e-9 && emg.abs() < 1e-9, "frame {}: {} {}", f, eeg, emg);
        }
        for (i, m) in markers.iter().enumerate() {
            let e = car.epoch_and_baseline(i, 10.0).unwrap();
            prop_assert_eq!(e.n_frames(), m.offset - m.onset);
            prop_assert_eq!(e.n_channels(), c);
            prop_assert_eq!(&e.sentence_id, &m.sentence_id);
        }
    }

    #[test]
    fn band_pass_designs_only_inside_nyquist(lo in 0.5f64..600.0, hi in 0.5f64..600.0, rate in prop::sample::select(vec![250u32, 500, 1000])) {
        let nyq = rate as f64 / 2.0;
        let ok = FilterSpec::band_pass(lo, hi).design(rate as f64);
        prop_assert_eq!(ok.is_ok(), lo < hi && hi < nyq);
        if let Ok(k) = ok {
            prop_assert_eq!(k.len() % 2, 1);
            prop_assert!(k.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn notch_harmonics_stay_below_limits(base in 20.0f64..120.0, max_hz in 50.0f64..600.0, rate in 100.0f64..2000.0) {
        let hs = FilterSpec::notch_harmonics(base, 6.0, max_hz, rate);
        for (i, h) in hs.iter().enumerate() {
            prop_assert!(*h < rate / 2.0 && *h < max_hz);
            prop_assert!((h - base * (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn tensors_need_matching_shape_and_length(shape in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0f64; n]).is_ok());
        prop_assert_eq!(Tensor::new(shape, vec![0.0f64; n + extra]).is_ok(), extra == 0);
    }

    #[test]
    fn log_softmax_rows_normalise(rows in 1usize..6, k in 1usize..12, logits in prop::collection::vec(-30.0f64..30.0, 72)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, k], logits[..rows * k].to_vec()).unwrap());
        let lp = tape.log_softmax(x, 1).unwrap();
        for row in tape.value(lp).data().chunks(k) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dtw_paths_are_complete_monotone_and_priced(rows in 1usize..9, cols in 1usize..9, costs in prop::collection::vec(0.0f64..5.0, 64)) {
        let cost = &costs[..rows * cols];
        let p = dtw(cost, rows, cols).unwrap();
        prop_assert_eq!(p.path[0], (0, 0));
        prop_assert_eq!(*p.path.last().unwrap(), (rows - 1, cols - 1));
        for w in p.path.windows(2) {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)), "step {:?}", step);
        }
        let along: f64 = p.path.iter().map(|&(i, j)| cost[i * cols + j]).sum();
        prop_assert!((along - p.cost).abs() < 1e-9);
    }

    #[test]
    fn dtw_alignment_is_monotone_with_finite_costs(
        t_pred in 1usize..8,
        t_gt in 1usize..8,
        vals in prop::collection::vec(-2.0f64..2.0, 8 * 3 + 8 * 3),
        labels in prop::collection::vec(0usize..4, 8),
        dead in 0usize..4,
    ) {
        let dim = 3;
        let k = 4;
        let pred = &vals[..t_pred * dim];
        let gt = &vals[24..24 + t_gt * dim];
        // One class has probability zero everywhere; the floor keeps costs finite.
        let mut lp = log_softmax_rows(&vec![0.0; t_pred * k], k);
        for i in 0..t_pred {
            lp[i * k + dead] = f64::NEG_INFINITY;
        }
        let a = DtwAlignment::compute(pred, &lp, k, gt, &labels[..t_gt], dim, 0.5).unwrap();
        prop_assert!(a.cost.iter().all(|c| c.is_finite()));
        prop_assert_eq!(a.align.len(), t_pred);
        prop_assert!(a.align.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(a.align.iter().all(|&j| j < t_gt));
        prop_assert!(a.loss().is_finite() && a.loss() >= 0.0);
    }

    #[test]
    fn ctc_is_a_finite_nll_when_feasible(
        labels in prop::collection::vec(1usize..5, 0..5),
        extra in 0usize..4,
        logits in prop::collection::vec(-3.0f64..3.0, 5 * 16),
    ) {
        let k = 5;
        let t = ctc_min_frames(&labels).max(1) + extra;
        let lp = log_softmax_rows(&logits[..t * k], k);
        let (nll, grad) = ctc_forward_backward(&lp, t, k, &labels, 0).unwrap();
        prop_assert!(nll.is_finite() && nll >= -1e-12);
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn metrics_stay_in_range(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60)) {
        let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_frames(&pred, &gt, 6).unwrap();
        for c in 0..6 {
            prop_assert_eq!(cm.row_sum(c), gt.iter().filter(|&&g| g == c).count() as u64);
        }
        let acc = phoneme_accuracy(&pred, &gt).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
        prop_assert!((acc - cm.accuracy()).abs() < 1e-9);
        let f1 = macro_f1(&pred, &gt, 6).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn levenshtein_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..10),
        b in prop::collection::vec(0u8..4, 0..10),
        c in prop::collection::vec(0u8..4, 0..10),
    ) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(ab >= a.len().abs_diff(b.len()) && ab <= a.len().max(b.len()));
        prop_assert!(ab <= levenshtein(&a, &c) + levenshtein(&c, &b));
    }

    #[test]
    fn spectral_distances_are_non_negative(t1 in 1usize..6, t2 in 1usize..6, vals in prop::collection::vec(-3.0f64..3.0, 2 * 6 * 4)) {
        let a = Tensor::new(vec![t1, 4], vals[..t1 * 4].to_vec()).unwrap();
        let b = Tensor::new(vec![t2, 4], vals[24..24 + t2 * 4].to_vec()).unwrap();
        prop_assert!(rmse_after_dtw(&a, &b).unwrap() >= 0.0);
        prop_assert!(rmse_after_dtw(&a, &a).unwrap().abs() < 1e-12);
        prop_assert!(mcd(&a, &a).unwrap().abs() < 1e-12);
        if t1 == t2 {
            prop_assert!(mcd(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn w_scores_are_frequencies(corpus in prop::collection::vec(prop::collection::vec(0usize..8, 1..12), 1..8), probe in prop::collection::vec(1usize..8, 1..6)) {
        prop_assume!(corpus.iter().flatten().any(|&p| p != 0));
        let w = w_scores(&corpus, 8, 0).unwrap();
        prop_assert!((w.with_sil.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((w.without_sil.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut tokens = vec![0];
        tokens.extend(&probe);
        tokens.push(0);
        let s = sentence_properties("x", &tokens, &w, 0).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.w_score_with_sil));
        prop_assert!((0.0..=1.0).contains(&s.w_score_without_sil));
        prop_assert!(s.phoneme_seq_len >= 2);
    }

    #[test]
    fn wilcoxon_splits_the_rank_sum(pairs in prop::collection::vec((-5i32..5, -5i32..5), 1..30)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(x, y)| (x as f64, y as f64)).unzip();
        let nonzero = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        let res = wilcoxon_signed_rank(&a, &b);
        prop_assert_eq!(res.is_ok(), nonzero >= 5);
        prop_assume!(nonzero >= 5);
        let r = res.unwrap();
        let n = r.n as f64;
        prop_assert!((r.w_plus + r.w_minus - n * (n + 1.0) / 2.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        prop_assert_eq!(r.statistic, r.w_plus.min(r.w_minus));
        let flipped = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert!((flipped.p_value - r.p_value).abs() < 1e-12);
    }

    #[test]
    fn batch_spans_partition_the_concatenation(lens in prop::collection::vec(1usize..400, 1..6), l in prop::sample::select(vec![8usize, 64, 256])) {
        let trials: Vec<Epoch<f64>> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Epoch::new(vec![i as f64; n * 8 * 2], vec![ChannelRole::Eeg; 2], format!("t{i}"), 1000, 0.0).unwrap())
            .collect();
        let refs: Vec<&Epoch<f64>> = trials.iter().collect();
        let (x, layout) = make_batch(&refs, l).unwrap();
        prop_assert_eq!(layout.b * l, layout.n_s + layout.pad_len);
        prop_assert!(layout.pad_len < l);
        prop_assert_eq!(x.shape(), &[layout.b, 2, l][..]);
        let mut cursor = 0;
        for (i, s) in layout.trial_spans.iter().enumerate() {
            prop_assert_eq!(s.trial, i);
            prop_assert_eq!(s.start, cursor);
            prop_assert_eq!(s.end - s.start, lens[i] * 8);
            cursor = s.end;
        }
        prop_assert_eq!(cursor, layout.n_s);
    }

    #[test]
    fn train_config_round_trips_through_kv(
        lr in 1e-5f64..1e-1,
        frac in 0.01f64..0.99,
        patience in 0usize..30,
        rows in 1usize..9,
        seed in any::<u64>(),
    ) {
        let cfg = TrainConfig {
            lr,
            lr_min: lr / 10.0,
            val_fraction: frac,
            patience,
            batch_rows: rows,
            seed,
            ..TrainConfig::default()
        };
        prop_assert!(cfg.validate().is_ok());
        let mut kv = KvMap::parse(&cfg.to_kv().to_string()).unwrap();
        let mut back = TrainConfig::default();
        back.update_from(&mut kv).unwrap();
        prop_assert!(kv.finish().is_ok());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn val_fraction_and_lr_bounds_are_enforced(frac in -1.0f64..2.0, lr_min in 0.0f64..2e-3) {
        let cfg = TrainConfig {
            val_fraction: frac,
            lr_min,
            ..TrainConfig::default()
        };
        let valid = frac > 0.0 && frac < 1.0 && lr_min < cfg.lr;
        prop_assert_eq!(cfg.validate().is_ok(), valid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_outputs_normalised_phoneme_distributions(b in 1usize..3, frames in 1usize..5, seed in any::<u64>()) {
        let cfg = ModelConfig {
            conv_channels: 8,
            groups: 2,
            gru_hidden: 4,
            ..ModelConfig::compact(3)
        };
        let params = init_parameters::<f64>(&cfg, seed).unwrap();
        let mut tape = Tape::<f64>::new();
        let pv = bind(&mut tape, &params);
        let l = frames * cfg.downsample();
        let x = tape.constant(Tensor::from_fn(vec![b, 3, l], |i| ((i * 31 % 17) as f64 - 8.0) / 4.0));
        let o = forward(&cfg, &mut tape, &pv, x, false, 0).unwrap();
        prop_assert_eq!(tape.shape(o.mfcc), &[b, frames, 80][..]);
        prop_assert_eq!(tape.shape(o.logprobs), &[b, frames, cfg.head_width()][..]);
        for row in tape.value(o.logprobs).data().chunks(cfg.head_width()) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
