//! Synthetic corpus with planted per-phoneme signatures.
//!
//! Every class (silence included) owns a unit-norm spatial pattern
//! `normalize(g + spread · r_p)` over all channels, where `g` is shared. Inside
//! a phoneme segment the recording carries `amplitude · pattern · s(t)`; `s` is
//! 1 for broadband data, or a Hann-windowed carrier at `band_center_hz` that is
//! then band-passed to the containing EEG band. White noise sets the SNR.
//!
//! Silent modes stretch the biosignal in time by a per-sentence factor while
//! keeping the overt MFCC and alignment as targets.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{write_split, Manifest, ManifestRecord, MANIFEST_FILE, SPLIT_FILE};
use crate::error::{Error, Result};
use crate::features::{AudioClip, MfccFrames, ANALYSIS_RATE_HZ, FRAME_PERIOD_MS, MFCC_DIM};
use crate::kv::KvMap;
use crate::phoneme::{AlignedTranscript, PhonemeInventory, Segment};
use crate::scalar::Scalar;
use crate::signalproc::{Band, ChannelRole, ChannelSelect, Epoch, FilterSpec, RawRecording, TrialMarker};
use crate::trainer::Mode;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_sentences: usize,
    /// Sentences listed in the split file as held out.
    pub n_test: usize,
    /// Inclusive range of non-silence tokens per sentence.
    pub phonemes_per_sentence: (usize, usize),
    pub n_eeg: usize,
    pub n_emg: usize,
    pub sample_rate_hz: u32,
    /// Inclusive segment duration range in ms.
    pub segment_ms: (u32, u32),
    /// `+inf` disables noise.
    pub snr_db: f64,
    pub seed: u64,
    pub band_center_hz: Option<f64>,
    /// How far class patterns deviate from the shared component.
    pub pattern_spread: f64,
    pub amplitude: f64,
    pub modes: Vec<Mode>,
    /// Time-stretch range for whispered and imagined recordings.
    pub stretch: (f64, f64),
    /// Write tone-sequence WAV targets instead of template MFCC.
    pub audio_backed: bool,
    /// Noise-only lead-in before the first trial and between trials.
    pub gap_ms: u32,
    pub template_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sentences: 25,
            n_test: 5,
            phonemes_per_sentence: (8, 14),
            n_eeg: 127,
            n_emg: 10,
            sample_rate_hz: 1000,
            segment_ms: (40, 200),
            snr_db: 10.0,
            seed: 0,
            band_center_hz: None,
            pattern_spread: 0.25,
            amplitude: 10.0,
            modes: vec![Mode::Overt],
            stretch: (0.8, 1.25),
            audio_backed: false,
            gap_ms: 1000,
            template_jitter: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn n_channels(&self) -> usize {
        self.n_eeg + self.n_emg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        let (pmin, pmax) = self.phonemes_per_sentence;
        if pmin == 0 || pmin > pmax {
            return bad("phonemes_min", format!("range [{pmin}, {pmax}] is empty or starts at 0"));
        }
        let (smin, smax) = self.segment_ms;
        if smin == 0 || smin > smax {
            return bad("segment_ms_min", format!("range [{smin}, {smax}] is empty or starts at 0"));
        }
        if self.n_channels() == 0 {
            return bad("n_eeg", "no channels".into());
        }
        if self.sample_rate_hz < 125 || self.sample_rate_hz % 125 != 0 {
            return bad("sample_rate_hz", format!("{} is not a multiple of 125 Hz", self.sample_rate_hz));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return bad("snr_db", format!("{} is not a usable SNR", self.snr_db));
        }
        if self.n_test > self.n_sentences {
            return bad("n_test", format!("{} exceeds {} sentences", self.n_test, self.n_sentences));
        }
        let (lo, hi) = self.stretch;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("stretch_min", format!("stretch range [{lo}, {hi}] invalid"));
        }
        if !(self.pattern_spread > 0.0 && self.amplitude > 0.0 && self.template_jitter >= 0.0) {
            return bad("pattern_spread", "spread and amplitude must be positive".into());
        }
        if self.gap_ms < 200 {
            return bad("gap_ms", "need at least 200 ms of baseline before each trial".into());
        }
        if let Some(f) = self.band_center_hz {
            carrier_band(f, self.sample_rate_hz)?;
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() || modes.is_empty() {
            return bad("modes", "must list each mode at most once, at least one".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_sentences", self.n_sentences);
        kv.set("n_test", self.n_test);
        kv.set("phonemes_min", self.phonemes_per_sentence.0);
        kv.set("phonemes_max", self.phonemes_per_sentence.1);
        kv.set("n_eeg", self.n_eeg);
        kv.set("n_emg", self.n_emg);
        kv.set("sample_rate_hz", self.sample_rate_hz);
        kv.set("segment_ms_min", self.segment_ms.0);
        kv.set("segment_ms_max", self.segment_ms.1);
        kv.set("snr_db", self.snr_db);
        kv.set("seed", self.seed);
        kv.set(
            "band_center_hz",
            self.band_center_hz.map_or("none".to_string(), |f| f.to_string()),
        );
        kv.set("pattern_spread", self.pattern_spread);
        kv.set("amplitude", self.amplitude);
        let modes: Vec<String> = self.modes.iter().map(Mode::to_string).collect();
        kv.set("modes", modes.join(","));
        kv.set("stretch_min", self.stretch.0);
        kv.set("stretch_max", self.stretch.1);
        kv.set("audio_backed", self.audio_backed);
        kv.set("gap_ms", self.gap_ms);
        kv.set("template_jitter", self.template_jitter);
        kv
    }

    pub fn update_from(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("n_sentences", &mut self.n_sentences)?;
        kv.take_into("n_test", &mut self.n_test)?;
        kv.take_into("phonemes_min", &mut self.phonemes_per_sentence.0)?;
        kv.take_into("phonemes_max", &mut self.phonemes_per_sentence.1)?;
        kv.take_into("n_eeg", &mut self.n_eeg)?;
        kv.take_into("n_emg", &mut self.n_emg)?;
        kv.take_into("sample_rate_hz", &mut self.sample_rate_hz)?;
        kv.take_into("segment_ms_min", &mut self.segment_ms.0)?;
        kv.take_into("segment_ms_max", &mut self.segment_ms.1)?;
        kv.take_into("snr_db", &mut self.snr_db)?;
        kv.take_into("seed", &mut self.seed)?;
        if let Some(s) = kv.take::<String>("band_center_hz")? {
            self.band_center_hz = match s.as_str() {
                "none" | "" => None,
                v => Some(v.parse().map_err(|_| Error::Config {
                    key: "band_center_hz".into(),
                    msg: format!("cannot parse `{v}`"),
                })?),
            };
        }
        kv.take_into("pattern_spread", &mut self.pattern_spread)?;
        kv.take_into("amplitude", &mut self.amplitude)?;
        if let Some(s) = kv.take::<String>("modes")? {
            self.modes = s
                .split(',')
                .map(|m| m.trim().parse::<Mode>())
                .collect::<Result<_>>()
                .map_err(|e| Error::Config {
                    key: "modes".into(),
                    msg: e.to_string(),
                })?;
        }
        kv.take_into("stretch_min", &mut self.stretch.0)?;
        kv.take_into("stretch_max", &mut self.stretch.1)?;
        kv.take_into("audio_backed", &mut self.audio_backed)?;
        kv.take_into("gap_ms", &mut self.gap_ms)?;
        kv.take_into("template_jitter", &mut self.template_jitter)?;
        self.validate()
    }
}

/// The EEG band holding `f`, used to band-limit planted carriers.
pub fn carrier_band(f: f64, rate: u32) -> Result<Band> {
    Band::ALL
        .into_iter()
        .find(|b| {
            let (lo, hi) = b.edges_hz();
            lo <= f && f < hi && hi < rate as f64 / 2.0
        })
        .ok_or_else(|| Error::Config {
            key: "band_center_hz".into(),
            msg: format!("{f} Hz lies in no EEG band below Nyquist"),
        })
}

/// Per-class spatial patterns, MFCC templates and audio tones.
#[derive(Clone, Debug, PartialEq)]
pub struct Signatures {
    /// `n_classes` unit vectors over channels.
    pub patterns: Vec<Vec<f64>>,
    pub templates: Vec<Vec<f64>>,
    pub tone_hz: Vec<f64>,
}

impl Signatures {
    pub fn generate(cfg: &SynthConfig, n_classes: usize) -> Self {
        let mut rng = stream(cfg.seed, 0);
        let c = cfg.n_channels();
        let g: Vec<f64> = normals(&mut rng, c);
        let patterns = (0..n_classes)
            .map(|_| {
                let r = normals(&mut rng, c);
                let v: Vec<f64> = g.iter().zip(&r).map(|(a, b)| a + cfg.pattern_spread * b).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let templates = (0..n_classes).map(|_| normals(&mut rng, MFCC_DIM)).collect();
        let tone_hz = (0..n_classes).map(|p| 150.0 + 45.0 * p as f64).collect();
        Self {
            patterns,
            templates,
            tone_hz,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.patterns.first().map_or(0, Vec::len)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSentence {
    pub transcript: AlignedTranscript,
    pub mfcc: MfccFrames<f64>,
    pub frame_labels: Vec<usize>,
    /// Tone-sequence audio when audio-backed.
    pub audio: Option<AudioClip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub signatures: Signatures,
    pub sentences: Vec<SynthSentence>,
    pub recordings: BTreeMap<Mode, RawRecording<f64>>,
    pub test_ids: BTreeSet<String>,
}

fn sentence_id(i: usize) -> String {
    format!("s{i:04}")
}

/// Builds the corpus in memory. Deterministic per seed.
pub fn generate(cfg: &SynthConfig, inventory: &PhonemeInventory) -> Result<SynthDataset> {
    cfg.validate()?;
    let sil = inventory.sil();
    let signatures = Signatures::generate(cfg, inventory.len());
    let non_sil: Vec<usize> = (0..inventory.len()).filter(|&p| p != sil).collect();
    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    for i in 0..cfg.n_sentences {
        let mut rng = stream(cfg.seed, 1 + i as u64);
        let k = rng.random_range(cfg.phonemes_per_sentence.0..=cfg.phonemes_per_sentence.1);
        let mut tokens = vec![sil];
        while tokens.len() < k + 1 {
            let p = non_sil[rng.random_range(0..non_sil.len())];
            if p != *tokens.last().unwrap() {
                tokens.push(p);
            }
        }
        tokens.push(sil);
        let mut segments = Vec::with_capacity(tokens.len());
        let mut t = 0.0;
        for &p in &tokens {
            let d = rng.random_range(cfg.segment_ms.0..=cfg.segment_ms.1) as f64;
            segments.push(Segment {
                phoneme: p,
                start_ms: t,
                end_ms: t + d,
            });
            t += d;
        }
        // Stretch the closing silence to a whole number of frames.
        let total = (t / FRAME_PERIOD_MS).ceil() * FRAME_PERIOD_MS;
        segments.last_mut().unwrap().end_ms = total;
        let id = sentence_id(i);
        let text = tokens[1..tokens.len() - 1]
            .iter()
            .map(|&p| inventory.symbol(p))
            .collect::<Vec<_>>()
            .join(" ");
        let transcript = AlignedTranscript {
            sentence_id: id,
            text,
            segments,
        };
        let n_frames = (total / FRAME_PERIOD_MS) as usize;
        let frame_labels = transcript.frame_labels(FRAME_PERIOD_MS, n_frames, sil)?;
        let mut data = Vec::with_capacity(n_frames * MFCC_DIM);
        for &l in &frame_labels {
            for &v in &signatures.templates[l] {
                data.push(v + cfg.template_jitter * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let audio = cfg
            .audio_backed
            .then(|| tone_audio(&transcript, &signatures, sil))
            .transpose()?;
        sentences.push(SynthSentence {
            transcript,
            mfcc: MfccFrames::new(data)?,
            frame_labels,
            audio,
        });
    }
    let mut recordings = BTreeMap::new();
    for (mi, &mode) in cfg.modes.iter().enumerate() {
        recordings.insert(mode, render_recording(cfg, &signatures, &sentences, mode, mi as u64)?);
    }
    let mut ids: Vec<String> = (0..cfg.n_sentences).map(sentence_id).collect();
    ids.shuffle(&mut stream(cfg.seed, u64::MAX));
    let test_ids = ids.into_iter().take(cfg.n_test).collect();
    Ok(SynthDataset {
        config: cfg.clone(),
        signatures,
        sentences,
        recordings,
        test_ids,
    })
}

/// Two-harmonic tone per phoneme, silence for `sil`.
fn tone_audio(t: &AlignedTranscript, sig: &Signatures, sil: usize) -> Result<AudioClip> {
    let rate = ANALYSIS_RATE_HZ as f64;
    let n = (t.duration_ms() * rate / 1000.0).round() as usize;
    let mut x = vec![0.0; n];
    for s in &t.segments {
        if s.phoneme == sil {
            continue;
        }
        let f = sig.tone_hz[s.phoneme];
        let a = (s.start_ms * rate / 1000.0).round() as usize;
        let b = ((s.end_ms * rate / 1000.0).round() as usize).min(n);
        for (i, v) in x[a..b].iter_mut().enumerate() {
            let ph = 2.0 * PI * f * i as f64 / rate;
            *v = 0.3 * ph.sin() + 0.15 * (2.0 * ph).sin();
        }
    }
    AudioClip::new(x, ANALYSIS_RATE_HZ)
}

/// Carrier amplitude at original-time `tau_ms` inside `seg`.
fn waveform(seg: &Segment, tau_ms: f64, center_hz: Option<f64>) -> f64 {
    match center_hz {
        None => 1.0,
        Some(f) => {
            let dur = seg.end_ms - seg.start_ms;
            let x = (tau_ms - seg.start_ms) / dur;
            let mid = (seg.start_ms + seg.end_ms) / 2.0;
            (PI * x).sin().powi(2) * (2.0 * PI * f * (tau_ms - mid) / 1000.0).cos()
        }
    }
}

fn render_recording(
    cfg: &SynthConfig,
    sig: &Signatures,
    sentences: &[SynthSentence],
    mode: Mode,
    mode_index: u64,
) -> Result<RawRecording<f64>> {
    let c = cfg.n_channels();
    let rate = cfg.sample_rate_hz as f64;
    let gap = (cfg.gap_ms as f64 * rate / 1000.0) as usize;
    let mut rng = stream(cfg.seed, 1_000_000 + mode_index);
    let mut spans = Vec::with_capacity(sentences.len());
    let mut cursor = gap;
    for s in sentences {
        let r = if mode.is_silent() {
            rng.random_range(cfg.stretch.0..=cfg.stretch.1)
        } else {
            1.0
        };
        let base_len = (s.transcript.duration_ms() * rate / 1000.0).round() as usize;
        let len = (base_len as f64 * r).round().max(8.0) as usize;
        spans.push((cursor, len, r));
        cursor += len + gap;
    }
    let n_frames = cursor;
    let mut x = vec![0.0; n_frames * c];
    for (s, &(onset, len, r)) in sentences.iter().zip(&spans) {
        let mut seg = 0;
        let segs = &s.transcript.segments;
        for i in 0..len {
            let tau_ms = (i as f64 + 0.5) * 1000.0 / (rate * r);
            while seg + 1 < segs.len() && segs[seg].end_ms <= tau_ms {
                seg += 1;
            }
            let w = cfg.amplitude * waveform(&segs[seg], tau_ms, cfg.band_center_hz);
            let row = &mut x[(onset + i) * c..(onset + i + 1) * c];
            for (v, p) in row.iter_mut().zip(&sig.patterns[segs[seg].phoneme]) {
                *v = w * p;
            }
        }
    }
    let mut roles = vec![ChannelRole::Eeg; cfg.n_eeg];
    roles.extend(vec![ChannelRole::Emg; cfg.n_emg]);
    let markers = sentences
        .iter()
        .zip(&spans)
        .map(|(s, &(onset, len, _))| TrialMarker {
            onset,
            offset: onset + len,
            sentence_id: s.transcript.sentence_id.clone(),
        })
        .collect();
    let mut rec = RawRecording::new(x, cfg.sample_rate_hz, roles, markers)?;
    if let Some(f) = cfg.band_center_hz {
        let band = carrier_band(f, cfg.sample_rate_hz)?;
        rec = rec.apply_filter(&band.filter_spec(), ChannelSelect::All)?;
    }
    if cfg.snr_db.is_finite() {
        let mut power = 0.0;
        let mut count = 0usize;
        for &(onset, len, _) in &spans {
            power += rec.samples()[onset * c..(onset + len) * c].iter().map(|v| v * v).sum::<f64>();
            count += len * c;
        }
        let power = power / count.max(1) as f64;
        let sigma = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
        for v in rec.samples_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(rec)
}

impl SynthDataset {
    /// Trial `i` of `mode` as an epoch with no baseline correction.
    pub fn raw_epoch(&self, mode: Mode, i: usize) -> Result<Epoch<f64>> {
        let rec = self
            .recordings
            .get(&mode)
            .ok_or_else(|| Error::invalid(format!("no {mode} recording generated")))?;
        rec.epoch_and_baseline(i, 0.0)
    }

    /// Writes the manifest, recordings, alignments, targets, split file and
    /// the generating config under `dir`.
    pub fn write(&self, dir: &Path, inventory: &PhonemeInventory) -> Result<Manifest> {
        for sub in ["recordings", "alignments", "targets"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut records = Vec::new();
        for (mode, rec) in &self.recordings {
            let base = format!("recordings/{mode}");
            rec.write(&dir.join(&base))?;
            for s in &self.sentences {
                let id = &s.transcript.sentence_id;
                let target = if self.config.audio_backed {
                    format!("targets/{id}.wav")
                } else {
                    format!("targets/{id}")
                };
                records.push(ManifestRecord {
                    sentence_id: id.clone(),
                    mode: *mode,
                    recording: base.clone().into(),
                    alignment: format!("alignments/{id}.txt").into(),
                    target: target.into(),
                    text: s.transcript.text.clone(),
                });
            }
        }
        for s in &self.sentences {
            let id = &s.transcript.sentence_id;
            s.transcript.write(&dir.join(format!("alignments/{id}.txt")), inventory)?;
            match &s.audio {
                Some(a) => a.write_wav(&dir.join(format!("targets/{id}.wav")))?,
                None => s.mfcc.write(&dir.join(format!("targets/{id}")))?,
            }
        }
        let manifest = Manifest { records };
        manifest.write(&dir.join(MANIFEST_FILE))?;
        write_split(&dir.join(SPLIT_FILE), &self.test_ids)?;
        let cfg = dir.join("synth_config.txt");
        std::fs::write(&cfg, self.config.to_kv().to_string()).map_err(|e| Error::io(&cfg, e))?;
        Ok(manifest)
    }
}

/// Matched-filter decoding: each frame's centre sample is assigned the class
/// whose pattern has the largest inner product with it.
pub fn oracle_decode<T: Scalar>(epoch: &Epoch<T>, signatures: &Signatures) -> Result<Vec<usize>> {
    let c = epoch.n_channels();
    if c != signatures.n_channels() {
        return Err(Error::invalid(format!(
            "epoch has {c} channels, signatures {}",
            signatures.n_channels()
        )));
    }
    let per_frame = (epoch.sample_rate_hz as f64 * FRAME_PERIOD_MS / 1000.0).round() as usize;
    if per_frame == 0 {
        return Err(Error::invalid("sample rate below one sample per frame"));
    }
    let n = epoch.n_frames() / per_frame;
    Ok((0..n)
        .map(|t| {
            let row = &epoch.samples()[(t * per_frame + per_frame / 2) * c..][..c];
            let score = |p: &Vec<f64>| row.iter().zip(p).map(|(x, w)| x.to_f64_lossy() * w).sum::<f64>();
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (k, p) in signatures.patterns.iter().enumerate() {
                let s = score(p);
                if s > best_score {
                    best = k;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

/// Fraction of signal energy that survives `spec`, measured over trial spans
/// of the selected channels.
pub fn retained_energy(rec: &RawRecording<f64>, spec: &FilterSpec, select: ChannelSelect) -> Result<f64> {
    let filtered = rec.apply_filter(spec, select)?;
    let c = rec.n_channels();
    let keep: Vec<bool> = rec
        .channel_roles
        .iter()
        .map(|r| match select {
            ChannelSelect::All => true,
            ChannelSelect::Role(want) => *r == want,
        })
        .collect();
    let energy = |x: &[f64]| {
        let mut e = 0.0;
        for m in &rec.trial_markers {
            for f in m.onset..m.offset {
                for ch in (0..c).filter(|&ch| keep[ch]) {
                    e += x[f * c + ch].powi(2);
                }
            }
        }
        e
    };
    Ok(energy(filtered.samples()) / energy(rec.samples()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_sentences: 4,
            n_test: 1,
            phonemes_per_sentence: (4, 6),
            n_eeg: 12,
            n_emg: 4,
            seed,
            gap_ms: 300,
            ..SynthConfig::default()
        }
    }

    fn frame_accuracy(ds: &SynthDataset, sig: &Signatures) -> (usize, usize) {
        let mut hit = 0;
        let mut total = 0;
        for (i, s) in ds.sentences.iter().enumerate() {
            let pred = oracle_decode(&ds.raw_epoch(Mode::Overt, i).unwrap(), sig).unwrap();
            assert_eq!(pred.len(), s.frame_labels.len());
            hit += pred.iter().zip(&s.frame_labels).filter(|(a, b)| a == b).count();
            total += pred.len();
        }
        (hit, total)
    }

    #[test]
    fn deterministic_files() {
        let inv = PhonemeInventory::arpabet();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut cfg = small(7);
        cfg.modes = vec![Mode::Overt, Mode::Whispered];
        generate(&cfg, &inv).unwrap().write(a.path(), &inv).unwrap();
        generate(&cfg, &inv).unwrap().write(b.path(), &inv).unwrap();
        for f in walk(a.path()) {
            let rel = f.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn empty_corpus_has_valid_manifest() {
        let inv = PhonemeInventory::arpabet();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_sentences: 0,
            n_test: 0,
            ..small(1)
        };
        let m = generate(&cfg, &inv).unwrap().write(dir.path(), &inv).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn noiseless_oracle_is_exact() {
        let inv = PhonemeInventory::arpabet();
        let cfg = SynthConfig {
            snr_db: f64::INFINITY,
            ..small(3)
        };
        let ds = generate(&cfg, &inv).unwrap();
        let (hit, total) = frame_accuracy(&ds, &ds.signatures);
        assert_eq!(hit, total);
    }

    #[test]
    fn oracle_degrades_with_noise_and_shuffled_signatures_give_chance() {
        let inv = PhonemeInventory::arpabet();
        let mut accs = Vec::new();
        for snr in [20.0, 10.0, 0.0, -10.0] {
            let (mut hit, mut total) = (0, 0);
            for seed in 0..3 {
                let cfg = SynthConfig {
                    snr_db: snr,
                    n_sentences: 8,
                    n_eeg: 127,
                    n_emg: 10,
                    ..small(seed)
                };
                let (h, t) = frame_accuracy(&generate(&cfg, &inv).unwrap(), &generate(&cfg, &inv).unwrap().signatures);
                hit += h;
                total += t;
            }
            accs.push(hit as f64 / total as f64);
        }
        assert!(accs.windows(2).all(|w| w[0] >= w[1]), "{accs:?}");
        assert!(accs[2] < 1.0 && accs[2] > 0.1, "{accs:?}");

        let cfg = SynthConfig {
            snr_db: f64::INFINITY,
            n_sentences: 30,
            ..small(5)
        };
        let ds = generate(&cfg, &inv).unwrap();
        let mut shuffled = ds.signatures.clone();
        shuffled.patterns.rotate_left(1);
        let (hit, total) = frame_accuracy(&ds, &shuffled);
        let chance = 1.0 / 40.0;
        assert!((hit as f64 / total as f64) < 3.0 * chance + 0.05);
    }

    #[test]
    fn alignments_round_trip_to_frame_labels() {
        let inv = PhonemeInventory::arpabet();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(2), &inv).unwrap();
        ds.write(dir.path(), &inv).unwrap();
        for s in &ds.sentences {
            let id = &s.transcript.sentence_id;
            let t = AlignedTranscript::read(&dir.path().join(format!("alignments/{id}.txt")), id, "", &inv).unwrap();
            let labels = t.frame_labels(FRAME_PERIOD_MS, s.frame_labels.len(), 0).unwrap();
            assert_eq!(labels, s.frame_labels);
            let m = MfccFrames::<f64>::read(&dir.path().join(format!("targets/{id}"))).unwrap();
            assert_eq!(m.n_frames(), s.frame_labels.len());
        }
    }

    #[test]
    fn silent_modes_are_stretched() {
        let inv = PhonemeInventory::arpabet();
        let cfg = SynthConfig {
            modes: vec![Mode::Overt, Mode::Imagined],
            ..small(4)
        };
        let ds = generate(&cfg, &inv).unwrap();
        let overt = &ds.recordings[&Mode::Overt];
        let imagined = &ds.recordings[&Mode::Imagined];
        let mut differs = false;
        for (a, b) in overt.trial_markers.iter().zip(&imagined.trial_markers) {
            let (la, lb) = (a.offset - a.onset, b.offset - b.onset);
            assert!(lb as f64 >= 0.8 * la as f64 - 1.0 && lb as f64 <= 1.25 * la as f64 + 1.0);
            differs |= la != lb;
        }
        assert!(differs);
    }

    #[test]
    fn planted_delta_band() {
        let inv = PhonemeInventory::arpabet();
        let cfg = SynthConfig {
            band_center_hz: Some(2.0),
            segment_ms: (200, 250),
            snr_db: f64::INFINITY,
            n_sentences: 6,
            ..small(6)
        };
        let ds = generate(&cfg, &inv).unwrap();
        let rec = &ds.recordings[&Mode::Overt];
        let eeg = ChannelSelect::Role(ChannelRole::Eeg);
        let delta = retained_energy(rec, &Band::Delta.filter_spec(), eeg).unwrap();
        let high = retained_energy(rec, &Band::HighGamma.filter_spec(), eeg).unwrap();
        assert!(delta >= 0.9, "{delta}");
        assert!(high <= 0.01, "{high}");
    }

    #[test]
    fn audio_backed_targets_load() {
        let inv = PhonemeInventory::arpabet();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            audio_backed: true,
            n_sentences: 2,
            ..small(8)
        };
        let ds = generate(&cfg, &inv).unwrap();
        let m = ds.write(dir.path(), &inv).unwrap();
        for r in &m.records {
            let (_, target) = crate::dataset::load_target::<f32>(dir.path(), r, &inv).unwrap();
            let s = ds.sentences.iter().find(|s| s.transcript.sentence_id == r.sentence_id).unwrap();
            assert_eq!(target.frame_labels, s.frame_labels);
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = SynthConfig {
            band_center_hz: Some(2.0),
            modes: vec![Mode::Overt, Mode::Whispered],
            ..SynthConfig::default()
        };
        let mut kv = KvMap::parse(&cfg.to_kv().to_string()).unwrap();
        let mut back = SynthConfig::default();
        back.update_from(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, cfg);
    }
}
