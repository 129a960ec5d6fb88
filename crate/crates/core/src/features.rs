//! 80-dimensional MFCC targets at an 8 ms frame period.
//!
//! Pipeline: resample to 16 kHz → pre-emphasis 0.97 → 32 ms Hann frames with
//! an 8 ms hop (frame `t` centered on the middle of hop `t`) → power spectrum
//! → 80 triangular mel filters spanning 0 Hz to Nyquist → natural log with an
//! energy floor → orthonormal DCT-II keeping all 80 coefficients.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::phoneme::{AlignedTranscript, PhonemeInventory};
use crate::scalar::Scalar;
use crate::signalproc::{read_f32_le, write_f32_le};

pub const MFCC_DIM: usize = 80;
pub const FRAME_PERIOD_MS: f64 = 8.0;
pub const ANALYSIS_RATE_HZ: u32 = 16_000;
const HOP: usize = 128;
const WINDOW: usize = 512;
const PRE_EMPHASIS: f64 = 0.97;
const LOG_FLOOR: f64 = 1e-10;
/// Allowed disagreement between audio and alignment durations.
pub const DURATION_TOLERANCE_MS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() || sample_rate_hz == 0 {
            return Err(Error::invalid("audio clip must be non-empty with a positive rate"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate_hz as f64
    }

    /// `ceil(duration_ms / 8)` in exact integer arithmetic.
    pub fn frame_count(&self) -> usize {
        let rate = self.sample_rate_hz as usize;
        (self.samples.len() * 125).div_ceil(rate)
    }

    /// Reads a 16-bit PCM mono WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::invalid(format!(
                "{}: expected 16-bit PCM mono, got {} ch / {} bit",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Reads header-less little-endian 16-bit PCM.
    pub fn read_raw_pcm(path: &Path, sample_rate_hz: u32) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 2 != 0 {
            return Err(Error::parse(path, 0, "odd byte count for 16-bit PCM"));
        }
        let samples = bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

/// Frames × 80 coefficients at an 8 ms period.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccFrames<T> {
    data: Vec<T>,
    n_frames: usize,
}

impl<T: Scalar> MfccFrames<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.len() % MFCC_DIM != 0 {
            return Err(Error::invalid(format!("{} values are not whole 80-dim frames", data.len())));
        }
        Ok(Self {
            n_frames: data.len() / MFCC_DIM,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_period_ms(&self) -> f64 {
        FRAME_PERIOD_MS
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * MFCC_DIM..(t + 1) * MFCC_DIM]
    }

    pub fn truncate(&mut self, n_frames: usize) {
        self.n_frames = self.n_frames.min(n_frames);
        self.data.truncate(self.n_frames * MFCC_DIM);
    }

    pub fn cast<U: Scalar>(&self) -> MfccFrames<U> {
        MfccFrames {
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            n_frames: self.n_frames,
        }
    }

    /// Writes `<base>.f32` and a one-line `<base>.txt` sidecar.
    pub fn write(&self, base: &Path) -> Result<()> {
        write_f32_le(&base.with_extension("f32"), &self.data)?;
        let side = base.with_extension("txt");
        std::fs::write(
            &side,
            format!("frames {} period_ms {} dims {}\n", self.n_frames, FRAME_PERIOD_MS, MFCC_DIM),
        )
        .map_err(|e| Error::io(&side, e))
    }

    pub fn read(base: &Path) -> Result<Self> {
        let side = base.with_extension("txt");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        let frames = match fields[..] {
            ["frames", n, "period_ms", p, "dims", d] => {
                let p: f64 = p.parse().map_err(|_| Error::parse(&side, 1, "bad period"))?;
                if p != FRAME_PERIOD_MS || d != "80" {
                    return Err(Error::parse(&side, 1, format!("unsupported period {p} / dims {d}")));
                }
                n.parse::<usize>().map_err(|_| Error::parse(&side, 1, "bad frame count"))?
            }
            _ => return Err(Error::parse(&side, 1, "expected `frames N period_ms P dims 80`")),
        };
        let m = Self::new(read_f32_le(&base.with_extension("f32"))?)?;
        if m.n_frames != frames {
            return Err(Error::parse(&side, 1, format!("sidecar says {frames} frames, payload has {}", m.n_frames)));
        }
        Ok(m)
    }
}

/// Band-limited resampling by windowed-sinc interpolation.
pub fn resample(x: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz {
        return x.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let fc = ratio.min(1.0) * 0.97;
    let half = (16.0 / fc).ceil() as isize;
    let n_out = (x.len() * to_hz as usize).div_ceil(from_hz as usize);
    (0..n_out)
        .map(|m| {
            let t = m as f64 / ratio;
            let center = t.floor() as isize;
            let mut acc = 0.0;
            for n in center - half..=center + half {
                if n < 0 || n as usize >= x.len() {
                    continue;
                }
                let d = t - n as f64;
                let arg = fc * d;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let w = 0.5 + 0.5 * (std::f64::consts::PI * d / (half as f64 + 1.0)).cos();
                acc += x[n as usize] * fc * sinc * w;
            }
            acc
        })
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the bins of a `WINDOW`-point FFT.
#[derive(Clone, Debug)]
pub struct MelFilterBank {
    /// `(n_filters, n_bins)` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterBank {
    pub fn new(n_filters: usize, rate: f64, fft_len: usize) -> Self {
        let n_bins = fft_len / 2 + 1;
        let top = hz_to_mel(rate / 2.0);
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_filters + 1) as f64))
            .collect();
        let bin_hz = |b: usize| b as f64 * rate / fft_len as f64;
        let weights = (0..n_filters)
            .map(|k| {
                let (lo, c, hi) = (edges[k], edges[k + 1], edges[k + 2]);
                (0..n_bins)
                    .map(|b| {
                        let f = bin_hz(b);
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=n_filters].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Stateless MFCC extractor with precomputed window, FFT plan, filters and
/// DCT basis.
pub struct MfccExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterBank,
    dct: Vec<f64>,
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(WINDOW);
        let bank = MelFilterBank::new(MFCC_DIM, ANALYSIS_RATE_HZ as f64, WINDOW);
        let n = MFCC_DIM;
        let mut dct = vec![0.0; n * n];
        for k in 0..n {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                dct[k * n + i] = scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
            }
        }
        Self {
            window,
            fft,
            bank,
            dct,
        }
    }

    pub fn filter_bank(&self) -> &MelFilterBank {
        &self.bank
    }

    /// Mel filter energies per frame, before the log.
    pub fn mel_energies(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        if clip.duration_ms() < WINDOW as f64 * 1000.0 / ANALYSIS_RATE_HZ as f64 {
            return Err(Error::invalid(format!(
                "clip of {:.1} ms is shorter than the 32 ms analysis window",
                clip.duration_ms()
            )));
        }
        let x = resample(&clip.samples, clip.sample_rate_hz, ANALYSIS_RATE_HZ);
        let mut emph = Vec::with_capacity(x.len());
        let mut prev = 0.0;
        for &v in &x {
            emph.push(v - PRE_EMPHASIS * prev);
            prev = v;
        }
        let n_frames = clip.frame_count();
        let mut out = Vec::with_capacity(n_frames);
        let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
        for t in 0..n_frames {
            let center = (t * HOP + HOP / 2) as isize;
            let start = center - (WINDOW / 2) as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if idx >= 0 && (idx as usize) < emph.len() {
                    emph[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex::new(v * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..WINDOW / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            out.push(self.bank.apply(&power));
        }
        Ok(out)
    }

    pub fn extract<T: Scalar>(&self, clip: &AudioClip) -> Result<MfccFrames<T>> {
        let energies = self.mel_energies(clip)?;
        let mut data = Vec::with_capacity(energies.len() * MFCC_DIM);
        for e in energies {
            let logs: Vec<f64> = e.iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
            for k in 0..MFCC_DIM {
                let c: f64 = self.dct[k * MFCC_DIM..(k + 1) * MFCC_DIM]
                    .iter()
                    .zip(&logs)
                    .map(|(a, b)| a * b)
                    .sum();
                data.push(T::of(c));
            }
        }
        MfccFrames::new(data)
    }
}

pub fn extract_mfcc<T: Scalar>(clip: &AudioClip) -> Result<MfccFrames<T>> {
    MfccExtractor::new().extract(clip)
}

/// MFCC frames plus equal-length frame labels for one sentence.
pub fn build_training_target<T: Scalar>(
    clip: &AudioClip,
    transcript: &AlignedTranscript,
    inventory: &PhonemeInventory,
) -> Result<(MfccFrames<T>, Vec<usize>)> {
    let diff = transcript.duration_ms() - clip.duration_ms();
    if diff.abs() > DURATION_TOLERANCE_MS {
        return Err(Error::invalid(format!(
            "{}: alignment spans {:.1} ms but audio is {:.1} ms",
            transcript.sentence_id,
            transcript.duration_ms(),
            clip.duration_ms()
        )));
    }
    let mfcc = extract_mfcc::<T>(clip)?;
    let labels = transcript.frame_labels(FRAME_PERIOD_MS, mfcc.n_frames(), inventory.sil())?;
    Ok((mfcc, labels))
}
