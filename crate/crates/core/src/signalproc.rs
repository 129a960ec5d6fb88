//! Multichannel biosignal preprocessing: FIR filtering, common average
//! reference, epoching with baseline correction, and band isolation.
//!
//! Filters are linear-phase windowed-sinc (Hamming) FIRs applied through FFT
//! convolution. With `zero_phase` the group delay of `(taps-1)/2` samples is
//! compensated, so output sample `n` is centered on input sample `n`.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    Eeg,
    Emg,
}

impl fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelRole::Eeg => "EEG",
            ChannelRole::Emg => "EMG",
        })
    }
}

impl FromStr for ChannelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EEG" => Ok(ChannelRole::Eeg),
            "EMG" => Ok(ChannelRole::Emg),
            _ => Err(Error::invalid(format!("unknown channel role `{s}`"))),
        }
    }
}

/// Which channels an operation touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelSelect {
    All,
    Role(ChannelRole),
}

impl ChannelSelect {
    fn mask(self, roles: &[ChannelRole]) -> Vec<bool> {
        roles
            .iter()
            .map(|r| match self {
                ChannelSelect::All => true,
                ChannelSelect::Role(want) => *r == want,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialMarker {
    pub onset: usize,
    pub offset: usize,
    pub sentence_id: String,
}

/// Continuous recording, frames × channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording<T> {
    samples: Vec<T>,
    n_frames: usize,
    pub sample_rate_hz: u32,
    pub channel_roles: Vec<ChannelRole>,
    pub trial_markers: Vec<TrialMarker>,
}

impl<T: Scalar> RawRecording<T> {
    pub fn new(
        samples: Vec<T>,
        sample_rate_hz: u32,
        channel_roles: Vec<ChannelRole>,
        trial_markers: Vec<TrialMarker>,
    ) -> Result<Self> {
        let c = channel_roles.len();
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if c == 0 || samples.len() % c != 0 {
            return Err(Error::invalid(format!(
                "{} samples do not divide into {c} channels",
                samples.len()
            )));
        }
        let n_frames = samples.len() / c;
        for m in &trial_markers {
            if m.onset >= m.offset || m.offset > n_frames {
                return Err(Error::invalid(format!(
                    "marker {} [{}, {}) outside recording of {n_frames} frames",
                    m.sentence_id, m.onset, m.offset
                )));
            }
        }
        Ok(Self {
            samples,
            n_frames,
            sample_rate_hz,
            channel_roles,
            trial_markers,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_channels(&self) -> usize {
        self.channel_roles.len()
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [T] {
        &mut self.samples
    }

    pub fn channel(&self, c: usize) -> Vec<T> {
        column(&self.samples, self.n_channels(), c)
    }

    /// Filters the selected channels; others are untouched.
    pub fn apply_filter(&self, spec: &FilterSpec, select: ChannelSelect) -> Result<Self> {
        let kernel = spec.design(self.sample_rate_hz as f64)?;
        let mask = select.mask(&self.channel_roles);
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid(format!("channel selection {select:?} is empty")));
        }
        let mut out = self.clone();
        filter_columns(&mut out.samples, self.n_channels(), &mask, &kernel, spec.zero_phase);
        Ok(out)
    }

    /// Zero-phase band-pass of the EEG-role channels (or all channels when
    /// none are tagged EEG) to a named band.
    pub fn band_isolate(&self, band: Band) -> Result<Self> {
        let select = if self.channel_roles.contains(&ChannelRole::Eeg) {
            ChannelSelect::Role(ChannelRole::Eeg)
        } else {
            ChannelSelect::All
        };
        self.apply_filter(&band.filter_spec(), select)
    }

    pub fn common_average_reference(&self, per_role: bool) -> Result<Self> {
        let mut out = self.clone();
        car_in_place(&mut out.samples, &self.channel_roles, per_role)?;
        Ok(out)
    }

    /// Slices trial `marker_index` and subtracts, per channel, the mean of the
    /// `baseline_ms` window immediately preceding onset.
    pub fn epoch_and_baseline(&self, marker_index: usize, baseline_ms: f64) -> Result<Epoch<T>> {
        let m = self
            .trial_markers
            .get(marker_index)
            .ok_or_else(|| Error::invalid(format!("no marker {marker_index}")))?;
        let c = self.n_channels();
        let nb = (baseline_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize;
        if m.onset < nb {
            return Err(Error::InsufficientBaseline {
                onset: m.onset,
                needed: nb,
                available: m.onset,
            });
        }
        let mut baseline = vec![0.0f64; c];
        if nb > 0 {
            for f in m.onset - nb..m.onset {
                for (ch, b) in baseline.iter_mut().enumerate() {
                    *b += self.samples[f * c + ch].to_f64_lossy();
                }
            }
            baseline.iter_mut().for_each(|b| *b /= nb as f64);
        }
        let mut samples = Vec::with_capacity((m.offset - m.onset) * c);
        for f in m.onset..m.offset {
            for (ch, b) in baseline.iter().enumerate() {
                samples.push(T::of(self.samples[f * c + ch].to_f64_lossy() - b));
            }
        }
        Epoch::new(
            samples,
            self.channel_roles.clone(),
            m.sentence_id.clone(),
            self.sample_rate_hz,
            baseline_ms,
        )
    }

    /// Writes `<base>.f32` (little-endian f32, frames × channels) and the
    /// `<base>.hdr` text header.
    pub fn write(&self, base: &Path) -> Result<()> {
        let (bin, hdr) = recording_paths(base);
        let mut header = String::new();
        header.push_str("# biospeech raw recording v1\n");
        header.push_str(&format!("sample_rate_hz {}\n", self.sample_rate_hz));
        header.push_str(&format!("channels {}\n", self.n_channels()));
        header.push_str(&format!("frames {}\n", self.n_frames));
        let roles: Vec<String> = self.channel_roles.iter().map(|r| r.to_string()).collect();
        header.push_str(&format!("roles {}\n", roles.join(" ")));
        header.push_str("markers\n");
        for m in &self.trial_markers {
            header.push_str(&format!("{} {} {}\n", m.onset, m.offset, m.sentence_id));
        }
        std::fs::write(&hdr, header).map_err(|e| Error::io(&hdr, e))?;
        write_f32_le(&bin, &self.samples)
    }

    pub fn read(base: &Path) -> Result<Self> {
        let (bin, hdr) = recording_paths(base);
        let text = std::fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
        let mut rate = None;
        let mut channels = None;
        let mut frames = None;
        let mut roles = None;
        let mut markers = Vec::new();
        let mut in_markers = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(&hdr, lineno, format!("bad integer `{s}`")))
            };
            if in_markers {
                let [on, off, id] = fields[..] else {
                    return Err(Error::parse(&hdr, lineno, "expected `onset offset sentence_id`"));
                };
                markers.push(TrialMarker {
                    onset: num(on)?,
                    offset: num(off)?,
                    sentence_id: id.to_string(),
                });
                continue;
            }
            match fields[0] {
                "sample_rate_hz" if fields.len() == 2 => rate = Some(num(fields[1])? as u32),
                "channels" if fields.len() == 2 => channels = Some(num(fields[1])?),
                "frames" if fields.len() == 2 => frames = Some(num(fields[1])?),
                "roles" => {
                    roles = Some(
                        fields[1..]
                            .iter()
                            .map(|s| s.parse::<ChannelRole>())
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| Error::parse(&hdr, lineno, e.to_string()))?,
                    )
                }
                "markers" => in_markers = true,
                other => return Err(Error::parse(&hdr, lineno, format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::parse(&hdr, 0, format!("missing `{k}`"));
        let rate = rate.ok_or_else(|| missing("sample_rate_hz"))?;
        let channels = channels.ok_or_else(|| missing("channels"))?;
        let roles: Vec<ChannelRole> = roles.ok_or_else(|| missing("roles"))?;
        if roles.len() != channels {
            return Err(Error::parse(&hdr, 0, format!("{} roles for {channels} channels", roles.len())));
        }
        let samples: Vec<T> = read_f32_le(&bin)?;
        if let Some(f) = frames {
            if f * channels != samples.len() {
                return Err(Error::parse(&bin, 0, format!("expected {f}×{channels} values, found {}", samples.len())));
            }
        }
        Self::new(samples, rate, roles, markers)
    }
}

fn recording_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("f32"), base.with_extension("hdr"))
}

pub(crate) fn write_f32_le<T: Scalar>(path: &Path, values: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_le<T: Scalar>(path: &Path) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(path, 0, "byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect())
}

/// One trial after filtering, referencing and baseline correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch<T> {
    samples: Vec<T>,
    n_frames: usize,
    pub channel_roles: Vec<ChannelRole>,
    pub sentence_id: String,
    pub sample_rate_hz: u32,
    pub baseline_window_ms: f64,
}

impl<T: Scalar> Epoch<T> {
    pub fn new(
        samples: Vec<T>,
        channel_roles: Vec<ChannelRole>,
        sentence_id: String,
        sample_rate_hz: u32,
        baseline_window_ms: f64,
    ) -> Result<Self> {
        let c = channel_roles.len();
        if c == 0 || samples.len() % c != 0 {
            return Err(Error::invalid(format!(
                "{} samples do not divide into {c} channels",
                samples.len()
            )));
        }
        Ok(Self {
            n_frames: samples.len() / c,
            samples,
            channel_roles,
            sentence_id,
            sample_rate_hz,
            baseline_window_ms,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_channels(&self) -> usize {
        self.channel_roles.len()
    }

    /// Frames × channels, row-major.
    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> Vec<T> {
        column(&self.samples, self.n_channels(), c)
    }

    pub fn common_average_reference(&self, per_role: bool) -> Result<Self> {
        let mut out = self.clone();
        car_in_place(&mut out.samples, &self.channel_roles, per_role)?;
        Ok(out)
    }

    /// Zero-phase band-pass to a named band, applied to every channel.
    pub fn band_isolate(&self, band: Band) -> Result<Self> {
        let spec = band.filter_spec();
        let kernel = spec.design(self.sample_rate_hz as f64)?;
        let mut out = self.clone();
        let mask = vec![true; self.n_channels()];
        filter_columns(&mut out.samples, self.n_channels(), &mask, &kernel, true);
        Ok(out)
    }

    /// Keeps only channels of `role`.
    pub fn select_role(&self, role: ChannelRole) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_channels())
            .filter(|&c| self.channel_roles[c] == role)
            .collect();
        if keep.is_empty() {
            return Err(Error::invalid(format!("epoch {} has no {role} channels", self.sentence_id)));
        }
        let c = self.n_channels();
        let samples = (0..self.n_frames)
            .flat_map(|f| keep.iter().map(move |&k| f * c + k))
            .map(|i| self.samples[i])
            .collect();
        Epoch::new(
            samples,
            vec![role; keep.len()],
            self.sentence_id.clone(),
            self.sample_rate_hz,
            self.baseline_window_ms,
        )
    }

    /// Drops trailing frames so the length is a multiple of `multiple`.
    pub fn truncate_to_multiple(&self, multiple: usize) -> Self {
        let keep = self.n_frames / multiple * multiple;
        let mut out = self.clone();
        out.samples.truncate(keep * self.n_channels());
        out.n_frames = keep;
        out
    }

    /// Stored as a recording with a single marker spanning the epoch.
    pub fn write(&self, base: &Path) -> Result<()> {
        let rec = RawRecording::new(
            self.samples.clone(),
            self.sample_rate_hz,
            self.channel_roles.clone(),
            vec![TrialMarker {
                onset: 0,
                offset: self.n_frames.max(1),
                sentence_id: self.sentence_id.clone(),
            }],
        )?;
        rec.write(base)
    }

    pub fn read(base: &Path) -> Result<Self> {
        let rec = RawRecording::<T>::read(base)?;
        let id = rec
            .trial_markers
            .first()
            .map(|m| m.sentence_id.clone())
            .ok_or_else(|| Error::parse(base, 0, "epoch file without marker"))?;
        Epoch::new(rec.samples, rec.channel_roles, id, rec.sample_rate_hz, 0.0)
    }
}

fn column<T: Scalar>(samples: &[T], n_channels: usize, c: usize) -> Vec<T> {
    samples.iter().skip(c).step_by(n_channels).copied().collect()
}

fn car_in_place<T: Scalar>(samples: &mut [T], roles: &[ChannelRole], per_role: bool) -> Result<()> {
    let c = roles.len();
    let groups: Vec<Vec<usize>> = if per_role {
        [ChannelRole::Eeg, ChannelRole::Emg]
            .iter()
            .map(|r| (0..c).filter(|&i| roles[i] == *r).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect()
    } else {
        vec![(0..c).collect()]
    };
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::invalid(format!(
            "common average reference needs >= 2 channels per group; channel {} is alone",
            g[0]
        )));
    }
    for frame in samples.chunks_mut(c) {
        for g in &groups {
            let mean = g.iter().map(|&i| frame[i].to_f64_lossy()).sum::<f64>() / g.len() as f64;
            for &i in g {
                frame[i] = T::of(frame[i].to_f64_lossy() - mean);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterKind {
    BandPass { low_hz: f64, high_hz: f64 },
    HighPass { cutoff_hz: f64 },
    LowPass { cutoff_hz: f64 },
    /// Band-stop at `base_hz` and every harmonic below `max_hz` (and below
    /// Nyquist), each `width_hz` wide.
    NotchComb { base_hz: f64, width_hz: f64, max_hz: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Odd FIR length; `None` picks one from the narrowest transition.
    pub taps: Option<usize>,
    pub zero_phase: bool,
}

/// Hamming-window transition width is about 3.3 / taps cycles per sample.
const HAMMING_TRANSITION: f64 = 3.3;

impl FilterSpec {
    pub fn band_pass(low_hz: f64, high_hz: f64) -> Self {
        Self {
            kind: FilterKind::BandPass { low_hz, high_hz },
            taps: None,
            zero_phase: true,
        }
    }

    pub fn high_pass(cutoff_hz: f64) -> Self {
        Self {
            kind: FilterKind::HighPass { cutoff_hz },
            taps: None,
            zero_phase: true,
        }
    }

    pub fn low_pass(cutoff_hz: f64) -> Self {
        Self {
            kind: FilterKind::LowPass { cutoff_hz },
            taps: None,
            zero_phase: true,
        }
    }

    /// 60 Hz mains comb: 60, 120 and 180 Hz stopped.
    pub fn mains_notch() -> Self {
        Self {
            kind: FilterKind::NotchComb {
                base_hz: 60.0,
                width_hz: 6.0,
                max_hz: 200.0,
            },
            taps: None,
            zero_phase: true,
        }
    }

    pub fn with_taps(mut self, taps: usize) -> Self {
        self.taps = Some(taps);
        self
    }

    /// Harmonic centers a notch comb stops at this rate.
    pub fn notch_harmonics(base_hz: f64, width_hz: f64, max_hz: f64, rate: f64) -> Vec<f64> {
        let nyq = rate / 2.0;
        (1..)
            .map(|k| k as f64 * base_hz)
            .take_while(|&f| f < max_hz && f + width_hz / 2.0 < nyq)
            .collect()
    }

    fn validate(&self, rate: f64) -> Result<f64> {
        let nyq = rate / 2.0;
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        // Returns the narrowest transition the design should resolve.
        match self.kind {
            FilterKind::BandPass { low_hz, high_hz } => {
                if !(0.0 < low_hz && low_hz < high_hz && high_hz < nyq) {
                    return bad(format!("band-pass needs 0 < {low_hz} < {high_hz} < Nyquist {nyq}"));
                }
                Ok(low_hz.min((high_hz - low_hz) / 2.0).min(10.0).min(nyq - high_hz))
            }
            FilterKind::HighPass { cutoff_hz } | FilterKind::LowPass { cutoff_hz } => {
                if !(0.0 < cutoff_hz && cutoff_hz < nyq) {
                    return bad(format!("cutoff {cutoff_hz} must lie in (0, Nyquist {nyq})"));
                }
                Ok(cutoff_hz.min(nyq - cutoff_hz).min(10.0))
            }
            FilterKind::NotchComb {
                base_hz,
                width_hz,
                max_hz,
            } => {
                if !(base_hz > 0.0 && width_hz > 0.0 && width_hz < base_hz && base_hz + width_hz / 2.0 < nyq) {
                    return bad(format!("notch at {base_hz} Hz (width {width_hz}) invalid for Nyquist {nyq}"));
                }
                if Self::notch_harmonics(base_hz, width_hz, max_hz, rate).is_empty() {
                    return bad(format!("notch comb at {base_hz} Hz has no harmonic below {max_hz} Hz"));
                }
                Ok(width_hz / 2.0)
            }
        }
    }

    /// Designs the FIR kernel for `rate`.
    pub fn design(&self, rate: f64) -> Result<Vec<f64>> {
        let transition = self.validate(rate)?;
        let taps = match self.taps {
            Some(t) if t % 2 == 1 && t >= 3 => t,
            Some(t) => return Err(Error::InvalidSpec(format!("taps must be odd and >= 3, got {t}"))),
            None => {
                let n = (HAMMING_TRANSITION * rate / transition).ceil() as usize;
                n | 1
            }
        };
        let lp = |fc: f64| lowpass_kernel(fc / rate, taps);
        let delta = |taps: usize| {
            let mut d = vec![0.0; taps];
            d[taps / 2] = 1.0;
            d
        };
        let sub = |a: Vec<f64>, b: &[f64]| a.into_iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
        Ok(match self.kind {
            FilterKind::LowPass { cutoff_hz } => lp(cutoff_hz),
            FilterKind::HighPass { cutoff_hz } => sub(delta(taps), &lp(cutoff_hz)),
            FilterKind::BandPass { low_hz, high_hz } => sub(lp(high_hz), &lp(low_hz)),
            FilterKind::NotchComb {
                base_hz,
                width_hz,
                max_hz,
            } => {
                let mut k = delta(taps);
                for f in Self::notch_harmonics(base_hz, width_hz, max_hz, rate) {
                    let band = sub(lp(f + width_hz / 2.0), &lp(f - width_hz / 2.0));
                    k = sub(k, &band);
                }
                k
            }
        })
    }
}

/// Hamming-windowed sinc low-pass at normalized cutoff `fc` (cycles/sample),
/// scaled to unit DC gain.
fn lowpass_kernel(fc: f64, taps: usize) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let x = n as f64 - m;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x)
            };
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Convolution engine reused across channels of one signal.
struct FftConvolver {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    kernel_spectrum: Vec<Complex<f64>>,
}

impl FftConvolver {
    fn new(kernel: &[f64], signal_len: usize) -> Self {
        let size = (signal_len + kernel.len() - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let mut kernel_spectrum = vec![Complex::new(0.0, 0.0); size];
        for (slot, &k) in kernel_spectrum.iter_mut().zip(kernel) {
            slot.re = k;
        }
        forward.process(&mut kernel_spectrum);
        Self {
            size,
            forward,
            inverse,
            kernel_spectrum,
        }
    }

    /// Full linear convolution, first `len` + kernel - 1 samples.
    fn convolve(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.size];
        for (slot, &v) in buf.iter_mut().zip(x) {
            slot.re = v;
        }
        self.forward.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spectrum) {
            *b *= k;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.size as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Applies `kernel` to a single channel. Zero-phase output is the
/// delay-compensated ("same") convolution; otherwise causal.
pub fn fir_filter(x: &[f64], kernel: &[f64], zero_phase: bool) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let full = FftConvolver::new(kernel, x.len()).convolve(x);
    let delay = if zero_phase { kernel.len() / 2 } else { 0 };
    full[delay..delay + x.len()].to_vec()
}

fn filter_columns<T: Scalar>(samples: &mut [T], n_channels: usize, mask: &[bool], kernel: &[f64], zero_phase: bool) {
    let n_frames = samples.len() / n_channels;
    if n_frames == 0 {
        return;
    }
    let conv = FftConvolver::new(kernel, n_frames);
    let delay = if zero_phase { kernel.len() / 2 } else { 0 };
    for (c, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let x: Vec<f64> = samples
            .iter()
            .skip(c)
            .step_by(n_channels)
            .map(|v| v.to_f64_lossy())
            .collect();
        let y = conv.convolve(&x);
        for f in 0..n_frames {
            samples[f * n_channels + c] = T::of(y[f + delay]);
        }
    }
}

/// Canonical EEG frequency bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
    HighGamma,
}

impl Band {
    pub const ALL: [Band; 6] = [
        Band::Delta,
        Band::Theta,
        Band::Alpha,
        Band::Beta,
        Band::Gamma,
        Band::HighGamma,
    ];

    pub fn edges_hz(self) -> (f64, f64) {
        match self {
            Band::Delta => (0.5, 4.0),
            Band::Theta => (4.0, 8.0),
            Band::Alpha => (8.0, 12.0),
            Band::Beta => (12.0, 30.0),
            Band::Gamma => (30.0, 70.0),
            Band::HighGamma => (70.0, 200.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
            Band::HighGamma => "high_gamma",
        }
    }

    pub fn filter_spec(self) -> FilterSpec {
        let (lo, hi) = self.edges_hz();
        FilterSpec::band_pass(lo, hi)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::UnknownBand(s.to_string()))
    }
}

/// The broadband chain applied before epoching.
#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub band_pass_hz: (f64, f64),
    pub notch: FilterSpec,
    pub per_role_car: bool,
    pub baseline_ms: f64,
    /// Optional extra band isolation of EEG channels.
    pub band: Option<Band>,
    /// Drop EMG channels from the produced epochs.
    pub eeg_only: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_pass_hz: (0.5, 200.0),
            notch: FilterSpec::mains_notch(),
            per_role_car: true,
            baseline_ms: 200.0,
            band: None,
            eeg_only: false,
        }
    }
}

impl PreprocessConfig {
    /// `band` is written as `full` when no isolation is applied. Channel
    /// selection follows the training modality and is not stored here.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("band_pass_low_hz", self.band_pass_hz.0);
        kv.set("band_pass_high_hz", self.band_pass_hz.1);
        kv.set("per_role_car", self.per_role_car);
        kv.set("baseline_ms", self.baseline_ms);
        kv.set("band", self.band.map_or("full", Band::name));
        kv
    }

    pub fn update_from(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("band_pass_low_hz", &mut self.band_pass_hz.0)?;
        kv.take_into("band_pass_high_hz", &mut self.band_pass_hz.1)?;
        kv.take_into("per_role_car", &mut self.per_role_car)?;
        kv.take_into("baseline_ms", &mut self.baseline_ms)?;
        if let Some(b) = kv.take::<String>("band")? {
            self.band = parse_band_choice(&b)?;
        }
        let (lo, hi) = self.band_pass_hz;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config {
                key: "band_pass_low_hz".into(),
                msg: format!("band-pass edges {lo}..{hi} must satisfy 0 < low < high"),
            });
        }
        if !(self.baseline_ms >= 0.0) {
            return Err(Error::Config {
                key: "baseline_ms".into(),
                msg: "must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// `full` (no isolation) or a band name.
pub fn parse_band_choice(s: &str) -> Result<Option<Band>> {
    match s.trim() {
        "full" | "broadband" => Ok(None),
        other => other.parse().map(Some),
    }
}

/// Band-pass → notch comb → CAR → (band isolation) → epoch + baseline for
/// every marker.
pub fn preprocess<T: Scalar>(rec: &RawRecording<T>, cfg: &PreprocessConfig) -> Result<Vec<Epoch<T>>> {
    let (lo, hi) = cfg.band_pass_hz;
    let mut r = rec.apply_filter(&FilterSpec::band_pass(lo, hi), ChannelSelect::All)?;
    r = r.apply_filter(&cfg.notch, ChannelSelect::All)?;
    r = r.common_average_reference(cfg.per_role_car)?;
    if let Some(band) = cfg.band {
        r = r.band_isolate(band)?;
    }
    (0..r.trial_markers.len())
        .map(|i| {
            let e = r.epoch_and_baseline(i, cfg.baseline_ms)?;
            if cfg.eeg_only {
                e.select_role(ChannelRole::Eeg)
            } else {
                Ok(e)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Amplitude of the `freq` component over `x` by direct DFT projection.
    fn tone_amplitude(x: &[f64], rate: f64, freq: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * n as f64 / rate;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        2.0 * (re * re + im * im).sqrt() / x.len() as f64
    }

    fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
    }

    fn interior(x: &[f64], edge: usize) -> &[f64] {
        &x[edge..x.len() - edge]
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn recording(chans: Vec<Vec<f64>>, roles: Vec<ChannelRole>) -> RawRecording<f64> {
        let n = chans[0].len();
        let c = chans.len();
        let mut samples = vec![0.0; n * c];
        for (ci, ch) in chans.iter().enumerate() {
            for (f, v) in ch.iter().enumerate() {
                samples[f * c + ci] = *v;
            }
        }
        RawRecording::new(samples, 1000, roles, vec![]).unwrap()
    }

    #[test]
    fn notch_removes_60hz_sine() {
        let spec = FilterSpec::mains_notch();
        let k = spec.design(1000.0).unwrap();
        let x = sine(60.0, 1000.0, 8000);
        let y = fir_filter(&x, &k, true);
        let edge = k.len() / 2;
        let ratio = rms(interior(&y, edge)) / rms(interior(&x, edge));
        assert!(ratio <= 0.01, "60 Hz rms ratio {ratio}");
        // Harmonics only below 200 Hz at this rate.
        assert_eq!(FilterSpec::notch_harmonics(60.0, 6.0, 200.0, 1000.0), vec![60.0, 120.0, 180.0]);
        assert_eq!(FilterSpec::notch_harmonics(60.0, 6.0, 1e9, 250.0), vec![60.0, 120.0]);
    }

    #[test]
    fn high_pass_removes_dc() {
        let k = FilterSpec::high_pass(2.0).design(1000.0).unwrap();
        let x = vec![5.0; 6000];
        let y = fir_filter(&x, &k, true);
        let edge = k.len() / 2;
        assert!(interior(&y, edge).iter().all(|v| v.abs() < 5e-3), "DC leaks through");
    }

    #[test]
    fn broadband_pass_keeps_10hz_within_1db() {
        let k = FilterSpec::band_pass(0.5, 200.0).design(1000.0).unwrap();
        let x = sine(10.0, 1000.0, 16000);
        let y = fir_filter(&x, &k, true);
        let edge = k.len() / 2;
        let gain_db = 20.0 * (tone_amplitude(interior(&y, edge), 1000.0, 10.0) / tone_amplitude(interior(&x, edge), 1000.0, 10.0)).log10();
        assert!(gain_db.abs() <= 1.0, "gain {gain_db} dB");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(FilterSpec::band_pass(0.5, 600.0).design(1000.0), Err(Error::InvalidSpec(_))));
        assert!(matches!(FilterSpec::band_pass(10.0, 5.0).design(1000.0), Err(Error::InvalidSpec(_))));
        assert!(matches!(FilterSpec::high_pass(500.0).design(1000.0), Err(Error::InvalidSpec(_))));
        assert!(FilterSpec::band_pass(1.0, 40.0).with_taps(100).design(1000.0).is_err());
    }

    #[test]
    fn filter_touches_only_selected_role() {
        let rec = recording(vec![sine(60.0, 1000.0, 3000), sine(60.0, 1000.0, 3000)], vec![ChannelRole::Eeg, ChannelRole::Emg]);
        let out = rec.apply_filter(&FilterSpec::mains_notch(), ChannelSelect::Role(ChannelRole::Emg)).unwrap();
        assert_eq!(out.channel(0), rec.channel(0));
        assert_ne!(out.channel(1), rec.channel(1));
        assert_eq!(out.n_frames(), rec.n_frames());
        let eeg_only = recording(vec![vec![0.0; 10], vec![0.0; 10]], vec![ChannelRole::Eeg; 2]);
        assert!(eeg_only.apply_filter(&FilterSpec::mains_notch(), ChannelSelect::Role(ChannelRole::Emg)).is_err());
    }

    #[test]
    fn car_examples() {
        let rec = recording(vec![vec![1.0], vec![3.0]], vec![ChannelRole::Eeg; 2]);
        let out = rec.common_average_reference(true).unwrap();
        assert_eq!(out.samples(), &[-1.0, 1.0]);
        let again = out.common_average_reference(true).unwrap();
        assert_eq!(again.samples(), out.samples());
        let lone = recording(vec![vec![1.0], vec![3.0], vec![2.0]], vec![ChannelRole::Eeg, ChannelRole::Eeg, ChannelRole::Emg]);
        assert!(lone.common_average_reference(true).is_err());
        assert!(lone.common_average_reference(false).is_ok());
    }

    #[test]
    fn car_per_role_zeroes_each_group() {
        let mut roles = vec![ChannelRole::Eeg; 127];
        roles.extend(vec![ChannelRole::Emg; 10]);
        let chans: Vec<Vec<f64>> = (0..137).map(|c| (0..50).map(|f| ((c * 31 + f * 7) % 17) as f64 - 3.0 * c as f64).collect()).collect();
        let out = recording(chans, roles.clone()).common_average_reference(true).unwrap();
        for frame in out.samples().chunks(137) {
            let eeg: f64 = frame[..127].iter().sum::<f64>() / 127.0;
            let emg: f64 = frame[127..].iter().sum::<f64>() / 10.0;
            assert!(eeg.abs() < 1e-9 && emg.abs() < 1e-9);
        }
    }

    #[test]
    fn epoch_baseline_examples() {
        let mut samples = vec![5.0; 1000];
        samples.extend(vec![7.0; 500]);
        let rec = RawRecording::new(
            samples,
            1000,
            vec![ChannelRole::Eeg],
            vec![TrialMarker { onset: 1000, offset: 1500, sentence_id: "s".into() }],
        )
        .unwrap();
        let e = rec.epoch_and_baseline(0, 200.0).unwrap();
        assert_eq!(e.n_frames(), 500);
        assert!(e.samples().iter().all(|&v| v == 2.0));

        // Index arithmetic: samples 800..999 form the baseline.
        let samples: Vec<f64> = (0..3500).map(|i| if (800..1000).contains(&i) { 1.0 } else { 0.0 }).collect();
        let rec = RawRecording::new(
            samples,
            1000,
            vec![ChannelRole::Eeg],
            vec![TrialMarker { onset: 1000, offset: 3000, sentence_id: "s".into() }],
        )
        .unwrap();
        let e = rec.epoch_and_baseline(0, 200.0).unwrap();
        assert_eq!(e.n_frames(), 2000);
        assert!(e.samples().iter().all(|&v| v == -1.0));

        let rec = RawRecording::new(
            vec![0.0; 400],
            1000,
            vec![ChannelRole::Eeg],
            vec![TrialMarker { onset: 150, offset: 300, sentence_id: "s".into() }],
        )
        .unwrap();
        match rec.epoch_and_baseline(0, 200.0) {
            Err(Error::InsufficientBaseline { needed, available, .. }) => assert_eq!((needed, available), (200, 150)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bands_parse_and_reject_unknown() {
        assert_eq!("high_gamma".parse::<Band>().unwrap(), Band::HighGamma);
        assert_eq!("delta".parse::<Band>().unwrap().edges_hz(), (0.5, 4.0));
        assert!(matches!("kappa".parse::<Band>(), Err(Error::UnknownBand(_))));
    }

    #[test]
    fn zero_phase_keeps_symmetric_pulse_centered() {
        let k = FilterSpec::band_pass(1.0, 40.0).design(1000.0).unwrap();
        let mut x = vec![0.0; 4001];
        for (i, v) in x.iter_mut().enumerate() {
            let d = i as f64 - 2000.0;
            *v = (-d * d / (2.0 * 30.0f64.powi(2))).exp();
        }
        let y = fir_filter(&x, &k, true);
        for d in 1..500 {
            assert!((y[2000 - d] - y[2000 + d]).abs() < 1e-9);
        }
        // Cross-correlation peak at lag zero.
        let xc = |lag: isize| -> f64 {
            (500..3500).map(|i| x[i] * y[(i as isize + lag) as usize]).sum()
        };
        let best = (-50..=50).max_by(|a, b| xc(*a).partial_cmp(&xc(*b)).unwrap()).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn recording_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("rec");
        let rec = RawRecording::<f32>::new(
            (0..30).map(|i| i as f32 * 0.5).collect(),
            1000,
            vec![ChannelRole::Eeg, ChannelRole::Eeg, ChannelRole::Emg],
            vec![TrialMarker { onset: 2, offset: 9, sentence_id: "s01".into() }],
        )
        .unwrap();
        rec.write(&base).unwrap();
        assert_eq!(RawRecording::<f32>::read(&base).unwrap(), rec);
        std::fs::write(base.with_extension("hdr"), "sample_rate_hz 1000\nchannels 2\nroles EEG\n").unwrap();
        assert!(RawRecording::<f32>::read(&base).is_err());
    }

    #[test]
    fn preprocess_config_kv_round_trip() {
        let cfg = PreprocessConfig {
            band: Some(Band::Theta),
            baseline_ms: 150.0,
            ..PreprocessConfig::default()
        };
        let mut kv = KvMap::parse(&cfg.to_kv().to_string()).unwrap();
        let mut back = PreprocessConfig::default();
        back.update_from(&mut kv).unwrap();
        assert!(kv.is_empty());
        assert_eq!(back.band, Some(Band::Theta));
        assert_eq!(back.baseline_ms, 150.0);
        assert_eq!(parse_band_choice("full").unwrap(), None);
        assert!(parse_band_choice("ultra").is_err());
        let mut bad = KvMap::parse("band_pass_low_hz = 300\nband_pass_high_hz = 200").unwrap();
        assert!(PreprocessConfig::default().update_from(&mut bad).is_err());
    }
}
