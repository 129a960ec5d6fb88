//! The 40-class phoneme label space, group taxonomy, transcription parsing
//! and frame-level alignment ingestion.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Class count: 39 ARPAbet phonemes plus silence.
pub const NUM_CLASSES: usize = 40;

pub const SIL: &str = "sil";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhonemeGroup {
    Vowels,
    Diphthongs,
    Stops,
    Affricates,
    Fricatives,
    Nasals,
    Liquids,
    Semivowels,
    Silence,
}

impl PhonemeGroup {
    pub const ALL: [PhonemeGroup; 9] = [
        PhonemeGroup::Vowels,
        PhonemeGroup::Diphthongs,
        PhonemeGroup::Stops,
        PhonemeGroup::Affricates,
        PhonemeGroup::Fricatives,
        PhonemeGroup::Nasals,
        PhonemeGroup::Liquids,
        PhonemeGroup::Semivowels,
        PhonemeGroup::Silence,
    ];
}

impl fmt::Display for PhonemeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

const GROUPS: [(PhonemeGroup, &[&str]); 8] = [
    (
        PhonemeGroup::Vowels,
        &["iy", "ih", "eh", "ae", "aa", "ao", "uh", "uw", "ah", "er"],
    ),
    (PhonemeGroup::Diphthongs, &["ey", "ay", "aw", "oy", "ow"]),
    (PhonemeGroup::Stops, &["p", "b", "t", "d", "k", "g"]),
    (PhonemeGroup::Affricates, &["ch", "jh"]),
    (
        PhonemeGroup::Fricatives,
        &["f", "v", "th", "dh", "s", "z", "sh", "zh", "hh"],
    ),
    (PhonemeGroup::Nasals, &["m", "n", "ng"]),
    (PhonemeGroup::Liquids, &["l", "r"]),
    (PhonemeGroup::Semivowels, &["w", "y"]),
];

/// Ordered label set with index lookup. `sil` is index 0, followed by the
/// phonemes group by group.
#[derive(Clone, Debug)]
pub struct PhonemeInventory {
    labels: Vec<&'static str>,
    groups: Vec<PhonemeGroup>,
    index: HashMap<&'static str, usize>,
}

impl Default for PhonemeInventory {
    fn default() -> Self {
        Self::arpabet()
    }
}

impl PhonemeInventory {
    pub fn arpabet() -> Self {
        let mut labels = vec![SIL];
        let mut groups = vec![PhonemeGroup::Silence];
        for (g, members) in GROUPS {
            for &m in members {
                labels.push(m);
                groups.push(g);
            }
        }
        let index = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        Self {
            labels,
            groups,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sil(&self) -> usize {
        0
    }

    pub fn labels(&self) -> &[&'static str] {
        &self.labels
    }

    pub fn symbol(&self, idx: usize) -> &'static str {
        self.labels[idx]
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    pub fn group_of(&self, idx: usize) -> PhonemeGroup {
        self.groups[idx]
    }

    /// Indices belonging to `group`, in label order.
    pub fn members(&self, group: PhonemeGroup) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == group).collect()
    }

    /// Parses a slash-delimited, comma-separated transcription such as
    /// `/sil, d, ih, d, sil/`.
    pub fn parse_transcription(&self, line: &str) -> Result<Vec<usize>> {
        let body = line.trim();
        let body = body
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .unwrap_or(body);
        let body = body
            .trim()
            .strip_prefix('/')
            .and_then(|s| s.strip_suffix('/'))
            .ok_or_else(|| Error::invalid(format!("transcription not slash-delimited: {line:?}")))?;
        body.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.index_of(s))
            .collect()
    }

    pub fn format_transcription(&self, seq: &[usize]) -> String {
        let syms: Vec<_> = seq.iter().map(|&i| self.symbol(i)).collect();
        format!("/{}/", syms.join(", "))
    }
}

/// One aligned phoneme interval in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub phoneme: usize,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTranscript {
    pub sentence_id: String,
    pub text: String,
    pub segments: Vec<Segment>,
}

impl AlignedTranscript {
    pub fn duration_ms(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end_ms)
    }

    pub fn phonemes(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.phoneme).collect()
    }

    /// Segments must be sorted, non-overlapping and non-empty.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.end_ms > s.start_ms) || s.start_ms < 0.0 {
                return Err(Error::invalid(format!(
                    "{}: segment {i} has empty or negative span [{}, {})",
                    self.sentence_id, s.start_ms, s.end_ms
                )));
            }
            if i > 0 && s.start_ms < self.segments[i - 1].end_ms {
                return Err(Error::invalid(format!(
                    "{}: segment {i} starts at {} before previous end {}",
                    self.sentence_id,
                    s.start_ms,
                    self.segments[i - 1].end_ms
                )));
            }
        }
        Ok(())
    }

    /// Per-frame class indices sampled at frame centers.
    ///
    /// A center exactly on a boundary belongs to the later segment. Frames
    /// past the last segment (and in gaps) are silence.
    pub fn frame_labels(&self, frame_period_ms: f64, n_frames: usize, sil: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if n_frames as f64 * frame_period_ms + frame_period_ms < self.duration_ms() {
            return Err(Error::invalid(format!(
                "{}: {n_frames} frames of {frame_period_ms} ms do not cover {} ms",
                self.sentence_id,
                self.duration_ms()
            )));
        }
        let mut labels = Vec::with_capacity(n_frames);
        let mut seg = 0;
        for t in 0..n_frames {
            let center = (t as f64 + 0.5) * frame_period_ms;
            while seg < self.segments.len() && self.segments[seg].end_ms <= center {
                seg += 1;
            }
            let label = match self.segments.get(seg) {
                Some(s) if s.start_ms <= center => s.phoneme,
                _ => sil,
            };
            labels.push(label);
        }
        Ok(labels)
    }

    /// Reads a `phoneme start_ms end_ms` alignment file.
    pub fn read(path: &Path, sentence_id: &str, text: &str, inventory: &PhonemeInventory) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut segments = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<_> = line.split_whitespace().collect();
            let [sym, start, end] = fields[..] else {
                return Err(Error::parse(path, lineno + 1, "expected `phoneme start_ms end_ms`"));
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, lineno + 1, format!("bad number `{s}`")))
            };
            segments.push(Segment {
                phoneme: inventory
                    .index_of(sym)
                    .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?,
                start_ms: num(start)?,
                end_ms: num(end)?,
            });
        }
        let t = Self {
            sentence_id: sentence_id.to_string(),
            text: text.to_string(),
            segments,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn write(&self, path: &Path, inventory: &PhonemeInventory) -> Result<()> {
        let mut out = String::new();
        for s in &self.segments {
            out.push_str(&format!("{} {} {}\n", inventory.symbol(s.phoneme), s.start_ms, s.end_ms));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Merges consecutive duplicates.
pub fn collapse(frames: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(frames.len());
    for &f in frames {
        if out.last() != Some(&f) {
            out.push(f);
        }
    }
    out
}
