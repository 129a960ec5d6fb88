//! On-disk corpus layout: sentence manifest, split file, and trial loading.
//!
//! A data directory holds `manifest.tsv` with one record per trial:
//!
//! ```text
//! sentence_id  mode  recording  alignment  target  text
//! ```
//!
//! `recording` is the base path of a [`RawRecording`] whose trial marker
//! carries the same sentence id. `target` is either a `.wav` file (MFCC is
//! extracted on load) or the base of stored [`MfccFrames`]. Paths are
//! relative to the data directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{build_training_target, AudioClip, MfccFrames, FRAME_PERIOD_MS, MFCC_DIM};
use crate::losses::TrialTarget;
use crate::phoneme::{AlignedTranscript, PhonemeInventory};
use crate::scalar::Scalar;
use crate::signalproc::{preprocess, PreprocessConfig, RawRecording};
use crate::tensor::Tensor;
use crate::trainer::{Mode, Trial};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPLIT_FILE: &str = "split.txt";
const HEADER: &str = "sentence_id\tmode\trecording\talignment\ttarget\ttext";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub sentence_id: String,
    pub mode: Mode,
    pub recording: PathBuf,
    pub alignment: PathBuf,
    pub target: PathBuf,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != HEADER {
                    return Err(Error::parse(path, 1, format!("expected header `{HEADER}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(6, '\t').collect();
            let [id, mode, rec, ali, target, txt] = f[..] else {
                return Err(Error::parse(path, i + 1, "expected 6 tab-separated fields"));
            };
            let mode: Mode = mode.parse().map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))?;
            if !seen.insert((id.to_string(), mode)) {
                return Err(Error::parse(path, i + 1, format!("duplicate record {id}/{mode}")));
            }
            records.push(ManifestRecord {
                sentence_id: id.to_string(),
                mode,
                recording: rec.into(),
                alignment: ali.into(),
                target: target.into(),
                text: txt.to_string(),
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = format!("{HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.sentence_id,
                r.mode,
                r.recording.display(),
                r.alignment.display(),
                r.target.display(),
                r.text
            ));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn for_mode(&self, mode: Mode) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.mode == mode)
    }

    pub fn sentence_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.sentence_id.clone()).collect()
    }
}

/// Reads a split file: one held-out sentence id per line, `#` comments.
pub fn read_split(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_split(path: &Path, test_ids: &BTreeSet<String>) -> Result<()> {
    let mut s = String::from("# held-out sentence ids\n");
    for id in test_ids {
        s.push_str(id);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One trial with the metadata needed for scoring and analysis.
#[derive(Clone, Debug)]
pub struct LoadedTrial<T> {
    pub sentence_id: String,
    pub text: String,
    pub transcript: AlignedTranscript,
    pub trial: Trial<T>,
}

/// Loads the reference MFCC and frame labels for one record.
pub fn load_target<T: Scalar>(
    data_dir: &Path,
    record: &ManifestRecord,
    inventory: &PhonemeInventory,
) -> Result<(AlignedTranscript, TrialTarget<T>)> {
    let transcript = AlignedTranscript::read(
        &data_dir.join(&record.alignment),
        &record.sentence_id,
        &record.text,
        inventory,
    )?;
    let path = data_dir.join(&record.target);
    let (mfcc, labels) = if path.extension().is_some_and(|e| e == "wav") {
        build_training_target::<T>(&AudioClip::read_wav(&path)?, &transcript, inventory)?
    } else {
        let m = MfccFrames::<T>::read(&path)?;
        let labels = transcript.frame_labels(FRAME_PERIOD_MS, m.n_frames(), inventory.sil())?;
        (m, labels)
    };
    let mfcc = Tensor::new(vec![mfcc.n_frames(), MFCC_DIM], mfcc.data().to_vec())?;
    Ok((
        transcript,
        TrialTarget {
            mfcc,
            frame_labels: labels,
        },
    ))
}

/// Preprocesses every recording referenced by `mode` records and pairs each
/// epoch with its targets, in manifest order.
pub fn load_trials<T: Scalar>(
    data_dir: &Path,
    manifest: &Manifest,
    mode: Mode,
    pre: &PreprocessConfig,
    inventory: &PhonemeInventory,
) -> Result<Vec<LoadedTrial<T>>> {
    let mut epochs = BTreeMap::new();
    let records: Vec<&ManifestRecord> = manifest.for_mode(mode).collect();
    let recordings: BTreeSet<&PathBuf> = records.iter().map(|r| &r.recording).collect();
    for rec_path in recordings {
        let rec = RawRecording::<T>::read(&data_dir.join(rec_path))?;
        for e in preprocess(&rec, pre)? {
            epochs.insert((rec_path.clone(), e.sentence_id.clone()), e);
        }
    }
    records
        .into_iter()
        .map(|r| {
            let signal = epochs
                .remove(&(r.recording.clone(), r.sentence_id.clone()))
                .ok_or_else(|| {
                    Error::invalid(format!("{}: no trial marker for {}", r.recording.display(), r.sentence_id))
                })?;
            let (transcript, target) = load_target(data_dir, r, inventory)?;
            Ok(LoadedTrial {
                sentence_id: r.sentence_id.clone(),
                text: r.text.clone(),
                transcript,
                trial: Trial { signal, target },
            })
        })
        .collect()
}

/// Splits loaded trials into (train, test) by sentence id.
pub fn split_by_sentence<T: Clone>(trials: Vec<LoadedTrial<T>>, test_ids: &BTreeSet<String>) -> (Vec<LoadedTrial<T>>, Vec<LoadedTrial<T>>) {
    trials.into_iter().partition(|t| !test_ids.contains(&t.sentence_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_and_split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            records: vec![ManifestRecord {
                sentence_id: "s001".into(),
                mode: Mode::Whispered,
                recording: "recordings/whispered".into(),
                alignment: "alignments/s001.txt".into(),
                target: "targets/s001".into(),
                text: "what a wonderful world".into(),
            }],
        };
        let p = dir.path().join(MANIFEST_FILE);
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
        std::fs::write(&p, "bad header\n").unwrap();
        assert!(Manifest::read(&p).is_err());

        let ids: BTreeSet<String> = ["s003", "s001"].iter().map(|s| s.to_string()).collect();
        let sp = dir.path().join(SPLIT_FILE);
        write_split(&sp, &ids).unwrap();
        assert_eq!(read_split(&sp).unwrap(), ids);
    }
}
