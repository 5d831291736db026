//! Dataset manifests: `path,label,track_id,split` CSV files and the
//! track-level split checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub label: String,
    pub track_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Sorted class names; labels index into this list.
    pub classes: Vec<String>,
}

impl Manifest {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("manifest has no records".into()));
        }
        let classes: BTreeSet<_> = records.iter().map(|r| r.label.clone()).collect();
        Ok(Self {
            records,
            classes: classes.into_iter().collect(),
        })
    }

    /// Reads a manifest; relative audio paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::file(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "track_id", "split"] {
            return Err(Error::file(
                path,
                format!("header must be `path,label,track_id,split`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::file(path, e))?;
            let split = row[3].parse().map_err(|e| Error::file(path, format!("row {}: {e}", i + 2)))?;
            let p = PathBuf::from(&row[0]);
            records.push(Record {
                path: if p.is_absolute() { p } else { base.join(p) },
                label: row[1].to_string(),
                track_id: row[2].to_string(),
                split,
            });
        }
        Self::new(records).map_err(|e| Error::file(path, e))
    }

    /// Writes the manifest with paths relative to `path`'s directory where
    /// possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        w.write_record(["path", "label", "track_id", "split"])?;
        for r in &self.records {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            w.write_record([&p.to_string_lossy(), r.label.as_str(), r.track_id.as_str(), &r.split.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Every record's audio must exist and be a readable WAV header.
    pub fn check_files(&self) -> Vec<(PathBuf, String)> {
        self.records
            .iter()
            .filter_map(|r| match hound::WavReader::open(&r.path) {
                Ok(_) => None,
                Err(e) => Some((r.path.clone(), e.to_string())),
            })
            .collect()
    }

    /// When no record is marked `val`, moves a random `fraction` of the
    /// training tracks (whole tracks, never single segments) to validation.
    pub fn ensure_validation(&mut self, fraction: f64, seed: u64) {
        if fraction <= 0.0 || self.count(Split::Val) > 0 {
            return;
        }
        let mut tracks: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.track_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tracks.shuffle(&mut rng);
        let k = ((tracks.len() as f64 * fraction).round() as usize).min(tracks.len().saturating_sub(1));
        let chosen: BTreeSet<_> = tracks.into_iter().take(k).collect();
        for r in &mut self.records {
            if r.split == Split::Train && chosen.contains(&r.track_id) {
                r.split = Split::Val;
            }
        }
    }
}

/// Track ids that occur in more than one split, sorted.
pub fn split_violations(records: &[Record]) -> Vec<String> {
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in records {
        seen.entry(&r.track_id).or_default().insert(r.split);
    }
    seen.into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(t, _)| t.to_string())
        .collect()
}

/// Ok iff no track crosses a split boundary.
pub fn validate_split(m: &Manifest) -> Result<()> {
    let v = split_violations(&m.records);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(v))
    }
}
