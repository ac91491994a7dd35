//! Dataset plumbing: manifest files, tag vocabularies, label matrices, and
//! a seeded synthetic audio generator for desk-scale experiments.
//!
//! A manifest is a CSV with header `clip_id,path,split,tags`; the tags
//! field holds `|`-separated names and may be empty. Fields are plain text
//! without quoting, so they must not contain commas. Relative paths are
//! resolved against the manifest's directory at load time.

mod synth;

pub use synth::{detector_scores, render_clip, synth_generate, tags_for, SynthConfig, TAG_NAMES};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use crate::audio::WavError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: io::Error },
    Parse { path: PathBuf, line: usize, detail: String },
    MissingFile(PathBuf),
    InvalidRequest(String),
    Wav { path: PathBuf, source: WavError },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Parse { path, line, detail } => {
                write!(f, "{}:{line}: {detail}", path.display())
            }
            DataError::MissingFile(path) => write!(f, "{}: file not found", path.display()),
            DataError::InvalidRequest(detail) => f.write_str(detail),
            DataError::Wav { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for DataError {}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub split: Split,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

const MANIFEST_HEADER: &str = "clip_id,path,split,tags";

/// Loads a manifest, resolving relative paths against its directory and
/// checking that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, detail: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, MANIFEST_HEADER)) => {}
        Some((_, other)) => {
            return Err(err(1, format!("bad header '{other}', want '{MANIFEST_HEADER}'")))
        }
        None => return Err(err(1, "empty manifest".to_string())),
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 4 {
            return Err(err(line, format!("want 4 fields, got {}", fields.len())));
        }
        let clip_id = fields[0].to_string();
        if clip_id.is_empty() {
            return Err(err(line, "empty clip_id".to_string()));
        }
        if !seen.insert(clip_id.clone()) {
            return Err(err(line, format!("duplicate clip_id '{clip_id}'")));
        }
        let split = Split::parse(fields[2])
            .ok_or_else(|| err(line, format!("unknown split '{}'", fields[2])))?;
        let rel = Path::new(fields[1]);
        let resolved = if rel.is_absolute() { rel.to_path_buf() } else { base.join(rel) };
        if !resolved.is_file() {
            return Err(DataError::MissingFile(resolved));
        }
        let tags: Vec<String> = fields[3]
            .split('|')
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        entries.push(ManifestEntry { clip_id, path: resolved, split, tags });
    }
    Ok(Manifest { entries })
}

/// Writes entries with their paths exactly as stored.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in &manifest.entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.clip_id,
            e.path.display(),
            e.split,
            e.tags.join("|")
        ));
    }
    std::fs::write(path, out).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagVocabulary {
    pub tags: Vec<String>,
    pub counts: Vec<usize>,
}

impl TagVocabulary {
    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

/// The `k` most frequent tags of the training split, most frequent first,
/// count ties broken lexicographically.
pub fn build_vocab(manifest: &Manifest, k: usize) -> Result<TagVocabulary, DataError> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n_train = 0usize;
    for entry in manifest.split(Split::Train) {
        n_train += 1;
        let unique: HashSet<&str> = entry.tags.iter().map(String::as_str).collect();
        for tag in unique {
            *counts.entry(tag).or_insert(0) += 1;
        }
    }
    if n_train == 0 {
        return Err(DataError::InvalidRequest("training split is empty".to_string()));
    }
    if counts.len() < k {
        return Err(DataError::InvalidRequest(format!(
            "vocabulary of {k} tags requested but the training split has only {} distinct",
            counts.len()
        )));
    }
    let mut pairs: Vec<(&str, usize)> = counts.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    pairs.truncate(k);
    Ok(TagVocabulary {
        tags: pairs.iter().map(|(t, _)| t.to_string()).collect(),
        counts: pairs.iter().map(|(_, c)| *c).collect(),
    })
}

/// Binary labels for one split, aligned with the clip index; optionally
/// drops clips that carry none of the vocabulary tags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub clip_ids: Vec<String>,
    pub paths: Vec<PathBuf>,
    /// `labels[i * k + j]`, one row per kept clip.
    pub labels: Vec<f32>,
    pub k: usize,
    pub n_unique_rows: usize,
}

impl LabelMatrix {
    pub fn n(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.labels[i * self.k..(i + 1) * self.k]
    }
}

pub fn label_matrix(
    manifest: &Manifest,
    vocab: &TagVocabulary,
    split: Split,
    drop_untagged: bool,
) -> LabelMatrix {
    let k = vocab.tags.len();
    let mut clip_ids = Vec::new();
    let mut paths = Vec::new();
    let mut labels = Vec::new();
    let mut unique: HashSet<Vec<u8>> = HashSet::new();
    for entry in manifest.split(split) {
        let mut row = vec![0.0f32; k];
        for tag in &entry.tags {
            if let Some(j) = vocab.index_of(tag) {
                row[j] = 1.0;
            }
        }
        if drop_untagged && row.iter().all(|&v| v == 0.0) {
            continue;
        }
        unique.insert(row.iter().map(|&v| v as u8).collect());
        clip_ids.push(entry.clip_id.clone());
        paths.push(entry.path.clone());
        labels.extend_from_slice(&row);
    }
    LabelMatrix { clip_ids, paths, labels, k, n_unique_rows: unique.len() }
}
