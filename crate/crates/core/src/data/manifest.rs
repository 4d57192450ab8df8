//! Dataset manifest: a CSV with header `path,person_id,camera_id,split`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, IoContext, Result};

pub const MANIFEST_HEADER: &str = "path,person_id,camera_id,split";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?} (expected pretrain, train, query or gallery)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub person_id: u64,
    pub camera_id: u64,
    pub split: Split,
}

/// Parses manifest text. `source_name` only labels error messages.
pub fn parse_manifest(text: &str, source_name: &str) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, msg: String| Error::Parse { source_name: source_name.to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(err(1, format!("expected header {MANIFEST_HEADER:?}, found {header:?}")));
        }
        None => return Err(err(1, format!("missing header {MANIFEST_HEADER:?}"))),
    }
    let mut entries = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err(line_no, format!("expected 4 columns, found {}", fields.len())));
        }
        let path = fields[0].trim();
        if path.is_empty() {
            return Err(err(line_no, "empty path".into()));
        }
        let person_id = fields[1]
            .trim()
            .parse::<u64>()
            .map_err(|_| err(line_no, format!("person_id {:?} is not a non-negative integer", fields[1])))?;
        let camera_id = fields[2]
            .trim()
            .parse::<u64>()
            .map_err(|_| err(line_no, format!("camera_id {:?} is not a non-negative integer", fields[2])))?;
        let split = fields[3].trim().parse::<Split>().map_err(|m| err(line_no, m))?;
        entries.push(ManifestEntry { path: path.to_string(), person_id, camera_id, split });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!("{},{},{},{}\n", e.path, e.person_id, e.camera_id, e.split));
    }
    out
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, render_manifest(entries)).at(path)
}

/// A loaded manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let entries = load_manifest(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<super::Image> {
        let path = self.image_path(entry);
        let bytes = std::fs::read(&path).at(&path)?;
        super::decode_ppm(&bytes).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }
}
