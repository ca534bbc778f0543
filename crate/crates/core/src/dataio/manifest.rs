use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?} (expected train, test or val)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest, relative to `DatasetManifest::root`.
    pub path: String,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("manifest has no entries"));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest path {:?}", e.path)));
            }
        }
        let num_classes = entries.iter().map(|e| e.class_id).max().unwrap_or(0) + 1;
        Ok(Self {
            entries,
            num_classes,
            root: root.into(),
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> + '_ {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path, e.class_id, e.split));
        }
        out
    }
}

/// Reads a `path<TAB>class_id<TAB>split` manifest. Blank lines and lines
/// starting with `#` are skipped. Image paths are relative to the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path, root)
}

pub fn parse_manifest(text: &str, origin: &Path, root: PathBuf) -> Result<DatasetManifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(err(lineno, "empty image path".into()));
        }
        let class_id = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| err(lineno, format!("bad class id {:?}: {e}", fields[1])))?;
        let split = fields[2].trim().parse::<Split>().map_err(|e| err(lineno, e))?;
        entries.push(ManifestEntry {
            path: fields[0].to_string(),
            class_id,
            split,
        });
    }
    if entries.is_empty() {
        return Err(err(0, "manifest is empty".into()));
    }
    DatasetManifest::new(entries, root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text, Path::new("m.tsv"), PathBuf::new())
    }

    #[test]
    fn two_classes() {
        let m = parse("a.png\t0\ttrain\nb.png\t1\ttest\n").unwrap();
        assert_eq!(m.num_classes, 2);
        assert_eq!(m.entries.len(), 2);
    }

    #[test]
    fn class_count_is_max_plus_one() {
        let m = parse("img.png\t3\ttrain\nx.png\t0\ttest\n# comment\n\n").unwrap();
        assert_eq!(m.num_classes, 4);
    }

    #[test]
    fn missing_split_names_line() {
        match parse("img.png\t3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_duplicate_rejected() {
        assert!(parse("# only a comment\n").is_err());
        assert!(parse("a.png\t0\ttrain\na.png\t1\ttest\n").is_err());
        assert!(parse("a.png\tzero\ttrain\n").is_err());
        assert!(parse("a.png\t0\tholdout\n").is_err());
    }
}
