//! Dataset indexing, stratified splitting, the split manifest, image
//! loading, augmentation, histogram checks and the synthetic dataset.

mod augment;
mod histogram;
mod loader;
mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub use augment::{augment, AugmentKind, AugmentOp, AugmentPolicy, RAND_AUGMENT_MENU};
pub use histogram::{histogram_check, luma_histogram, HistogramReport};
pub use loader::{decode_image, Batch, Loader};
pub use synth::{synth_dataset, template, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn value(self) -> f32 {
        self as u8 as f32
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    fn from_dir(name: &str) -> Option<Self> {
        match name {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: Label,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub seed: Option<u64>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn class_files(root: &Path, rel: &str, label: Label, split: Option<Split>, out: &mut Vec<Record>) -> Result<()> {
    let dir = root.join(rel);
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image(&path) {
            out.push(Record {
                path: format!("{rel}/{}", entry.file_name().to_string_lossy()),
                label,
                split,
            });
        }
    }
    Ok(())
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn full_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn count(&self, split: Option<Split>, label: Label) -> usize {
        self.records
            .iter()
            .filter(|r| r.label == label && (split.is_none() || r.split == split))
            .count()
    }

    /// Manifest text: `path<TAB>label<TAB>split`, one line per record.
    pub fn to_manifest(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let split = r
                .split
                .ok_or_else(|| Error::Dataset(format!("{} has no split assigned", r.path)))?;
            out.push_str(&format!("{}\t{}\t{}\n", r.path, r.label as u8, split));
        }
        Ok(out)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = self.to_manifest()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn from_manifest(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Dataset(format!("manifest line {}: `{line}`", n + 1));
            let mut parts = line.split('\t');
            let (path, label, split) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(l), Some(s), None) => (p, l, s),
                _ => return Err(bad()),
            };
            let label = match label {
                "0" => Label::Real,
                "1" => Label::Fake,
                _ => return Err(bad()),
            };
            records.push(Record {
                path: path.to_string(),
                label,
                split: Some(split.parse().map_err(|_| bad())?),
            });
        }
        if records.is_empty() {
            return Err(Error::Dataset("manifest has no records".into()));
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            records,
            seed: None,
        })
    }

    pub fn read_manifest(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(&text, root)
    }
}

/// Index `root/{real,fake}/*` or `root/{train,valid,test}/{real,fake}/*`.
/// Records are sorted by relative path; only PNG and JPEG files count.
pub fn scan_directory(root: &Path) -> Result<DatasetIndex> {
    let mut records = Vec::new();
    let top = subdirs(root)?;
    let is_class = |d: &str| Label::from_dir(d).is_some();
    if top.iter().any(|d| is_class(d)) {
        for d in &top {
            let label = Label::from_dir(d)
                .ok_or_else(|| Error::Dataset(format!("unknown class directory `{d}` in {}", root.display())))?;
            class_files(root, d, label, None, &mut records)?;
        }
    } else {
        for d in &top {
            let split: Split = d
                .parse()
                .map_err(|_| Error::Dataset(format!("unknown directory `{d}` in {}", root.display())))?;
            for c in subdirs(&root.join(d))? {
                let label =
                    Label::from_dir(&c).ok_or_else(|| Error::Dataset(format!("unknown class directory `{d}/{c}`")))?;
                class_files(root, &format!("{d}/{c}"), label, Some(split), &mut records)?;
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
        seed: None,
    })
}

/// Train/validation/test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Stratified split. Within each class the items are shuffled under
/// `seed`; validation and test get `floor(n * fraction)` items each and
/// train takes the remainder. Record order is preserved.
pub fn split_dataset(index: &DatasetIndex, fractions: [f64; 3], seed: u64) -> Result<DatasetIndex> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut out = index.clone();
    out.seed = Some(seed);
    for label in [Label::Real, Label::Fake] {
        let mut members: Vec<usize> = (0..index.records.len())
            .filter(|&i| index.records[i].label == label)
            .collect();
        let n = members.len();
        members.shuffle(&mut seeded(derive_seed(seed, label as u64)));
        let take = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
        let (n_val, n_test) = (take(fractions[1]), take(fractions[2]));
        let n_train = n - n_val - n_test;
        for (split, size, fraction) in [
            (Split::Val, n_val, fractions[1]),
            (Split::Test, n_test, fractions[2]),
            (Split::Train, n_train, fractions[0]),
        ] {
            if fraction > 0.0 && size == 0 {
                return Err(Error::ClassStarvation {
                    class: label.name().to_string(),
                    split: split.name().to_string(),
                });
            }
        }
        for (k, &i) in members.iter().enumerate() {
            out.records[i].split = Some(if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(real: usize, fake: usize) -> DatasetIndex {
        let mut records = Vec::new();
        for i in 0..real {
            records.push(Record {
                path: format!("real/{i:05}.png"),
                label: Label::Real,
                split: None,
            });
        }
        for i in 0..fake {
            records.push(Record {
                path: format!("fake/{i:05}.png"),
                label: Label::Fake,
                split: None,
            });
        }
        DatasetIndex {
            root: PathBuf::from("."),
            records,
            seed: None,
        }
    }

    fn sizes(ix: &DatasetIndex, label: Label) -> [usize; 3] {
        Split::ALL.map(|s| ix.count(Some(s), label))
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(&index(100, 100), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!(sizes(&s, Label::Real), [70, 15, 15]);
        assert_eq!(sizes(&s, Label::Fake), [70, 15, 15]);
        let s = split_dataset(&index(101, 101), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!(sizes(&s, Label::Real), [71, 15, 15]);
        let s = split_dataset(&index(5, 5), [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(sizes(&s, Label::Fake), [5, 0, 0]);
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(&index(10, 10), [0.5, 0.2, 0.2], 0).is_err());
        assert!(matches!(
            split_dataset(&index(10, 0), DEFAULT_FRACTIONS, 0),
            Err(Error::ClassStarvation { .. })
        ));
        assert!(matches!(
            split_dataset(&index(3, 3), DEFAULT_FRACTIONS, 0),
            Err(Error::ClassStarvation { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let s = split_dataset(&index(20, 20), DEFAULT_FRACTIONS, 9).unwrap();
        let text = s.to_manifest().unwrap();
        let back = DatasetIndex::from_manifest(&text, Path::new(".")).unwrap();
        assert_eq!(back.records, s.records);
        assert!(DatasetIndex::from_manifest("a\t2\ttrain\n", Path::new(".")).is_err());
        let v = DatasetIndex::from_manifest("a.png\t1\tvalid\n", Path::new(".")).unwrap();
        assert_eq!(v.records[0].split, Some(Split::Val));
    }
}
