use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::keyed_rng;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split tag {other:?}"))),
        }
    }
}

/// One manifest row. `attribute_id` may be absent, which evaluation never
/// needs; training records must carry it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub class_id: usize,
    pub attribute_id: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    path: String,
    class_id: usize,
    attribute_id: Option<usize>,
    split: String,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Number of classes, taken as one past the largest class id.
    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    /// Class → attribute map from the records that carry attributes.
    pub fn class_attributes(&self) -> Result<ClassAttributeMap> {
        let mut map = BTreeMap::new();
        for r in &self.records {
            if let Some(a) = r.attribute_id {
                if let Some(prev) = map.insert(r.class_id, a) {
                    if prev != a {
                        return Err(Error::Dataset(format!(
                            "class {} has attributes {prev} and {a}",
                            r.class_id
                        )));
                    }
                }
            }
        }
        Ok(ClassAttributeMap(map))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(Error::Dataset(format!("path {} listed twice", r.path.display())));
            }
            if r.split == Split::Train && r.attribute_id.is_none() {
                return Err(Error::Dataset(format!(
                    "training record {} has no attribute",
                    r.path.display()
                )));
            }
        }
        self.class_attributes()?;
        Ok(())
    }

    /// Checks needed before training: every class has training samples and
    /// every class seen in val/test has a known attribute.
    pub fn check_trainable(&self) -> Result<()> {
        let train: BTreeSet<usize> = self.split(Split::Train).map(|r| r.class_id).collect();
        if train.is_empty() {
            return Err(Error::Dataset("train split is empty".to_string()));
        }
        if self.split_len(Split::Val) == 0 {
            return Err(Error::Dataset("val split is empty".to_string()));
        }
        for c in 0..self.num_classes() {
            if !train.contains(&c) {
                return Err(Error::Dataset(format!("class {c} has no training samples")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let expected = ["path", "class_id", "attribute_id", "split"];
        if headers.iter().ne(expected) {
            return Err(Error::Dataset(format!(
                "{}: header must be {}",
                path.display(),
                expected.join(",")
            )));
        }
        let mut records = Vec::new();
        for row in reader.deserialize::<CsvRow>() {
            let row = row.map_err(|e| csv_error(path, e))?;
            records.push(Record {
                path: PathBuf::from(row.path),
                class_id: row.class_id,
                attribute_id: row.attribute_id,
                split: row.split.parse()?,
            });
        }
        Self::new(root, records)
    }

    /// Write as CSV; paths are stored as given (relative to the manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            writer
                .serialize(CsvRow {
                    path: r.path.to_string_lossy().replace('\\', "/"),
                    class_id: r.class_id,
                    attribute_id: r.attribute_id,
                    split: r.split.to_string(),
                })
                .map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Copy of this manifest with attribute ids removed from the given split.
    pub fn without_attributes(&self, split: Split) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| Record {
                attribute_id: if r.split == split { None } else { r.attribute_id },
                ..r.clone()
            })
            .collect();
        Self {
            root: self.root.clone(),
            records,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => return Error::io(path, io),
            _ => unreachable!(),
        }
    }
    Error::Dataset(format!("{}: {e}", path.display()))
}

/// Class-level attribute lookup.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ClassAttributeMap(BTreeMap<usize, usize>);

impl ClassAttributeMap {
    pub fn new(map: BTreeMap<usize, usize>) -> Self {
        Self(map)
    }

    pub fn get(&self, class_id: usize) -> Option<usize> {
        self.0.get(&class_id).copied()
    }

    pub fn attribute_of(&self, class_id: usize) -> Result<usize> {
        self.get(class_id)
            .ok_or_else(|| Error::Dataset(format!("class {class_id} has no attribute")))
    }

    pub fn attributes(&self) -> BTreeSet<usize> {
        self.0.values().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(|(&c, &a)| (c, a))
    }
}

/// Protocol for assigning split tags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitProtocol {
    /// Per class: `train_frac` of the samples go to training, the rest to
    /// test; one training sample per class is then moved to val.
    AwaStyle { train_frac: f64 },
    /// Keep the split tags already on the records.
    FixedManifest,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol::AwaStyle { train_frac: 0.7 }
    }
}

/// Assign splits to records. Under `AwaStyle` the incoming split tags are
/// ignored.
pub fn split_dataset(
    root: impl Into<PathBuf>,
    mut records: Vec<Record>,
    protocol: SplitProtocol,
    seed: u64,
) -> Result<DatasetManifest> {
    if let SplitProtocol::AwaStyle { train_frac } = protocol {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::InvalidArgument(format!("train_frac {train_frac} outside (0, 1)")));
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_class.entry(r.class_id).or_default().push(i);
        }
        for (&class, idx) in &mut by_class {
            if idx.len() < 3 {
                return Err(Error::Dataset(format!(
                    "class {class} has {} samples; awa-style split needs at least 3",
                    idx.len()
                )));
            }
            idx.shuffle(&mut keyed_rng(seed, class as u64, STREAM_SPLIT));
            let n_train = ((idx.len() as f64 * train_frac).round() as usize).clamp(2, idx.len() - 1);
            for (k, &i) in idx.iter().enumerate() {
                records[i].split = match k {
                    0 => Split::Val,
                    k if k < n_train => Split::Train,
                    _ => Split::Test,
                };
            }
        }
    }
    DatasetManifest::new(root, records)
}

const STREAM_SPLIT: u64 = 0x5e11;

/// Write `bytes` to `path` through a temporary file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(classes: usize, per_class: usize) -> Vec<Record> {
        (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| Record {
                    path: PathBuf::from(format!("c{c}/{i}.png")),
                    class_id: c,
                    attribute_id: Some(c % 2),
                    split: Split::Train,
                })
            })
            .collect()
    }

    #[test]
    fn awa_split_counts() {
        let m = split_dataset("", records(3, 10), SplitProtocol::default(), 1).unwrap();
        for c in 0..3 {
            let count = |s| m.split(s).filter(|r| r.class_id == c).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 1, 3));
        }
    }

    #[test]
    fn split_is_seeded_partition() {
        let a = split_dataset("", records(4, 9), SplitProtocol::default(), 7).unwrap();
        let b = split_dataset("", records(4, 9), SplitProtocol::default(), 7).unwrap();
        let c = split_dataset("", records(4, 9), SplitProtocol::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut paths: Vec<_> = a.records().iter().map(|r| r.path.clone()).collect();
        paths.sort();
        let mut input: Vec<_> = records(4, 9).into_iter().map(|r| r.path).collect();
        input.sort();
        assert_eq!(paths, input);
    }

    #[test]
    fn small_class_rejected_by_name() {
        let mut recs = records(2, 5);
        recs.retain(|r| r.class_id == 0 || r.path.to_string_lossy().starts_with("c1/0"));
        let err = split_dataset("", recs, SplitProtocol::default(), 1).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn fixed_manifest_keeps_tags() {
        let mut recs = records(2, 3);
        recs[1].split = Split::Test;
        recs[2].split = Split::Val;
        let m = split_dataset("", recs.clone(), SplitProtocol::FixedManifest, 1).unwrap();
        assert_eq!(m.records(), &recs[..]);
    }

    #[test]
    fn csv_round_trip_and_missing_attributes() {
        let dir = tempfile::tempdir().unwrap();
        let m = split_dataset(dir.path(), records(2, 5), SplitProtocol::default(), 3).unwrap();
        let m = m.without_attributes(Split::Test);
        let path = dir.path().join("manifest.csv");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.split(Split::Test).all(|r| r.attribute_id.is_none()));
        assert_eq!(back.class_attributes().unwrap().get(1), Some(1));
    }

    #[test]
    fn inconsistent_attribute_rejected() {
        let mut recs = records(1, 3);
        recs[2].attribute_id = Some(5);
        assert!(DatasetManifest::new("", recs).is_err());
        let mut recs = records(1, 3);
        recs[1].path = recs[0].path.clone();
        assert!(DatasetManifest::new("", recs).is_err());
    }
}
