//! Label files, the maturity taxonomy, dataset manifests with a seeded
//! 90:10 split, and the training-config file consumed by external trainers.

use std::fmt::{self, Write as _};
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::SplitMix64;

pub use crate::image::{read_image, write_image, ImageError, RasterImage};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown class {class} at line {line}")]
    UnknownClass { class: String, line: usize },
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaturityClass {
    Immature = 0,
    NearlyMature = 1,
    Mature = 2,
}

impl MaturityClass {
    pub const ALL: [MaturityClass; 3] = [MaturityClass::Immature, MaturityClass::NearlyMature, MaturityClass::Mature];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MaturityClass::Immature => "immature",
            MaturityClass::NearlyMature => "nearly_mature",
            MaturityClass::Mature => "mature",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for MaturityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One labelled object, normalised to the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRecord {
    pub class: MaturityClass,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// Parses `class cx cy w h` lines; blank lines are skipped.
pub fn parse_label_file(text: &str) -> Result<Vec<LabelRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(DatasetError::BadLine {
                line: line_no,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let class = fields[0]
            .parse::<usize>()
            .ok()
            .and_then(MaturityClass::from_id)
            .ok_or_else(|| DatasetError::UnknownClass {
                class: fields[0].to_string(),
                line: line_no,
            })?;
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            let x: f32 = f.parse().map_err(|_| DatasetError::BadLine {
                line: line_no,
                msg: format!("bad number '{f}'"),
            })?;
            if !(0.0..=1.0).contains(&x) {
                return Err(DatasetError::BadLine {
                    line: line_no,
                    msg: format!("coordinate {x} outside [0, 1]"),
                });
            }
            *slot = x;
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(DatasetError::BadLine {
                line: line_no,
                msg: "box width and height must be positive".into(),
            });
        }
        out.push(LabelRecord {
            class,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        });
    }
    Ok(out)
}

/// Serialises records with six decimals.
pub fn format_labels(records: &[LabelRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", r.class.id(), r.cx, r.cy, r.w, r.h);
    }
    s
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_label_file(&text)
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<(), DatasetError> {
    std::fs::write(path, format_labels(records)).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const IMAGE_EXT: &str = "ppm";
pub const LABEL_EXT: &str = "txt";

impl DatasetManifest {
    /// Every `*.ppm` in `dir` paired with its same-stem `.txt`, sorted by
    /// path. A missing label file stands for an image with no objects.
    pub fn discover(dir: &Path) -> Result<Self, DatasetError> {
        let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == IMAGE_EXT) && p.is_file())
            .collect();
        images.sort();
        Ok(DatasetManifest {
            entries: images
                .into_iter()
                .map(|image| ManifestEntry {
                    label: image.with_extension(LABEL_EXT),
                    image,
                    split: Split::Unassigned,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// `image<TAB>label<TAB>split` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.image.display(), e.label.display(), e.split.as_str());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let split = match parts.as_slice() {
                [_, _, "train"] => Split::Train,
                [_, _, "test"] => Split::Test,
                [_, _, "none"] => Split::Unassigned,
                _ => {
                    return Err(DatasetError::BadLine {
                        line: i + 1,
                        msg: "expected image<TAB>label<TAB>train|test|none".into(),
                    })
                }
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(parts[0]),
                label: PathBuf::from(parts[1]),
                split,
            });
        }
        Ok(DatasetManifest { entries })
    }
}

/// Seeded shuffle, then the first `n - floor(n * test_fraction)` entries go
/// to train and the rest to test. Entries keep their shuffled order.
pub fn split_dataset(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if manifest.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(DatasetError::Config(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let n = manifest.len();
    // Tolerance keeps e.g. 100 * 0.1 from flooring to 9.
    let n_test = ((n as f64 * test_fraction) + 1e-9).floor() as usize;
    let n_train = n - n_test;
    if n_test == 0 {
        log::warn!("split of {n} entries leaves the test set empty");
    }
    let mut entries = manifest.entries.clone();
    SplitMix64::new(seed).shuffle(&mut entries);
    for (i, e) in entries.iter_mut().enumerate() {
        e.split = if i < n_train { Split::Train } else { Split::Test };
    }
    Ok(DatasetManifest { entries })
}

/// Training hyperparameters written as `key=value` lines.
pub const TRAIN_CONFIG: &[(&str, &str)] = &[
    ("epochs", "100"),
    ("optimizer", "SGD"),
    ("batch", "16"),
    ("lr", "0.01"),
    ("momentum", "0.937"),
    ("weight_decay", "0.0005"),
    ("patience", "20"),
    ("iou_t", "0.01"),
    ("hsv_h", "0.015"),
    ("hsv_s", "0.7"),
    ("hsv_v", "0.4"),
];

pub fn train_config_text() -> String {
    TRAIN_CONFIG.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn emit_train_config(path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, train_config_text()).map_err(io_err(path))
}

pub fn parse_train_config(text: &str) -> Result<Vec<(String, String)>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| DatasetError::BadLine {
                    line: i + 1,
                    msg: "expected key=value".into(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            entries: (0..n)
                .map(|i| ManifestEntry {
                    image: PathBuf::from(format!("img{i:03}.ppm")),
                    label: PathBuf::from(format!("img{i:03}.txt")),
                    split: Split::Unassigned,
                })
                .collect(),
        }
    }

    #[test]
    fn parses_one_record() {
        let recs = parse_label_file("2 0.5 0.5 0.1 0.2").unwrap();
        assert_eq!(
            recs,
            vec![LabelRecord {
                class: MaturityClass::Mature,
                cx: 0.5,
                cy: 0.5,
                w: 0.1,
                h: 0.2
            }]
        );
        assert!(parse_label_file("").unwrap().is_empty());
        assert!(parse_label_file("\n  \n0 0.1 0.1 0.1 0.1\n\n").unwrap().len() == 1);
    }

    #[test]
    fn label_errors() {
        let err = parse_label_file("5 0.5 0.5 0.1 0.1").unwrap_err();
        assert_eq!(err.to_string(), "unknown class 5 at line 1");
        assert!(matches!(
            parse_label_file("0 0.5 0.5 0.1\n").unwrap_err(),
            DatasetError::BadLine { line: 1, .. }
        ));
        assert!(matches!(
            parse_label_file("\n0 0.5 1.5 0.1 0.1").unwrap_err(),
            DatasetError::BadLine { line: 2, .. }
        ));
        assert!(parse_label_file("1 0.5 0.5 0 0.1").is_err());
    }

    #[test]
    fn taxonomy_is_bijective() {
        for c in MaturityClass::ALL {
            assert_eq!(MaturityClass::from_id(c.id()), Some(c));
            assert_eq!(MaturityClass::from_name(c.name()), Some(c));
        }
        assert_eq!(MaturityClass::from_id(3), None);
    }

    #[test]
    fn split_ninety_ten() {
        let s = split_dataset(&manifest(100), 0.1, 7).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Test)), (90, 10));
        assert_eq!(s, split_dataset(&manifest(100), 0.1, 7).unwrap());
        assert_ne!(s, split_dataset(&manifest(100), 0.1, 8).unwrap());
    }

    #[test]
    fn split_small_sets_round_toward_train() {
        let s = split_dataset(&manifest(3), 0.1, 1).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Test)), (3, 0));
        assert!(matches!(split_dataset(&manifest(0), 0.1, 1), Err(DatasetError::Empty)));
    }

    #[test]
    fn split_partitions() {
        for n in [2, 9, 10, 11, 57] {
            let s = split_dataset(&manifest(n), 0.1, n as u64).unwrap();
            let mut images: Vec<_> = s.entries.iter().map(|e| e.image.clone()).collect();
            images.sort();
            assert_eq!(images, manifest(n).entries.iter().map(|e| e.image.clone()).collect::<Vec<_>>());
            let exact_test = n as f64 * 0.1;
            assert!((s.count(Split::Test) as f64 - exact_test).abs() < 1.0);
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let s = split_dataset(&manifest(12), 0.1, 3).unwrap();
        assert_eq!(DatasetManifest::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn discover_sorts_and_pairs() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.ppm", "a.ppm", "a.txt", "notes.md"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        let m = DatasetManifest::discover(dir.path()).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.image.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, vec!["a.ppm", "b.ppm"]);
        assert_eq!(m.entries[1].label, dir.path().join("b.txt"));
    }

    #[test]
    fn train_config_contents() {
        let text = train_config_text();
        assert!(text.lines().any(|l| l == "momentum=0.937"));
        assert!(text.lines().any(|l| l == "patience=20"));
        let parsed = parse_train_config(&text).unwrap();
        let expected: Vec<(String, String)> = TRAIN_CONFIG.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        assert_eq!(parsed, expected);
    }

    #[test]
    fn train_config_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("train.cfg");
        assert!(matches!(emit_train_config(&path), Err(DatasetError::Io { .. })));
    }
}
