//! Character corpora, CSV trajectories, splits and standardization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PsrnnError, Result};

/// One observation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sequence {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl Sequence {
    pub fn len(&self) -> usize {
        match self {
            Sequence::Discrete(s) => s.len(),
            Sequence::Continuous(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn symbols(&self) -> Option<&[usize]> {
        match self {
            Sequence::Discrete(s) => Some(s),
            Sequence::Continuous(_) => None,
        }
    }

    pub fn rows(&self) -> Option<&[Vec<f64>]> {
        match self {
            Sequence::Continuous(r) => Some(r),
            Sequence::Discrete(_) => None,
        }
    }

    /// Splits a sequence into `parts` contiguous pieces of equal length,
    /// dropping the remainder.
    pub fn chunks(&self, parts: usize) -> Vec<Sequence> {
        let n = self.len() / parts.max(1);
        if n == 0 {
            return Vec::new();
        }
        (0..parts)
            .map(|i| match self {
                Sequence::Discrete(s) => Sequence::Discrete(s[i * n..(i + 1) * n].to_vec()),
                Sequence::Continuous(r) => Sequence::Continuous(r[i * n..(i + 1) * n].to_vec()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    Discrete { alphabet: usize },
    Continuous { dim: usize },
}

/// Per-column affine map fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population statistics over every row of `seqs`. Constant columns get
    /// `std = 1`.
    pub fn fit(seqs: &[Sequence]) -> Result<Standardization> {
        let rows: Vec<&Vec<f64>> = seqs.iter().filter_map(Sequence::rows).flatten().collect();
        let Some(first) = rows.first() else {
            return Err(PsrnnError::EmptyData("no rows to standardize".into()));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, seq: &mut Sequence) {
        if let Sequence::Continuous(rows) = seq {
            for r in rows {
                for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Where the data came from and how it was split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sources: Vec<PathBuf>,
    /// Byte value of every symbol id, for character corpora; the id after
    /// the last one is UNK.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_alphabet: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<usize>,
    pub train_sequences: Vec<String>,
    pub test_sequences: Vec<String>,
    pub train_steps: usize,
    pub test_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DataKind,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
    pub manifest: Manifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl Dataset {
    /// Wraps pre-tokenized symbol sequences.
    pub fn from_symbols(train: Vec<Vec<usize>>, test: Vec<Vec<usize>>, alphabet: usize) -> Result<Dataset> {
        for s in train.iter().chain(&test) {
            if let Some(&bad) = s.iter().find(|&&v| v >= alphabet) {
                return Err(PsrnnError::InvalidArgument(format!(
                    "symbol {bad} outside alphabet of {alphabet}"
                )));
            }
        }
        let manifest = Manifest {
            sources: Vec::new(),
            byte_alphabet: None,
            unk: None,
            train_sequences: (0..train.len()).map(|i| format!("train[{i}]")).collect(),
            test_sequences: (0..test.len()).map(|i| format!("test[{i}]")).collect(),
            train_steps: train.iter().map(Vec::len).sum(),
            test_steps: test.iter().map(Vec::len).sum(),
        };
        Ok(Dataset {
            kind: DataKind::Discrete { alphabet },
            train: train.into_iter().map(Sequence::Discrete).collect(),
            test: test.into_iter().map(Sequence::Discrete).collect(),
            manifest,
            standardization: None,
        })
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            DataKind::Discrete { alphabet } => alphabet,
            DataKind::Continuous { dim } => dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, DataKind::Discrete { .. })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Dataset> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Byte-level corpus split at `round(len · split_fraction)`. The alphabet is
/// the sorted set of bytes in the training part; test bytes outside it map
/// to the UNK id, which is always reserved.
pub fn load_chars(path: &Path, split_fraction: f64) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| PsrnnError::io(path, e))?;
    chars_from_bytes(&bytes, split_fraction, vec![path.to_path_buf()])
}

pub fn chars_from_bytes(bytes: &[u8], split_fraction: f64, sources: Vec<PathBuf>) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&split_fraction) || split_fraction == 0.0 {
        return Err(PsrnnError::InvalidArgument(format!(
            "split fraction must be in (0, 1], got {split_fraction}"
        )));
    }
    if bytes.is_empty() {
        return Err(PsrnnError::EmptyCorpus);
    }
    let cut = ((bytes.len() as f64 * split_fraction).round() as usize).clamp(1, bytes.len());
    let (train, test) = bytes.split_at(cut);
    let mut alphabet: Vec<u8> = train.to_vec();
    alphabet.sort_unstable();
    alphabet.dedup();
    let unk = alphabet.len();
    let mut lookup = [unk; 256];
    for (id, &b) in alphabet.iter().enumerate() {
        lookup[b as usize] = id;
    }
    let encode = |s: &[u8]| -> Vec<usize> { s.iter().map(|&b| lookup[b as usize]).collect() };
    let test_seqs = if test.is_empty() {
        Vec::new()
    } else {
        vec![Sequence::Discrete(encode(test))]
    };
    Ok(Dataset {
        kind: DataKind::Discrete { alphabet: unk + 1 },
        manifest: Manifest {
            sources,
            byte_alphabet: Some(alphabet),
            unk: Some(unk),
            train_sequences: vec![format!("bytes[0..{cut})")],
            test_sequences: if test.is_empty() {
                Vec::new()
            } else {
                vec![format!("bytes[{cut}..{})", bytes.len())]
            },
            train_steps: train.len(),
            test_steps: test.len(),
        },
        train: vec![Sequence::Discrete(encode(train))],
        test: test_seqs,
        standardization: None,
    })
}

/// How trajectory files are divided between train and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    /// The first `n` files (in sorted order) train.
    TrainFiles(usize),
    /// The first `round(f · files)` files train, at least one.
    Fraction(f64),
}

/// Resolves a directory (all `*.csv` inside), a glob pattern or a single
/// file into a sorted file list.
pub fn resolve_paths(spec: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(spec);
    let pattern = if path.is_dir() {
        path.join("*.csv").to_string_lossy().into_owned()
    } else if spec.contains(['*', '?', '[']) {
        spec.to_string()
    } else {
        if !path.exists() {
            return Err(PsrnnError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        return Ok(vec![path.to_path_buf()]);
    };
    let mut out: Vec<PathBuf> = glob::glob(&pattern)
        .map_err(|e| PsrnnError::InvalidArgument(format!("bad pattern {pattern}: {e}")))?
        .filter_map(std::result::Result::ok)
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(PsrnnError::EmptyData(format!("no files match {pattern}")));
    }
    Ok(out)
}

/// Parses one numeric CSV file; a first row with any non-numeric cell is
/// taken as a header.
pub fn read_trajectory(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(std::result::Result::is_err) {
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(PsrnnError::RaggedRows {
                file: path.to_path_buf(),
                row: i,
                expected,
                found: rec.len(),
            });
        }
        let mut row = Vec::with_capacity(rec.len());
        for (col, (v, raw)) in parsed.into_iter().zip(rec.iter()).enumerate() {
            match v {
                Ok(x) if x.is_finite() => row.push(x),
                _ => {
                    return Err(PsrnnError::NonNumeric {
                        file: path.to_path_buf(),
                        row: i,
                        col,
                        value: raw.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(PsrnnError::EmptyData(format!("{} has no data rows", path.display())));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> PsrnnError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PsrnnError::io(path, io),
        other => PsrnnError::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

/// One sequence per file, standardized with statistics from the training
/// files only.
pub fn load_trajectories(spec: &str, split: Split) -> Result<Dataset> {
    let files = resolve_paths(spec)?;
    let seqs = files.iter().map(|f| read_trajectory(f)).collect::<Result<Vec<_>>>()?;
    trajectories_from_rows(files, seqs, split)
}

pub fn trajectories_from_rows(files: Vec<PathBuf>, rows: Vec<Vec<Vec<f64>>>, split: Split) -> Result<Dataset> {
    let n = rows.len();
    if n == 0 {
        return Err(PsrnnError::EmptyData("no trajectories".into()));
    }
    let dim = rows[0][0].len();
    for (f, r) in files.iter().zip(&rows) {
        if r[0].len() != dim {
            return Err(PsrnnError::RaggedRows {
                file: f.clone(),
                row: 0,
                expected: dim,
                found: r[0].len(),
            });
        }
    }
    let n_train = match split {
        Split::TrainFiles(k) => k,
        Split::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(PsrnnError::InvalidArgument(format!(
                    "split fraction must be in (0, 1], got {f}"
                )));
            }
            ((n as f64 * f).round() as usize).max(1)
        }
    };
    if n_train == 0 || n_train > n {
        return Err(PsrnnError::InvalidArgument(format!(
            "cannot train on {n_train} of {n} files"
        )));
    }
    let mut seqs: Vec<Sequence> = rows.into_iter().map(Sequence::Continuous).collect();
    let test = seqs.split_off(n_train);
    let mut train = seqs;
    let stats = Standardization::fit(&train)?;
    let mut test = test;
    for s in train.iter_mut().chain(test.iter_mut()) {
        stats.apply(s);
    }
    let name = |p: &PathBuf| p.to_string_lossy().into_owned();
    Ok(Dataset {
        kind: DataKind::Continuous { dim },
        manifest: Manifest {
            train_sequences: files[..n_train].iter().map(name).collect(),
            test_sequences: files[n_train..].iter().map(name).collect(),
            train_steps: train.iter().map(Sequence::len).sum(),
            test_steps: test.iter().map(Sequence::len).sum(),
            sources: files,
            byte_alphabet: None,
            unk: None,
        },
        train,
        test,
        standardization: Some(stats),
    })
}
