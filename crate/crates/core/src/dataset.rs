//! Collections of observation sequences, on-disk persistence and splits.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VindError};
use crate::io::{read_f64s, write_f64s};
use crate::nn::Mat;

pub const TRIALSET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialSetMeta {
    pub seed: u64,
    /// Free-form description of how the data were produced.
    pub generator: serde_json::Value,
    /// Partition this set belongs to, if it came out of [`split`].
    pub split: Option<String>,
    /// Index of each trial in the set it was split from.
    pub source_indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    /// Each `T_i × d_X`.
    pub trials: Vec<Mat>,
    pub latents: Option<Vec<Mat>>,
    pub meta: TrialSetMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    n_trials: usize,
    d_x: usize,
    lengths: Vec<usize>,
    d_latent: Option<usize>,
    seed: u64,
    generator: serde_json::Value,
    split: Option<String>,
    source_indices: Option<Vec<usize>>,
    files: Vec<String>,
    latent_files: Option<Vec<String>>,
    #[serde(default)]
    extra: serde_json::Value,
}

impl TrialSet {
    pub fn new(trials: Vec<Mat>, latents: Option<Vec<Mat>>, meta: TrialSetMeta) -> Result<Self> {
        if let Some(first) = trials.first() {
            let d_x = first.ncols();
            if let Some(i) = trials.iter().position(|x| x.ncols() != d_x) {
                return Err(VindError::InvalidData(format!(
                    "trial {i} has {} columns, trial 0 has {d_x}",
                    trials[i].ncols()
                )));
            }
        }
        if let Some(lat) = &latents {
            if lat.len() != trials.len() {
                return Err(VindError::InvalidData(format!(
                    "{} latent paths for {} trials",
                    lat.len(),
                    trials.len()
                )));
            }
            for (i, (z, x)) in lat.iter().zip(&trials).enumerate() {
                if z.nrows() != x.nrows() {
                    return Err(VindError::InvalidData(format!("latent path {i} length differs from its trial")));
                }
            }
        }
        Ok(Self { trials, latents, meta })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn d_x(&self) -> Option<usize> {
        self.trials.first().map(|x| x.ncols())
    }

    /// Writes `manifest.json` and one raw little-endian `f64` file per trial
    /// (row-major `T × d_X`), plus latent files when present.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with_extra(dir, serde_json::Value::Null)
    }

    /// Like [`TrialSet::save`], embedding `extra` in the manifest.
    pub fn save_with_extra(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let files: Vec<String> = (0..self.len()).map(|i| format!("trial_{i:05}.f64")).collect();
        for (x, name) in self.trials.iter().zip(&files) {
            write_matrix(&dir.join(name), x)?;
        }
        let latent_files = match &self.latents {
            Some(lat) => {
                let names: Vec<String> = (0..self.len()).map(|i| format!("latent_{i:05}.f64")).collect();
                for (z, name) in lat.iter().zip(&names) {
                    write_matrix(&dir.join(name), z)?;
                }
                Some(names)
            }
            None => None,
        };
        let manifest = Manifest {
            format_version: TRIALSET_FORMAT_VERSION,
            n_trials: self.len(),
            d_x: self.d_x().unwrap_or(0),
            lengths: self.trials.iter().map(|x| x.nrows()).collect(),
            d_latent: self.latents.as_ref().and_then(|l| l.first().map(|z| z.ncols())),
            seed: self.meta.seed,
            generator: self.meta.generator.clone(),
            split: self.meta.split.clone(),
            source_indices: self.meta.source_indices.clone(),
            files,
            latent_files,
            extra,
        };
        let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
        if manifest.format_version != TRIALSET_FORMAT_VERSION {
            return Err(VindError::Format(format!("unsupported trial set version {}", manifest.format_version)));
        }
        if manifest.files.len() != manifest.n_trials || manifest.lengths.len() != manifest.n_trials {
            return Err(VindError::Format("manifest trial counts disagree".into()));
        }
        let trials = manifest
            .files
            .iter()
            .zip(&manifest.lengths)
            .map(|(f, &t)| read_matrix(&dir.join(f), t, manifest.d_x))
            .collect::<Result<Vec<_>>>()?;
        let latents = match (&manifest.latent_files, manifest.d_latent) {
            (Some(files), Some(d)) => Some(
                files
                    .iter()
                    .zip(&manifest.lengths)
                    .map(|(f, &t)| read_matrix(&dir.join(f), t, d))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let meta = TrialSetMeta {
            seed: manifest.seed,
            generator: manifest.generator,
            split: manifest.split,
            source_indices: manifest.source_indices,
        };
        TrialSet::new(trials, latents, meta)
    }

    fn subset(&self, idx: &[usize], tag: &str) -> TrialSet {
        let source = self.meta.source_indices.clone();
        TrialSet {
            trials: idx.iter().map(|&i| self.trials[i].clone()).collect(),
            latents: self.latents.as_ref().map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
            meta: TrialSetMeta {
                seed: self.meta.seed,
                generator: self.meta.generator.clone(),
                split: Some(tag.to_string()),
                source_indices: Some(idx.iter().map(|&i| source.as_ref().map_or(i, |s| s[i])).collect()),
            },
        }
    }
}

fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_f64s(&mut w, m.transpose().as_slice())?;
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let expected = (rows * cols * 8) as u64;
    let actual = fs::metadata(path)?.len();
    if actual != expected {
        return Err(VindError::Format(format!(
            "{} holds {actual} bytes, expected {expected} for {rows} × {cols}",
            path.display()
        )));
    }
    let v = read_f64s(&mut BufReader::new(File::open(path)?), rows * cols)?;
    Ok(Mat::from_row_slice(rows, cols, &v))
}

/// Shuffled partition into `(train, test, validation)`. Train and test
/// sizes are `round(n·f)`; validation takes the remainder.
pub fn split(set: &TrialSet, fractions: [f64; 3], seed: u64) -> Result<(TrialSet, TrialSet, TrialSet)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(VindError::InvalidConfig(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = set.len();
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_test = (n as f64 * fractions[1]).round() as usize;
    if n_train + n_test > n {
        return Err(VindError::InvalidConfig(format!("split {fractions:?} of {n} trials overflows")));
    }
    let sizes = [n_train, n_test, n - n_train - n_test];
    for (k, name) in ["train", "test", "validation"].iter().enumerate() {
        if fractions[k] > 0.0 && sizes[k] == 0 {
            return Err(VindError::InvalidConfig(format!(
                "{name} partition would be empty ({n} trials, fractions {fractions:?})"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, rest) = order.split_at(n_train);
    let (b, c) = rest.split_at(n_test);
    Ok((set.subset(a, "train"), set.subset(b, "test"), set.subset(c, "validation")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_set(n: usize) -> TrialSet {
        let trials = (0..n).map(|i| Mat::from_fn(3 + i % 4, 2, |t, j| (i * 100 + t * 10 + j) as f64 + 0.25)).collect();
        let latents = (0..n).map(|i| Mat::from_fn(3 + i % 4, 3, |t, j| -((i + t + j) as f64))).collect();
        TrialSet::new(
            trials,
            Some(latents),
            TrialSetMeta {
                seed: 4,
                generator: serde_json::json!({"kind": "toy"}),
                ..TrialSetMeta::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn default_split_sizes() {
        let (a, b, c) = split(&toy_set(100), [0.66, 0.17, 0.17], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (66, 17, 17));
        assert_eq!(a.meta.split.as_deref(), Some("train"));
    }

    #[test]
    fn everything_in_train() {
        let (a, b, c) = split(&toy_set(10), [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (10, 0, 0));
    }

    #[test]
    fn empty_partition_is_rejected() {
        assert!(matches!(split(&toy_set(2), [0.5, 0.25, 0.25], 0), Err(VindError::InvalidConfig(_))));
        assert!(matches!(split(&toy_set(5), [0.5, 0.6, 0.0], 0), Err(VindError::InvalidConfig(_))));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let r = TrialSet::new(vec![Mat::zeros(2, 2), Mat::zeros(2, 3)], None, TrialSetMeta::default());
        assert!(matches!(r, Err(VindError::InvalidData(_))));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(5);
        set.save(dir.path()).unwrap();
        assert_eq!(TrialSet::load(dir.path()).unwrap(), set);
        let single = TrialSet::new(vec![set.trials[0].clone()], None, TrialSetMeta::default()).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        single.save(d2.path()).unwrap();
        assert_eq!(TrialSet::load(d2.path()).unwrap(), single);
    }

    #[test]
    fn raw_files_are_row_major_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let set = TrialSet::new(vec![Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])], None, TrialSetMeta::default()).unwrap();
        set.save(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("trial_00000.f64")).unwrap();
        let vals: Vec<f64> = bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy_set(2).save(dir.path()).unwrap();
        let p = dir.path().join("trial_00001.f64");
        let b = fs::read(&p).unwrap();
        fs::write(&p, &b[..b.len() - 8]).unwrap();
        assert!(matches!(TrialSet::load(dir.path()), Err(VindError::Format(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_disjoint_cover(n in 5usize..60, seed in 0u64..1000) {
            let set = toy_set(n);
            let (a, b, c) = split(&set, [0.6, 0.2, 0.2], seed).unwrap();
            let mut all: Vec<usize> = [&a, &b, &c]
                .iter()
                .flat_map(|s| s.meta.source_indices.clone().unwrap())
                .collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for part in [&a, &b, &c] {
                for (x, &i) in part.trials.iter().zip(part.meta.source_indices.as_ref().unwrap()) {
                    prop_assert_eq!(x, &set.trials[i]);
                }
            }
        }
    }
}
